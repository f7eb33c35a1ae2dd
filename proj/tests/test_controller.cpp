#include "dse/controller.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace dse::sim;

TEST_CASE("controller is a fixed point at its setpoints") {
    ControllerGains gains;
    ControlSetpoints refs{1.0, 1.5, 0.8};
    ControlInput u{0.8, 1.5};
    auto next = controller_step(u, refs, 1.0, 0.0, 1e-3, gains, 2 * M_PI * 60);
    REQUIRE(next.Pm == Catch::Approx(u.Pm).margin(1e-15));
    REQUIRE(next.Efd == Catch::Approx(u.Efd).margin(1e-15));
}

TEST_CASE("field voltage rises when the terminal voltage sags") {
    ControllerGains gains;
    ControlSetpoints refs{1.0, 1.5, 0.8};
    ControlInput u{0.8, 1.5};
    auto next = controller_step(u, refs, 0.95, 0.0, 1e-3, gains, 2 * M_PI * 60);
    REQUIRE(next.Efd > u.Efd);
}

TEST_CASE("first-order lag settles within 1% after five time constants") {
    ControllerGains gains;
    gains.avr_lag = 0.5;
    gains.gov_lag = 1.0;
    ControlSetpoints refs{1.0, 1.5, 0.8};
    ControlInput u{0.0, 0.0};
    const double dt = 1e-3;
    const double horizon = 5.0 * std::max(gains.avr_lag, gains.gov_lag);
    const double omega0 = 2 * M_PI * 60;
    // constant error drives constant targets
    const double v_meas = 0.99, dom = -0.01;
    const double efd_target = refs.efd_set + gains.avr_gain * (refs.v_ref - v_meas);
    const double pm_target = refs.pm_set - gains.gov_droop * (dom / omega0);
    for (double t = 0.0; t < horizon; t += dt) u = controller_step(u, refs, v_meas, dom, dt, gains, omega0);
    REQUIRE(std::abs(u.Efd - efd_target) < 0.01 * std::abs(efd_target));
    REQUIRE(std::abs(u.Pm - pm_target) < 0.01 * std::abs(pm_target));
}

TEST_CASE("controller saturates at its limits") {
    ControllerGains gains;
    gains.efd_max = 2.0;
    ControlSetpoints refs{1.0, 1.5, 0.8};
    ControlInput u{0.8, 1.99};
    for (int i = 0; i < 2000; ++i) u = controller_step(u, refs, 0.5, 0.0, 1e-3, gains, 2 * M_PI * 60);
    REQUIRE(u.Efd == Catch::Approx(2.0));
    REQUIRE_THROWS_AS(controller_step(u, refs, 1.0, 0.0, 0.0, gains, 2 * M_PI * 60), std::invalid_argument);
}
