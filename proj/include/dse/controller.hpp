#pragma once

#include "dse/machine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dse::sim {

// First-order-lag stand-ins for the exciter and governor: the AVR drives Efd
// toward a proportional voltage-error target, the droop governor drives Pm
// toward a speed-error target. Both saturate at configured limits.
struct ControllerGains {
    bool avr_enabled = true;
    double avr_gain = 10.0;     // Efd per p.u. voltage error
    double avr_lag = 0.5;       // s
    double efd_min = 0.0, efd_max = 8.0;

    bool gov_enabled = true;
    double gov_droop = 25.0;    // Pm per p.u. speed deviation
    double gov_lag = 1.0;       // s
    double pm_min = -2.0, pm_max = 2.0;
};

struct ControlSetpoints {
    double v_ref = 1.0;   // terminal voltage reference, p.u.
    double efd_set = 1.0; // field voltage at zero error
    double pm_set = 0.0;  // dispatch mechanical power
};

inline ControlInput controller_step(const ControlInput& ctrl, const ControlSetpoints& refs,
                                    double v_meas, double domega_meas, double dt,
                                    const ControllerGains& gains, double omega0) {
    if (!(dt > 0.0)) throw std::invalid_argument("controller_step: dt must be > 0");
    ControlInput next = ctrl;
    if (gains.avr_enabled) {
        const double target = refs.efd_set + gains.avr_gain * (refs.v_ref - v_meas);
        // exact lag response for a target held over the step
        const double a = 1.0 - std::exp(-dt / gains.avr_lag);
        next.Efd = std::clamp(ctrl.Efd + a * (target - ctrl.Efd), gains.efd_min, gains.efd_max);
    }
    if (gains.gov_enabled) {
        const double target = refs.pm_set - gains.gov_droop * (domega_meas / omega0);
        const double a = 1.0 - std::exp(-dt / gains.gov_lag);
        next.Pm = std::clamp(ctrl.Pm + a * (target - ctrl.Pm), gains.pm_min, gains.pm_max);
    }
    return next;
}

} // namespace dse::sim
