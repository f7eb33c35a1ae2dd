#include "dse/scenarios.hpp"
#include "dse/ukf.hpp"
#include "dse/var.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace dse;
using namespace dse::filter;

namespace {

// Closed-form Kalman filter, the oracle for the linear-Gaussian case.
struct Kf {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    void predict(const Eigen::MatrixXd& f, const Eigen::VectorXd& c, const Eigen::MatrixXd& q) {
        mean = f * mean + c;
        cov = f * cov * f.transpose() + q;
    }
    void update(const Eigen::MatrixXd& h, const Eigen::VectorXd& z, const Eigen::MatrixXd& r) {
        Eigen::MatrixXd s = h * cov * h.transpose() + r;
        Eigen::MatrixXd k = cov * h.transpose() * s.inverse();
        mean += k * (z - h * mean);
        cov = (Eigen::MatrixXd::Identity(cov.rows(), cov.cols()) - k * h) * cov;
    }
};

} // namespace

TEST_CASE("unscented filter equals the Kalman filter on a linear-Gaussian system") {
    const int n = 4, m = 2;
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> dist(-0.3, 0.3);
    Eigen::MatrixXd f(n, n), h(m, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) f(i, j) = dist(gen) + (i == j ? 0.7 : 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) h(i, j) = dist(gen);
    Eigen::VectorXd c(n);
    for (int i = 0; i < n; ++i) c[i] = dist(gen);
    Eigen::MatrixXd q = 1e-4 * Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd r = 1e-3 * Eigen::MatrixXd::Identity(m, m);

    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Zero(n);
    ukf.cov = Eigen::MatrixXd::Identity(n, n);
    Kf kf{ukf.mean, ukf.cov};

    Eigen::VectorXd truth = Eigen::VectorXd::Ones(n);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int step = 0; step < 100; ++step) {
        truth = f * truth + c;
        Eigen::VectorXd z = h * truth;
        for (int i = 0; i < m; ++i) z[i] += std::sqrt(r(i, i)) * noise(gen);

        ukf = ukf_predict(
            ukf, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return f * x + c; }, q);
        kf.predict(f, c, q);
        REQUIRE((ukf.mean - kf.mean).cwiseAbs().maxCoeff() < 1e-8);
        REQUIRE((ukf.cov - kf.cov).cwiseAbs().maxCoeff() < 1e-8);

        ukf = ukf_update(
            ukf, z, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return h * x; }, r);
        kf.update(h, z, r);
        REQUIRE((ukf.mean - kf.mean).cwiseAbs().maxCoeff() < 1e-8);
        REQUIRE((ukf.cov - kf.cov).cwiseAbs().maxCoeff() < 1e-8);

        // PSD invariant
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ukf.cov);
        REQUIRE(es.eigenvalues().minCoeff() > -1e-10);
    }
}

TEST_CASE("degenerate prior collapses the sigma spread") {
    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Ones(3);
    ukf.cov = Eigen::MatrixXd::Zero(3, 3);
    auto ukf2 = ukf_predict(
        ukf, [](const Eigen::VectorXd& x) -> Eigen::VectorXd { return 2.0 * x.array().square().matrix(); },
        Eigen::MatrixXd::Zero(3, 3));
    REQUIRE((ukf2.mean - Eigen::VectorXd::Constant(3, 2.0)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("identity dynamics with zero process noise keep the prior") {
    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Random(5);
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 5);
    ukf.cov = a * a.transpose() + Eigen::MatrixXd::Identity(5, 5);
    auto out = ukf_predict(
        ukf, [](const Eigen::VectorXd& x) { return x; }, Eigen::MatrixXd::Zero(5, 5));
    REQUIRE((out.mean - ukf.mean).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE((out.cov - ukf.cov).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("an uninformative measurement leaves the posterior at the prior") {
    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Ones(4);
    ukf.cov = 0.5 * Eigen::MatrixXd::Identity(4, 4);
    Eigen::MatrixXd h = Eigen::MatrixXd::Random(2, 4);
    Eigen::VectorXd z = Eigen::VectorXd::Random(2);
    auto out = ukf_update(
        ukf, z, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return h * x; },
        1e12 * Eigen::MatrixXd::Identity(2, 2));
    REQUIRE((out.mean - ukf.mean).cwiseAbs().maxCoeff() / ukf.mean.norm() < 1e-4);
    REQUIRE((out.cov - ukf.cov).cwiseAbs().maxCoeff() / ukf.cov.norm() < 1e-4);
}

TEST_CASE("zero innovation leaves the mean unchanged") {
    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Ones(3);
    ukf.cov = 0.1 * Eigen::MatrixXd::Identity(3, 3);
    Eigen::MatrixXd h = Eigen::MatrixXd::Identity(2, 3);
    // measure exactly the predicted measurement of the linear map
    Eigen::VectorXd z = h * ukf.mean;
    auto out = ukf_update(
        ukf, z, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return h * x; },
        1e-2 * Eigen::MatrixXd::Identity(2, 2));
    REQUIRE((out.mean - ukf.mean).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("singular innovation covariance raises an error") {
    UkfState ukf;
    ukf.mean = Eigen::VectorXd::Zero(2);
    ukf.cov = Eigen::MatrixXd::Identity(2, 2);
    // a constant measurement map with zero measurement noise leaves no
    // innovation spread at all
    REQUIRE_THROWS_AS(ukf_update(
                          ukf, Eigen::VectorXd::Zero(1),
                          [](const Eigen::VectorXd&) -> Eigen::VectorXd { return Eigen::VectorXd::Ones(1); },
                          Eigen::MatrixXd::Zero(1, 1)),
                      std::runtime_error);
}

TEST_CASE("per-machine filters are invariant to machine ordering") {
    using namespace dse::sim;
    using namespace dse::statespace;
    Scenario sc = three_machine_scenario();
    sc.duration = 3.0;
    EventScript ev;
    ev.kind = EventKind::short_circuit;
    ev.t_start = 1.0;
    ev.duration = 0.1;
    ev.magnitude = 0.45;
    ev.location = 1;
    sc.events = {ev};
    auto traj = simulate_trajectory(sc);
    NoiseSpec noise = NoiseSpec::pmu_default();
    noise.seed = 31;
    auto mt = make_measured(traj, noise);

    auto run_machine = [&](int m) {
        DiscreteModel model;
        model.params = sc.machines[m].params;
        Eigen::MatrixXd q = 1e-6 * Eigen::MatrixXd::Identity(kStateDim, kStateDim);
        Eigen::MatrixXd r = 1e-4 * Eigen::MatrixXd::Identity(kMeasDim, kMeasDim);
        UkfRunner runner(model, q, r);
        runner.init_from_measurement(mt.meas[m].col(0), mt.phasors[m].col(0));
        Eigen::MatrixXd means(kStateDim, mt.n_samples() - 1);
        for (int k = 1; k < mt.n_samples(); ++k)
            means.col(k - 1) = runner.step(mt.meas[m].col(k), mt.phasors[m].col(k)).mean;
        return means;
    };

    std::vector<Eigen::MatrixXd> order_a, order_b;
    for (int m : {0, 1, 2}) order_a.push_back(run_machine(m));
    for (int m : {2, 0, 1}) order_b.push_back(run_machine(m));
    REQUIRE((order_a[0] - order_b[1]).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((order_a[1] - order_b[2]).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((order_a[2] - order_b[0]).cwiseAbs().maxCoeff() == 0.0);
}
