#pragma once

#include "dse/state_space.hpp"

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>

namespace dse::filter {

struct SigmaConfig {
    double alpha = 1e-3;
    double beta_u = 2.0;
    double kappa = 0.0;
};

struct UkfState {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    SigmaConfig sigma;
};

namespace detail {

inline void symmetrize(Eigen::MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

// Cholesky factor with an eigenvalue floor fallback.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& cov) {
    Eigen::MatrixXd c = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    if (es.info() != Eigen::Success) throw std::runtime_error("covariance not PSD");
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    c = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    c += 1e-12 * Eigen::MatrixXd::Identity(c.rows(), c.cols());
    llt.compute(c);
    if (llt.info() != Eigen::Success) throw std::runtime_error("covariance not PSD");
    return llt.matrixL();
}

struct SigmaPoints {
    Eigen::MatrixXd points; // n x (2n+1)
    Eigen::VectorXd wm, wc;
};

inline SigmaPoints sigma_points(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const SigmaConfig& cfg) {
    const auto n = static_cast<int>(mean.size());
    const double lambda = cfg.alpha * cfg.alpha * (n + cfg.kappa) - n;
    SigmaPoints sp;
    sp.points.resize(n, 2 * n + 1);
    sp.wm.resize(2 * n + 1);
    sp.wc.resize(2 * n + 1);
    Eigen::MatrixXd s = sqrt_psd(cov) * std::sqrt(n + lambda);
    sp.points.col(0) = mean;
    for (int i = 0; i < n; ++i) {
        sp.points.col(1 + i) = mean + s.col(i);
        sp.points.col(1 + n + i) = mean - s.col(i);
    }
    sp.wm[0] = lambda / (n + lambda);
    sp.wc[0] = sp.wm[0] + (1.0 - cfg.alpha * cfg.alpha + cfg.beta_u);
    for (int i = 1; i < 2 * n + 1; ++i) sp.wm[i] = sp.wc[i] = 0.5 / (n + lambda);
    return sp;
}

} // namespace detail

// Scaled unscented prediction through an arbitrary (noise-free) transition.
inline UkfState ukf_predict(const UkfState& ukf,
                            const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& transition,
                            const Eigen::MatrixXd& q) {
    auto sp = detail::sigma_points(ukf.mean, ukf.cov, ukf.sigma);
    const auto n_pts = static_cast<int>(sp.points.cols());
    Eigen::MatrixXd prop(ukf.mean.size(), n_pts);
    for (int i = 0; i < n_pts; ++i) prop.col(i) = transition(sp.points.col(i));
    UkfState out = ukf;
    out.mean = prop * sp.wm;
    out.cov = q;
    for (int i = 0; i < n_pts; ++i) {
        Eigen::VectorXd d = prop.col(i) - out.mean;
        out.cov += sp.wc[i] * d * d.transpose();
    }
    detail::symmetrize(out.cov);
    return out;
}

// Standard unscented measurement update through a (noise-free) map.
inline UkfState ukf_update(const UkfState& ukf, const Eigen::VectorXd& z,
                           const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& measurement,
                           const Eigen::MatrixXd& r) {
    auto sp = detail::sigma_points(ukf.mean, ukf.cov, ukf.sigma);
    const auto n_pts = static_cast<int>(sp.points.cols());
    const auto mdim = static_cast<int>(z.size());
    Eigen::MatrixXd zs(mdim, n_pts);
    for (int i = 0; i < n_pts; ++i) zs.col(i) = measurement(sp.points.col(i));
    Eigen::VectorXd z_hat = zs * sp.wm;
    Eigen::MatrixXd s = r;
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(ukf.mean.size(), mdim);
    for (int i = 0; i < n_pts; ++i) {
        Eigen::VectorXd dz = zs.col(i) - z_hat;
        Eigen::VectorXd dx = sp.points.col(i) - ukf.mean;
        s += sp.wc[i] * dz * dz.transpose();
        c += sp.wc[i] * dx * dz.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 1e-12)
        throw std::runtime_error("singular innovation covariance");
    Eigen::MatrixXd gain = s.ldlt().solve(c.transpose()).transpose();
    UkfState out = ukf;
    out.mean = ukf.mean + gain * (z - z_hat);
    out.cov = ukf.cov - gain * s * gain.transpose();
    detail::symmetrize(out.cov);
    return out;
}

// Convenience wrappers binding the generator model: the transition uses the
// discrete map with an externally supplied control assumption, the update
// runs the measurement map at the current noisy phasor input.
inline UkfState ukf_predict(const UkfState& ukf, const statespace::DiscreteModel& model,
                            const Eigen::Vector2d& y_k, const Eigen::Vector2d& u_assumed,
                            const Eigen::MatrixXd& q) {
    return ukf_predict(
        ukf, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return model.step(x, y_k, u_assumed); }, q);
}

inline UkfState ukf_update(const UkfState& ukf, const statespace::DiscreteModel& model,
                           const Eigen::Vector2d& y_k, const Eigen::Vector4d& z_k, const Eigen::MatrixXd& r) {
    return ukf_update(
        ukf, z_k, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return model.measure(x, y_k); }, r);
}

} // namespace dse::filter
