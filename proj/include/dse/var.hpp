#pragma once

#include "dse/machine.hpp"
#include "dse/ukf.hpp"

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace dse::filter {

// Vector autoregression over the control channels, least-squares fitted.
struct VarModel {
    int order = 1;
    std::vector<Eigen::MatrixXd> coeffs; // one dim x dim matrix per lag
    Eigen::VectorXd intercept;

    int dim() const { return static_cast<int>(intercept.size()); }
};

// history is dim x T, columns ordered oldest to newest.
inline VarModel var_fit(const Eigen::MatrixXd& history, int order, double ridge_lambda = 1e-8) {
    if (order < 1) throw std::invalid_argument("var_fit: order must be >= 1");
    const auto dim = static_cast<int>(history.rows());
    const auto t = static_cast<int>(history.cols());
    const int k = 1 + dim * order;
    if (t <= order * dim + 1 || t - order < k)
        throw std::invalid_argument("var_fit: insufficient history");

    const int n = t - order;
    Eigen::MatrixXd design(n, k);
    Eigen::MatrixXd target(n, dim);
    for (int row = 0; row < n; ++row) {
        const int t_now = order + row;
        design(row, 0) = 1.0;
        for (int lag = 1; lag <= order; ++lag)
            design.block(row, 1 + (lag - 1) * dim, 1, dim) = history.col(t_now - lag).transpose();
        target.row(row) = history.col(t_now).transpose();
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    Eigen::MatrixXd beta; // k x dim
    if (qr.rank() < k) {
        Eigen::MatrixXd gram = design.transpose() * design;
        gram += ridge_lambda * Eigen::MatrixXd::Identity(k, k);
        beta = gram.ldlt().solve(design.transpose() * target);
    } else {
        beta = qr.solve(target);
    }

    VarModel model;
    model.order = order;
    model.intercept = beta.row(0).transpose();
    model.coeffs.resize(static_cast<std::size_t>(order));
    for (int lag = 1; lag <= order; ++lag)
        model.coeffs[static_cast<std::size_t>(lag - 1)] = beta.middleRows(1 + (lag - 1) * dim, dim).transpose();
    return model;
}

// One-step-ahead prediction from the newest `order` columns. A history
// shorter than the model order falls back to holding the last value.
inline Eigen::VectorXd var_predict(const VarModel& model, const Eigen::MatrixXd& history) {
    if (history.cols() == 0) throw std::invalid_argument("var_predict: empty history");
    if (history.cols() < model.order || model.coeffs.empty()) return history.col(history.cols() - 1);
    Eigen::VectorXd u = model.intercept;
    for (int lag = 1; lag <= model.order; ++lag)
        u += model.coeffs[static_cast<std::size_t>(lag - 1)] * history.col(history.cols() - lag);
    return u;
}

enum class ControlAssumption { hold_initial, zero };

// Conventional UKF over one generator with a fixed control assumption.
class UkfRunner {
public:
    UkfRunner(const statespace::DiscreteModel& model, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
              ControlAssumption assumption = ControlAssumption::hold_initial)
        : model_(model), q_(q), r_(r), assumption_(assumption) {}

    // Innovation-based start: a measurement-consistent equilibrium with a
    // loose prior.
    void init_from_measurement(const Eigen::Vector4d& z0, const Eigen::Vector2d& y0, double prior_var = 1e-2) {
        auto [st, u] = sim::machine_equilibrium_from_phasors(model_.params, std::polar(z0[0], z0[1]),
                                                             std::polar(y0[0], y0[1]));
        state_.mean = st.vec();
        state_.cov = prior_var * Eigen::MatrixXd::Identity(sim::kStateDim, sim::kStateDim);
        u0_ = Eigen::Vector2d(u.Pm, u.Efd);
        initialized_ = true;
    }

    Eigen::Vector2d assumed_control() const {
        return assumption_ == ControlAssumption::zero ? Eigen::Vector2d::Zero().eval() : u0_;
    }

    const UkfState& step(const Eigen::Vector4d& z_k, const Eigen::Vector2d& y_k) {
        if (!initialized_) throw std::runtime_error("ukf runner not initialized");
        state_ = ukf_predict(state_, model_, y_k, assumed_control(), q_);
        state_ = ukf_update(state_, model_, y_k, z_k, r_);
        return state_;
    }

    const UkfState& state() const { return state_; }
    UkfState& state() { return state_; }

private:
    statespace::DiscreteModel model_;
    Eigen::MatrixXd q_, r_;
    ControlAssumption assumption_;
    UkfState state_;
    Eigen::Vector2d u0_ = Eigen::Vector2d::Zero();
    bool initialized_ = false;
};

struct UkfVarConfig {
    int var_order = 2;
    int refit_interval = 30;
    int max_history = 600;
};

// UKF with VAR-predicted control inputs. The VAR is fitted on the sliding
// history of its own past predictions (controls are not filter states) and
// refitted on a fixed cadence.
class UkfVarRunner {
public:
    UkfVarRunner(const statespace::DiscreteModel& model, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                 UkfVarConfig cfg = UkfVarConfig())
        : model_(model), q_(q), r_(r), cfg_(cfg) {}

    void init_from_measurement(const Eigen::Vector4d& z0, const Eigen::Vector2d& y0, double prior_var = 1e-2) {
        auto [st, u] = sim::machine_equilibrium_from_phasors(model_.params, std::polar(z0[0], z0[1]),
                                                             std::polar(y0[0], y0[1]));
        state_.mean = st.vec();
        state_.cov = prior_var * Eigen::MatrixXd::Identity(sim::kStateDim, sim::kStateDim);
        history_.resize(sim::kControlDim, 1);
        history_.col(0) = Eigen::Vector2d(u.Pm, u.Efd);
        steps_since_fit_ = 0;
        initialized_ = true;
    }

    std::pair<UkfState, Eigen::Vector2d> step(const Eigen::Vector4d& z_k, const Eigen::Vector2d& y_k) {
        if (!initialized_) throw std::runtime_error("ukf-var runner not initialized");
        Eigen::Vector2d u_pred = var_predict(var_, history_);
        state_ = ukf_predict(state_, model_, y_k, u_pred, q_);
        state_ = ukf_update(state_, model_, y_k, z_k, r_);

        append_history(u_pred);
        if (++steps_since_fit_ >= cfg_.refit_interval) {
            const int needed = std::max(cfg_.var_order * sim::kControlDim + 2,
                                        cfg_.var_order + 1 + sim::kControlDim * cfg_.var_order + 1);
            if (history_.cols() >= needed) {
                var_ = var_fit(history_, cfg_.var_order);
                steps_since_fit_ = 0;
            }
        }
        return {state_, u_pred};
    }

    const UkfState& state() const { return state_; }

private:
    void append_history(const Eigen::Vector2d& u) {
        if (history_.cols() >= cfg_.max_history) {
            Eigen::MatrixXd trimmed = history_.rightCols(history_.cols() - 1);
            history_ = trimmed;
        }
        history_.conservativeResize(Eigen::NoChange, history_.cols() + 1);
        history_.col(history_.cols() - 1) = u;
    }

    statespace::DiscreteModel model_;
    Eigen::MatrixXd q_, r_;
    UkfVarConfig cfg_;
    UkfState state_;
    VarModel var_;
    Eigen::MatrixXd history_;
    int steps_since_fit_ = 0;
    bool initialized_ = false;
};

} // namespace dse::filter
