#pragma once

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dse::sim {

constexpr int kStateDim = 6;   // delta, domega, Eq', Ed', Eq'', Ed''
constexpr int kControlDim = 2; // Pm, Efd
constexpr int kMeasDim = 4;    // V, theta, Pe, Qe
constexpr int kPhasorDim = 2;  // I, gamma

enum class MachineKind { GENROU, GENCLS };

struct MachineParams {
    double H = 4.0;       // inertia constant, s
    double D = 5.0;       // damping, p.u.
    double omega0 = 2.0 * M_PI * 60.0; // base rotor speed, rad/s
    // The rotor-flux equations make 2*Xq'' - Xq and 2*Xq'' - Xq' the
    // effective q-axis reactances; defaults keep both positive so the
    // dispatch equilibrium is dynamically stable.
    double Xd = 1.8, Xq = 0.30;
    double Xd_p = 0.30, Xq_p = 0.28;
    double Xd_pp = 0.25, Xq_pp = 0.25;
    double Td0_p = 8.0, Tq0_p = 0.40;
    double Td0_pp = 0.05, Tq0_pp = 0.06;
    double Ra = 0.0;
    MachineKind kind = MachineKind::GENROU;

    void validate() const {
        if (!(H > 0.0)) throw std::invalid_argument("machine params: H must be > 0");
        if (!(Td0_p > 0.0 && Tq0_p > 0.0 && Td0_pp > 0.0 && Tq0_pp > 0.0))
            throw std::invalid_argument("machine params: time constants must be > 0");
        if (!(Xd >= Xd_p && Xd_p >= Xd_pp && Xd_pp > 0.0))
            throw std::invalid_argument("machine params: need Xd >= Xd' >= Xd'' > 0");
        if (!(Xq >= Xq_p && Xq_p >= Xq_pp && Xq_pp > 0.0))
            throw std::invalid_argument("machine params: need Xq >= Xq' >= Xq'' > 0");
    }

    // Effective stator quantities seen by the network. A classical machine is
    // a constant EMF behind Xd' with no saliency and no armature resistance.
    double xd_pp_eff() const { return kind == MachineKind::GENCLS ? Xd_p : Xd_pp; }
    double xq_pp_eff() const { return kind == MachineKind::GENCLS ? Xd_p : Xq_pp; }
    double ra_eff() const { return kind == MachineKind::GENCLS ? 0.0 : Ra; }
};

// Dynamic state of one generator. For GENCLS only (delta, domega) evolve;
// the internal EMF is held in eq_pp (mirrored into eq_p) and ed_* stay 0.
struct GenState {
    double delta = 0.0;  // rotor angle, rad
    double domega = 0.0; // speed deviation, rad/s
    double eq_p = 0.0, ed_p = 0.0;
    double eq_pp = 0.0, ed_pp = 0.0;

    Eigen::Matrix<double, kStateDim, 1> vec() const {
        Eigen::Matrix<double, kStateDim, 1> x;
        x << delta, domega, eq_p, ed_p, eq_pp, ed_pp;
        return x;
    }
    static GenState from_vec(const Eigen::Matrix<double, kStateDim, 1>& x) {
        return {x[0], x[1], x[2], x[3], x[4], x[5]};
    }
    bool finite() const {
        return std::isfinite(delta) && std::isfinite(domega) && std::isfinite(eq_p) &&
               std::isfinite(ed_p) && std::isfinite(eq_pp) && std::isfinite(ed_pp);
    }
};

struct AlgebraicVars {
    double Vd = 0.0, Vq = 0.0;
    double Id = 0.0, Iq = 0.0;
    double V = 0.0, theta = 0.0;  // terminal voltage phasor
    double I = 0.0, gamma = 0.0;  // stator current phasor
    double Pe = 0.0, Qe = 0.0;
};

struct ControlInput {
    double Pm = 0.0;
    double Efd = 0.0;
};

// Swing + internal-voltage derivatives of the 6th-order round-rotor model.
// Pe and the dq currents are taken from the already-solved stator algebra.
inline Eigen::Matrix<double, kStateDim, 1> genrou_derivatives(const GenState& state,
                                                              const AlgebraicVars& alg,
                                                              const ControlInput& ctrl,
                                                              const MachineParams& params) {
    params.validate();
    if (params.kind != MachineKind::GENROU)
        throw std::invalid_argument("genrou_derivatives: machine is not GENROU");
    if (!state.finite() || !std::isfinite(alg.Pe) || !std::isfinite(ctrl.Pm) || !std::isfinite(ctrl.Efd))
        throw std::invalid_argument("invalid state");

    Eigen::Matrix<double, kStateDim, 1> dx;
    dx[0] = state.domega;
    dx[1] = params.omega0 / (2.0 * params.H) *
            (ctrl.Pm - alg.Pe - params.D * state.domega / params.omega0);
    const double dxd = params.Xd_p - params.Xd_pp;
    const double dxq = params.Xq_p - params.Xq_pp;
    dx[2] = (-(params.Xd - params.Xd_pp) / dxd * state.eq_p +
             (params.Xd - params.Xd_p) / dxd * state.eq_pp + ctrl.Efd) / params.Td0_p;
    dx[3] = (-(params.Xq - params.Xq_pp) / dxq * state.ed_p +
             (params.Xq - params.Xq_p) / dxq * state.ed_pp) / params.Tq0_p;
    dx[4] = (state.eq_p - state.eq_pp - dxd * alg.Id) / params.Td0_pp;
    dx[5] = (state.ed_p - state.ed_pp - dxq * alg.Iq) / params.Tq0_pp;
    return dx;
}

// Classical-model air-gap power: Pe = E*V/Xd' * sin(delta - theta), written
// here via the sin/cos product expansion.
inline double gencls_electrical_power(double E, double delta, double V, double theta, double Xd_p) {
    if (Xd_p == 0.0) throw std::invalid_argument("gencls_electrical_power: Xd' must be nonzero");
    return (E / Xd_p) * (V * std::sin(delta) * std::cos(theta) - V * std::cos(delta) * std::sin(theta));
}

// Solves the stator interface for a given terminal voltage phasor:
// dq voltage projection, the 2x2 current system, output power and the
// current phasor. Works for both machine kinds via the effective reactances.
inline AlgebraicVars solve_stator_algebra(const GenState& state, double V, double theta,
                                          const MachineParams& params) {
    if (V < 0.0) throw std::invalid_argument("solve_stator_algebra: V must be >= 0");
    const double ra = params.ra_eff();
    const double xdpp = params.xd_pp_eff();
    const double xqpp = params.xq_pp_eff();
    const double det = ra * ra + xdpp * xqpp;
    if (det == 0.0) throw std::runtime_error("degenerate stator algebra");

    AlgebraicVars alg;
    alg.V = V;
    alg.theta = theta;
    alg.Vd = V * std::sin(state.delta - theta);
    alg.Vq = V * std::cos(state.delta - theta);

    const double rd = alg.Vd - state.ed_pp;
    const double rq = alg.Vq - state.eq_pp;
    // [ -Ra   Xq'' ] [Id]   [rd]
    // [ -Xd'' -Ra  ] [Iq] = [rq]
    alg.Id = (-ra * rd - xqpp * rq) / det;
    alg.Iq = (xdpp * rd - ra * rq) / det;

    alg.Pe = alg.Vd * alg.Id + alg.Vq * alg.Iq;
    alg.Qe = alg.Vq * alg.Id - alg.Vd * alg.Iq;
    alg.I = std::hypot(alg.Id, alg.Iq);
    alg.gamma = std::atan2(-alg.Id, alg.Iq) + state.delta;
    return alg;
}

// Inverse of the phasor relations: dq currents from the measured current
// phasor and the rotor angle.
inline void phasor_to_dq(double I, double gamma, double delta, double& Id, double& Iq) {
    Id = -I * std::sin(gamma - delta);
    Iq = I * std::cos(gamma - delta);
}

} // namespace dse::sim
