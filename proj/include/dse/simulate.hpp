#pragma once

#include "dse/controller.hpp"
#include "dse/io.hpp"
#include "dse/machine.hpp"
#include "dse/network.hpp"

#include <Eigen/Dense>
#include <complex>
#include <filesystem>
#include <string>
#include <vector>

namespace dse::sim {

struct Dispatch {
    double P = 0.0, Q = 0.0; // injected power at the machine bus, p.u.
    double V = 1.0, theta = 0.0;
};

struct MachineSpec {
    MachineParams params;
    ControllerGains gains;
    Dispatch dispatch;
};

struct Scenario {
    std::string name = "scenario";
    std::vector<MachineSpec> machines;
    NetworkModel network;
    std::vector<EventScript> events;
    double pmu_hz = 30.0;
    int substeps = 100; // RK4 steps per PMU sample; dt_sim = 1/(pmu_hz*substeps)
    double duration = 10.0;
    std::uint64_t seed = 1;
    double divergence_bound = 1e3;

    double dt_sim() const { return 1.0 / (pmu_hz * static_cast<double>(substeps)); }
    int n_machines() const { return static_cast<int>(machines.size()); }
};

struct MachineSample {
    GenState state;
    AlgebraicVars alg;
    ControlInput ctrl;
};

struct Trajectory {
    double pmu_dt = 1.0 / 30.0;
    std::uint64_t seed = 0;
    std::vector<double> times;
    // machines x samples
    std::vector<std::vector<MachineSample>> machines;

    int n_samples() const { return static_cast<int>(times.size()); }
    int n_machines() const { return static_cast<int>(machines.size()); }
};

namespace detail {

// dq -> network-frame rotation for the phasor convention
// phasor = (q_component - j d_component) * e^{j delta}.
inline Eigen::Matrix2d dq_to_ri(double delta) {
    Eigen::Matrix2d t;
    t << std::sin(delta), std::cos(delta), -std::cos(delta), std::sin(delta);
    return t;
}

// Stator current response [Id;Iq] = K * ([Vd;Vq] - [Ed'';Eq'']).
inline Eigen::Matrix2d stator_gain(const MachineParams& p) {
    const double ra = p.ra_eff(), xd = p.xd_pp_eff(), xq = p.xq_pp_eff();
    const double det = ra * ra + xd * xq;
    if (det == 0.0) throw std::runtime_error("degenerate stator algebra");
    Eigen::Matrix2d k;
    k << -ra, -xq, xd, -ra;
    return k / det;
}

inline Eigen::Matrix2d complex_block(const std::complex<double>& y) {
    Eigen::Matrix2d b;
    b << y.real(), -y.imag(), y.imag(), y.real();
    return b;
}

} // namespace detail

// Solves the interconnection exactly: machine stator responses are affine in
// the terminal voltage for fixed rotor states, so the coupled network is one
// real linear system in the bus-voltage components.
inline std::vector<AlgebraicVars> solve_network(const Scenario& sc, const std::vector<GenState>& states,
                                                const std::vector<const EventScript*>& active) {
    const int n = sc.n_machines();
    std::vector<bool> tripped(static_cast<std::size_t>(n), false);
    for (const auto* ev : active)
        if (ev->kind == EventKind::generator_trip) tripped[static_cast<std::size_t>(ev->location)] = true;

    const Eigen::MatrixXcd y = sc.network.ybus(active);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m.block<2, 2>(2 * i, 2 * j) = detail::complex_block(y(i, j));

    for (int i = 0; i < n; ++i) {
        if (tripped[static_cast<std::size_t>(i)]) continue;
        const auto& p = sc.machines[static_cast<std::size_t>(i)].params;
        const Eigen::Matrix2d t = detail::dq_to_ri(states[static_cast<std::size_t>(i)].delta);
        const Eigen::Matrix2d k = detail::stator_gain(p);
        Eigen::Vector2d epp(states[static_cast<std::size_t>(i)].ed_pp, states[static_cast<std::size_t>(i)].eq_pp);
        m.block<2, 2>(2 * i, 2 * i) -= t * k * t.transpose();
        rhs.segment<2>(2 * i) = -t * k * epp;
    }

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    if (lu.determinant() == 0.0) throw std::runtime_error("degenerate network");
    Eigen::VectorXd v = lu.solve(rhs);

    std::vector<AlgebraicVars> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& st = states[static_cast<std::size_t>(i)];
        const double vr = v[2 * i], vi = v[2 * i + 1];
        const double vm = std::hypot(vr, vi);
        const double th = std::atan2(vi, vr);
        if (tripped[static_cast<std::size_t>(i)]) {
            AlgebraicVars a;
            a.V = vm;
            a.theta = th;
            a.Vd = vm * std::sin(st.delta - th);
            a.Vq = vm * std::cos(st.delta - th);
            a.gamma = st.delta;
            out[static_cast<std::size_t>(i)] = a;
        } else {
            out[static_cast<std::size_t>(i)] =
                solve_stator_algebra(st, vm, th, sc.machines[static_cast<std::size_t>(i)].params);
        }
    }
    return out;
}

struct EquilibriumInit {
    std::vector<GenState> states;
    std::vector<ControlInput> controls;
    std::vector<ControlSetpoints> setpoints;
};

namespace detail {

// Closed-form machine internals consistent with the rotor equations at rest,
// given the terminal voltage and current phasors.
inline void machine_equilibrium(const MachineParams& p, std::complex<double> vbar, std::complex<double> ibar,
                                GenState& st, ControlInput& u) {
    if (p.kind == MachineKind::GENCLS) {
        std::complex<double> e = vbar + std::complex<double>(0.0, p.Xd_p) * ibar;
        st.delta = std::arg(e);
        st.domega = 0.0;
        st.eq_p = st.eq_pp = std::abs(e);
        st.ed_p = st.ed_pp = 0.0;
        u.Pm = (vbar * std::conj(ibar)).real();
        u.Efd = std::abs(e);
        return;
    }
    const double x_loc = 2.0 * p.Xq_pp - p.Xq;
    std::complex<double> loc = vbar + std::complex<double>(p.Ra, x_loc) * ibar;
    st.delta = std::arg(loc);
    st.domega = 0.0;
    const Eigen::Matrix2d t = dq_to_ri(st.delta);
    Eigen::Vector2d v_ri(vbar.real(), vbar.imag()), i_ri(ibar.real(), ibar.imag());
    Eigen::Vector2d vdq = t.transpose() * v_ri;
    Eigen::Vector2d idq = t.transpose() * i_ri;
    const double vd = vdq[0], vq = vdq[1], id = idq[0], iq = idq[1];
    st.ed_pp = vd + p.Ra * id - p.Xq_pp * iq;
    st.eq_pp = vq + p.Ra * iq + p.Xd_pp * id;
    st.ed_p = st.ed_pp + (p.Xq_p - p.Xq_pp) * iq;
    st.eq_p = st.eq_pp + (p.Xd_p - p.Xd_pp) * id;
    u.Efd = st.eq_p + (p.Xd - p.Xd_p) * id;
    u.Pm = vd * id + vq * iq;
}

} // namespace detail

// Machine internals at rest for given terminal phasors; used by equilibrium
// initialization and by filters that start from a measurement-consistent state.
inline std::pair<GenState, ControlInput> machine_equilibrium_from_phasors(const MachineParams& params,
                                                                          std::complex<double> vbar,
                                                                          std::complex<double> ibar) {
    GenState st;
    ControlInput u;
    detail::machine_equilibrium(params, vbar, ibar, st, u);
    return {st, u};
}

// Initializes the scenario at the specified dispatch. The machine internals
// come from the rest conditions of the rotor equations; bus shunt loads are
// then chosen so the dispatch is an exact fixed point of the full network,
// and a damped fixed-point pass polishes the states to the 1e-10 residual.
inline EquilibriumInit init_equilibrium(Scenario& sc, double tol = 1e-10, int max_iters = 100) {
    const int n = sc.n_machines();
    if (n == 0) throw std::invalid_argument("init_equilibrium: no machines");
    Eigen::VectorXcd vbar(n), ibar(n);
    for (int i = 0; i < n; ++i) {
        const auto& d = sc.machines[static_cast<std::size_t>(i)].dispatch;
        if (!(d.V > 0.0)) throw std::invalid_argument("init_equilibrium: dispatch voltage must be > 0");
        vbar[i] = std::polar(d.V, d.theta);
        ibar[i] = std::conj(std::complex<double>(d.P, d.Q) / vbar[i]);
    }

    // Constant-impedance bus loads absorb whatever the dispatch does not
    // send down the branches, making the operating point exact.
    sc.network.shunt_loads = Eigen::VectorXcd::Zero(n);
    Eigen::MatrixXcd y0 = sc.network.ybus({});
    Eigen::VectorXcd mismatch = ibar - y0 * vbar;
    for (int i = 0; i < n; ++i) sc.network.shunt_loads[i] = mismatch[i] / vbar[i];

    EquilibriumInit eq;
    eq.states.resize(static_cast<std::size_t>(n));
    eq.controls.resize(static_cast<std::size_t>(n));
    eq.setpoints.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        detail::machine_equilibrium(sc.machines[static_cast<std::size_t>(i)].params, vbar[i], ibar[i],
                                    eq.states[static_cast<std::size_t>(i)], eq.controls[static_cast<std::size_t>(i)]);

    // Damped fixed-point refinement against the solved network.
    const double damping = 0.7;
    for (int it = 0; it < max_iters; ++it) {
        auto alg = solve_network(sc, eq.states, {});
        double residual = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto& p = sc.machines[static_cast<std::size_t>(i)].params;
            const auto& st = eq.states[static_cast<std::size_t>(i)];
            if (p.kind == MachineKind::GENCLS) {
                double pe = gencls_electrical_power(st.eq_pp, st.delta, alg[static_cast<std::size_t>(i)].V,
                                                    alg[static_cast<std::size_t>(i)].theta, p.Xd_p);
                residual = std::max(residual, std::abs(eq.controls[static_cast<std::size_t>(i)].Pm - pe) *
                                                  p.omega0 / (2.0 * p.H));
            } else {
                auto dx = genrou_derivatives(st, alg[static_cast<std::size_t>(i)],
                                             eq.controls[static_cast<std::size_t>(i)], p);
                residual = std::max(residual, dx.cwiseAbs().maxCoeff());
            }
        }
        if (residual < tol) break;
        if (it + 1 == max_iters) throw std::runtime_error("init_equilibrium: fixed point did not converge");
        for (int i = 0; i < n; ++i) {
            const auto& p = sc.machines[static_cast<std::size_t>(i)].params;
            std::complex<double> vb = std::polar(alg[static_cast<std::size_t>(i)].V, alg[static_cast<std::size_t>(i)].theta);
            std::complex<double> ib =
                std::polar(alg[static_cast<std::size_t>(i)].I, alg[static_cast<std::size_t>(i)].gamma);
            GenState next_st;
            ControlInput next_u;
            detail::machine_equilibrium(p, vb, ib, next_st, next_u);
            auto& st = eq.states[static_cast<std::size_t>(i)];
            auto& u = eq.controls[static_cast<std::size_t>(i)];
            auto blend = [&](double a, double b) { return a + damping * (b - a); };
            st.delta = blend(st.delta, next_st.delta);
            st.eq_p = blend(st.eq_p, next_st.eq_p);
            st.ed_p = blend(st.ed_p, next_st.ed_p);
            st.eq_pp = blend(st.eq_pp, next_st.eq_pp);
            st.ed_pp = blend(st.ed_pp, next_st.ed_pp);
            u.Pm = blend(u.Pm, next_u.Pm);
            u.Efd = blend(u.Efd, next_u.Efd);
        }
    }

    for (int i = 0; i < n; ++i) {
        eq.setpoints[static_cast<std::size_t>(i)].v_ref = sc.machines[static_cast<std::size_t>(i)].dispatch.V;
        eq.setpoints[static_cast<std::size_t>(i)].efd_set = eq.controls[static_cast<std::size_t>(i)].Efd;
        eq.setpoints[static_cast<std::size_t>(i)].pm_set = eq.controls[static_cast<std::size_t>(i)].Pm;
    }
    return eq;
}

namespace detail {

// Extended per-machine state for integration: the six rotor states plus the
// two controller lags (Pm, Efd), so the whole system is one smooth ODE.
constexpr int kExtDim = kStateDim + kControlDim;

inline std::vector<GenState> unpack_states(const Eigen::VectorXd& x) {
    std::vector<GenState> states(static_cast<std::size_t>(x.size() / kExtDim));
    for (std::size_t i = 0; i < states.size(); ++i)
        states[i] = GenState::from_vec(x.segment<kStateDim>(static_cast<Eigen::Index>(i) * kExtDim));
    return states;
}

inline ControlInput unpack_control(const Eigen::VectorXd& x, int machine) {
    return {x[machine * kExtDim + kStateDim], x[machine * kExtDim + kStateDim + 1]};
}

inline Eigen::VectorXd system_derivatives(const Scenario& sc, const std::vector<ControlSetpoints>& refs,
                                          const Eigen::VectorXd& x,
                                          const std::vector<const EventScript*>& active) {
    auto states = unpack_states(x);
    auto alg = solve_network(sc, states, active);
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(x.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        const auto& p = sc.machines[i].params;
        const auto& gains = sc.machines[i].gains;
        const ControlInput u = unpack_control(x, static_cast<int>(i));
        const Eigen::Index base = static_cast<Eigen::Index>(i) * kExtDim;
        if (p.kind == MachineKind::GENCLS) {
            dx[base + 0] = states[i].domega;
            dx[base + 1] = p.omega0 / (2.0 * p.H) * (u.Pm - alg[i].Pe - p.D * states[i].domega / p.omega0);
        } else {
            dx.segment<kStateDim>(base) = genrou_derivatives(states[i], alg[i], u, p);
        }
        if (gains.gov_enabled) {
            const double target = refs[i].pm_set - gains.gov_droop * (states[i].domega / p.omega0);
            dx[base + kStateDim] = (target - u.Pm) / gains.gov_lag;
        }
        if (gains.avr_enabled && p.kind == MachineKind::GENROU) {
            const double target = refs[i].efd_set + gains.avr_gain * (refs[i].v_ref - alg[i].V);
            dx[base + kStateDim + 1] = (target - u.Efd) / gains.avr_lag;
        }
    }
    return dx;
}

inline void clamp_controls(const Scenario& sc, Eigen::VectorXd& x) {
    for (int i = 0; i < sc.n_machines(); ++i) {
        const auto& gains = sc.machines[static_cast<std::size_t>(i)].gains;
        const Eigen::Index base = static_cast<Eigen::Index>(i) * kExtDim + kStateDim;
        if (gains.gov_enabled) x[base] = std::clamp(x[base], gains.pm_min, gains.pm_max);
        if (gains.avr_enabled) x[base + 1] = std::clamp(x[base + 1], gains.efd_min, gains.efd_max);
    }
}

} // namespace detail

// Fixed-step RK4 over all machine and controller ODEs with the network
// algebra re-solved at every stage. Event activity is sampled at the step
// start and held over the step, so switching happens only on step boundaries
// (which the event grid guarantees are shared with the halved step).
inline Trajectory simulate_trajectory(const Scenario& scenario) {
    Scenario sc = scenario; // shunt loads are (re)balanced during init
    const int n = sc.n_machines();
    auto eq = init_equilibrium(sc);

    std::vector<EventScript> events = sc.events;
    for (const auto& ev : events) ev.validate(n, static_cast<int>(sc.network.branches.size()));

    const double dt = sc.dt_sim();
    const int n_samples = static_cast<int>(std::llround(sc.duration * sc.pmu_hz)) + 1;

    Trajectory traj;
    traj.pmu_dt = 1.0 / sc.pmu_hz;
    traj.seed = sc.seed;
    traj.machines.assign(static_cast<std::size_t>(n), {});
    for (auto& m : traj.machines) m.reserve(static_cast<std::size_t>(n_samples));

    Eigen::VectorXd x(static_cast<Eigen::Index>(n) * detail::kExtDim);
    for (int i = 0; i < n; ++i) {
        x.segment<kStateDim>(static_cast<Eigen::Index>(i) * detail::kExtDim) =
            eq.states[static_cast<std::size_t>(i)].vec();
        x[i * detail::kExtDim + kStateDim] = eq.controls[static_cast<std::size_t>(i)].Pm;
        x[i * detail::kExtDim + kStateDim + 1] = eq.controls[static_cast<std::size_t>(i)].Efd;
    }

    auto active_at = [&](double t) {
        std::vector<const EventScript*> act;
        for (const auto& ev : events)
            if (ev.active_at(t)) act.push_back(&ev);
        return act;
    };

    long long step_index = 0;
    for (int s = 0; s < n_samples; ++s) {
        const double t_sample = static_cast<double>(s) * traj.pmu_dt;
        {
            auto states = detail::unpack_states(x);
            auto alg = solve_network(sc, states, active_at(t_sample));
            traj.times.push_back(t_sample);
            for (int i = 0; i < n; ++i)
                traj.machines[static_cast<std::size_t>(i)].push_back(
                    {states[static_cast<std::size_t>(i)], alg[static_cast<std::size_t>(i)],
                     detail::unpack_control(x, i)});
        }
        if (s + 1 == n_samples) break;

        for (int sub = 0; sub < sc.substeps; ++sub, ++step_index) {
            const double t = t_sample + static_cast<double>(sub) * dt;
            auto active = active_at(t);

            Eigen::VectorXd k1 = detail::system_derivatives(sc, eq.setpoints, x, active);
            Eigen::VectorXd k2 = detail::system_derivatives(sc, eq.setpoints, x + 0.5 * dt * k1, active);
            Eigen::VectorXd k3 = detail::system_derivatives(sc, eq.setpoints, x + 0.5 * dt * k2, active);
            Eigen::VectorXd k4 = detail::system_derivatives(sc, eq.setpoints, x + dt * k3, active);
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            detail::clamp_controls(sc, x);

            if (!x.allFinite() || x.cwiseAbs().maxCoeff() > sc.divergence_bound)
                throw std::runtime_error("simulation diverged at step " + std::to_string(step_index + 1));
        }
    }
    return traj;
}

inline const std::vector<std::string>& trajectory_columns() {
    static const std::vector<std::string> cols = {"time", "machine", "delta", "domega", "eq_p", "ed_p",
                                                  "eq_pp", "ed_pp",  "v",     "theta",  "i",    "gamma",
                                                  "pe",    "qe",     "pm",    "efd"};
    return cols;
}

inline void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path) {
    io::CsvWriter csv(path, trajectory_columns());
    for (int s = 0; s < traj.n_samples(); ++s)
        for (int m = 0; m < traj.n_machines(); ++m) {
            const auto& smp = traj.machines[static_cast<std::size_t>(m)][static_cast<std::size_t>(s)];
            csv.row({io::format_full(traj.times[static_cast<std::size_t>(s)]), std::to_string(m),
                     io::format_full(smp.state.delta), io::format_full(smp.state.domega),
                     io::format_full(smp.state.eq_p), io::format_full(smp.state.ed_p),
                     io::format_full(smp.state.eq_pp), io::format_full(smp.state.ed_pp),
                     io::format_full(smp.alg.V), io::format_full(smp.alg.theta), io::format_full(smp.alg.I),
                     io::format_full(smp.alg.gamma), io::format_full(smp.alg.Pe), io::format_full(smp.alg.Qe),
                     io::format_full(smp.ctrl.Pm), io::format_full(smp.ctrl.Efd)});
        }
}

inline Trajectory read_trajectory_csv(const std::filesystem::path& path) {
    io::CsvTable table = io::read_csv(path);
    if (table.header != trajectory_columns()) throw std::runtime_error("unexpected trajectory csv header");
    Trajectory traj;
    int n_machines = 0;
    for (const auto& row : table.rows) n_machines = std::max(n_machines, std::stoi(row[1]) + 1);
    traj.machines.assign(static_cast<std::size_t>(n_machines), {});
    for (const auto& row : table.rows) {
        const double t = std::stod(row[0]);
        const int m = std::stoi(row[1]);
        if (m == 0) traj.times.push_back(t);
        MachineSample smp;
        smp.state = {std::stod(row[2]), std::stod(row[3]), std::stod(row[4]),
                     std::stod(row[5]), std::stod(row[6]), std::stod(row[7])};
        smp.alg.V = std::stod(row[8]);
        smp.alg.theta = std::stod(row[9]);
        smp.alg.I = std::stod(row[10]);
        smp.alg.gamma = std::stod(row[11]);
        smp.alg.Pe = std::stod(row[12]);
        smp.alg.Qe = std::stod(row[13]);
        smp.ctrl.Pm = std::stod(row[14]);
        smp.ctrl.Efd = std::stod(row[15]);
        smp.alg.Vd = smp.alg.V * std::sin(smp.state.delta - smp.alg.theta);
        smp.alg.Vq = smp.alg.V * std::cos(smp.state.delta - smp.alg.theta);
        phasor_to_dq(smp.alg.I, smp.alg.gamma, smp.state.delta, smp.alg.Id, smp.alg.Iq);
        traj.machines[static_cast<std::size_t>(m)].push_back(smp);
    }
    if (traj.times.size() >= 2) traj.pmu_dt = traj.times[1] - traj.times[0];
    return traj;
}

} // namespace dse::sim
