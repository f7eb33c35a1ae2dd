#pragma once

#include "dse/io.hpp"
#include "dse/machine.hpp"
#include "dse/rng.hpp"
#include "dse/simulate.hpp"

#include <Eigen/Dense>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace dse::statespace {

using sim::kControlDim;
using sim::kMeasDim;
using sim::kPhasorDim;
using sim::kStateDim;

struct NoiseSpec {
    Eigen::Matrix<double, kStateDim, 1> q_diag = Eigen::Matrix<double, kStateDim, 1>::Zero();
    Eigen::Matrix<double, kMeasDim, 1> r_diag = Eigen::Matrix<double, kMeasDim, 1>::Zero();
    // Noise on the algebraic phasor input [I, gamma]; PMU current channels
    // are taken to be as noisy as the voltage channels.
    Eigen::Matrix<double, kPhasorDim, 1> ry_diag = Eigen::Matrix<double, kPhasorDim, 1>::Zero();
    std::uint64_t seed = 0;

    static NoiseSpec pmu_default(double q_var = 1e-8, double r_var = 1e-4) {
        NoiseSpec n;
        n.q_diag.setConstant(q_var);
        n.r_diag.setConstant(r_var);
        n.ry_diag.setConstant(r_var);
        return n;
    }
    void validate() const {
        if ((q_diag.array() < 0).any() || (r_diag.array() < 0).any() || (ry_diag.array() < 0).any())
            throw std::invalid_argument("noise spec: variances must be >= 0");
    }
};

// Forward-Euler discretization of the rotor equations with the control terms
// carried exclusively by the sparse control matrix G.
struct DiscreteModel {
    sim::MachineParams params;
    double dt = 1.0 / 30.0;

    Eigen::Matrix<double, kStateDim, kControlDim> control_matrix() const {
        Eigen::Matrix<double, kStateDim, kControlDim> g = Eigen::Matrix<double, kStateDim, kControlDim>::Zero();
        g(1, 0) = params.omega0 * dt / (2.0 * params.H); // Pm -> speed deviation
        g(2, 1) = dt / params.Td0_p;                     // Efd -> Eq'
        return g;
    }

    // Control-free transition f(x_{k-1}, y_k, p).
    Eigen::Matrix<double, kStateDim, 1> transition(const Eigen::Matrix<double, kStateDim, 1>& x_prev,
                                                   const Eigen::Matrix<double, kPhasorDim, 1>& y_k) const {
        if (!x_prev.allFinite() || !y_k.allFinite()) throw std::invalid_argument("invalid state");
        const auto& p = params;
        sim::GenState st = sim::GenState::from_vec(x_prev);
        double id, iq;
        sim::phasor_to_dq(y_k[0], y_k[1], st.delta, id, iq);
        const double vd = -p.ra_eff() * id + p.xq_pp_eff() * iq + st.ed_pp;
        const double vq = -p.ra_eff() * iq - p.xd_pp_eff() * id + st.eq_pp;
        const double pe = vd * id + vq * iq;

        Eigen::Matrix<double, kStateDim, 1> dx = Eigen::Matrix<double, kStateDim, 1>::Zero();
        dx[0] = st.domega;
        dx[1] = p.omega0 / (2.0 * p.H) * (-pe - p.D * st.domega / p.omega0);
        if (p.kind == sim::MachineKind::GENROU) {
            const double dxd = p.Xd_p - p.Xd_pp;
            const double dxq = p.Xq_p - p.Xq_pp;
            dx[2] = (-(p.Xd - p.Xd_pp) / dxd * st.eq_p + (p.Xd - p.Xd_p) / dxd * st.eq_pp) / p.Td0_p;
            dx[3] = (-(p.Xq - p.Xq_pp) / dxq * st.ed_p + (p.Xq - p.Xq_p) / dxq * st.ed_pp) / p.Tq0_p;
            dx[4] = (st.eq_p - st.eq_pp - dxd * id) / p.Td0_pp;
            dx[5] = (st.ed_p - st.ed_pp - dxq * iq) / p.Tq0_pp;
        }
        return x_prev + dt * dx;
    }

    Eigen::Matrix<double, kStateDim, 1> step(const Eigen::Matrix<double, kStateDim, 1>& x_prev,
                                             const Eigen::Matrix<double, kPhasorDim, 1>& y_k,
                                             const Eigen::Matrix<double, kControlDim, 1>& u_k) const {
        return transition(x_prev, y_k) + control_matrix() * u_k;
    }

    // Measurement map h(x_k, y_k, p) = [V, theta, Pe, Qe].
    Eigen::Matrix<double, kMeasDim, 1> measure(const Eigen::Matrix<double, kStateDim, 1>& x_k,
                                               const Eigen::Matrix<double, kPhasorDim, 1>& y_k) const {
        const auto& p = params;
        sim::GenState st = sim::GenState::from_vec(x_k);
        double id, iq;
        sim::phasor_to_dq(y_k[0], y_k[1], st.delta, id, iq);
        const double vd = -p.ra_eff() * id + p.xq_pp_eff() * iq + st.ed_pp;
        const double vq = -p.ra_eff() * iq - p.xd_pp_eff() * id + st.eq_pp;
        Eigen::Matrix<double, kMeasDim, 1> z;
        z[0] = std::hypot(vd, vq);
        z[1] = st.delta - std::atan2(vd, vq);
        z[2] = vd * id + vq * iq;
        z[3] = vq * id - vd * iq;
        return z;
    }
};

inline sim::GenState discretize_step(const sim::GenState& x_prev, const sim::AlgebraicVars& y_k,
                                     const sim::ControlInput& u_k, const DiscreteModel& model,
                                     const NoiseSpec& noise, rng::Stream& stream) {
    noise.validate();
    Eigen::Matrix<double, kControlDim, 1> u(u_k.Pm, u_k.Efd);
    Eigen::Matrix<double, kPhasorDim, 1> y(y_k.I, y_k.gamma);
    Eigen::Matrix<double, kStateDim, 1> x = model.step(x_prev.vec(), y, u);
    for (int i = 0; i < kStateDim; ++i)
        if (noise.q_diag[i] > 0.0) x[i] += stream.normal(0.0, std::sqrt(noise.q_diag[i]));
    if (!x.allFinite()) throw std::runtime_error("discretize_step: non-finite state");
    return sim::GenState::from_vec(x);
}

inline Eigen::Matrix<double, kMeasDim, 1> measure(const sim::GenState& x_k, const sim::AlgebraicVars& y_k,
                                                  const DiscreteModel& model, const NoiseSpec& noise,
                                                  rng::Stream& stream) {
    noise.validate();
    Eigen::Matrix<double, kPhasorDim, 1> y(y_k.I, y_k.gamma);
    Eigen::Matrix<double, kMeasDim, 1> z = model.measure(x_k.vec(), y);
    for (int i = 0; i < kMeasDim; ++i)
        if (noise.r_diag[i] > 0.0) z[i] += stream.normal(0.0, std::sqrt(noise.r_diag[i]));
    return z;
}

// Per-variable row counts of the four window blocks.
constexpr int kRowsX = kStateDim;
constexpr int kRowsY = kPhasorDim;
constexpr int kRowsU = kControlDim;
constexpr int kRowsZ = kMeasDim;
constexpr int kRowsAll = kRowsX + kRowsY + kRowsU + kRowsZ;

// Frozen row-ordering convention for flattened windows. Blocks are stacked
// X, Y, U, Z; within a block rows are machine-major, variable-minor; the
// stacked matrix is flattened row-major. Trained network weights depend on
// this ordering, so it is recorded in every serialized window and checkpoint.
inline const std::string& window_order_tag() {
    static const std::string tag = "blocks=X,Y,U,Z;rows=machine-major,variable-minor;flatten=row-major";
    return tag;
}

// Measurement-side view of a simulated trajectory: true states and controls
// plus the noisy PMU channels every estimator consumes.
struct MeasuredTrajectory {
    double dt = 1.0 / 30.0;
    std::vector<Eigen::MatrixXd> states;   // 6 x K, ground truth
    std::vector<Eigen::MatrixXd> phasors;  // 2 x K, noisy [I, gamma]
    std::vector<Eigen::MatrixXd> controls; // 2 x K, ground truth
    std::vector<Eigen::MatrixXd> meas;     // 4 x K, noisy [V, theta, Pe, Qe]

    int n_machines() const { return static_cast<int>(states.size()); }
    int n_samples() const { return states.empty() ? 0 : static_cast<int>(states[0].cols()); }
};

inline MeasuredTrajectory make_measured(const sim::Trajectory& traj, const NoiseSpec& noise) {
    noise.validate();
    rng::Stream stream(noise.seed);
    MeasuredTrajectory mt;
    mt.dt = traj.pmu_dt;
    const int n = traj.n_machines();
    const int k = traj.n_samples();
    mt.states.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(kStateDim, k));
    mt.phasors.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(kPhasorDim, k));
    mt.controls.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(kControlDim, k));
    mt.meas.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(kMeasDim, k));
    for (int m = 0; m < n; ++m) {
        for (int s = 0; s < k; ++s) {
            const auto& smp = traj.machines[static_cast<std::size_t>(m)][static_cast<std::size_t>(s)];
            mt.states[static_cast<std::size_t>(m)].col(s) = smp.state.vec();
            mt.controls[static_cast<std::size_t>(m)](0, s) = smp.ctrl.Pm;
            mt.controls[static_cast<std::size_t>(m)](1, s) = smp.ctrl.Efd;
            double in = noise.ry_diag[0] > 0 ? stream.normal(0.0, std::sqrt(noise.ry_diag[0])) : 0.0;
            double gn = noise.ry_diag[1] > 0 ? stream.normal(0.0, std::sqrt(noise.ry_diag[1])) : 0.0;
            mt.phasors[static_cast<std::size_t>(m)](0, s) = smp.alg.I + in;
            mt.phasors[static_cast<std::size_t>(m)](1, s) = smp.alg.gamma + gn;
            Eigen::Matrix<double, kMeasDim, 1> z(smp.alg.V, smp.alg.theta, smp.alg.Pe, smp.alg.Qe);
            for (int i = 0; i < kMeasDim; ++i)
                if (noise.r_diag[i] > 0.0) z[i] += stream.normal(0.0, std::sqrt(noise.r_diag[i]));
            mt.meas[static_cast<std::size_t>(m)].col(s) = z;
        }
    }
    return mt;
}

// Space-time window over all four blocks, steps k-p .. k+q-1.
struct WindowA {
    int k = 0, p = 0, q = 0;
    std::vector<int> machines;
    Eigen::MatrixXd X, Y, U, Z;
};

// Estimator input window: states and controls lag one step behind the
// measured channels, and the block never contains controls at step k.
struct WindowB {
    int k = 0, p = 0, q = 0;
    std::vector<int> machines;
    Eigen::MatrixXd X; // steps k-p .. k-1
    Eigen::MatrixXd Y; // steps k-p+1 .. k
    Eigen::MatrixXd U; // steps k-p .. k-1
    Eigen::MatrixXd Z; // steps k-p+1 .. k
};

inline int window_a_dim(int n_machines, int p, int q) { return kRowsAll * n_machines * (p + q); }
inline int window_b_dim(int n_machines, int p) { return kRowsAll * n_machines * p; }

namespace detail {

inline Eigen::MatrixXd gather(const std::vector<Eigen::MatrixXd>& series, const std::vector<int>& machines,
                              int first, int count) {
    const int rows = static_cast<int>(series[0].rows());
    Eigen::MatrixXd out(rows * static_cast<int>(machines.size()), count);
    for (std::size_t mi = 0; mi < machines.size(); ++mi)
        out.middleRows(static_cast<int>(mi) * rows, rows) =
            series[static_cast<std::size_t>(machines[mi])].middleCols(first, count);
    return out;
}

} // namespace detail

inline std::pair<WindowA, WindowB> assemble_windows(const MeasuredTrajectory& mt, int k, int p, int q,
                                                    const std::vector<int>& machines) {
    if (p < 1 || q < 1) throw std::invalid_argument("assemble_windows: need p >= 1 and q >= 1");
    if (machines.empty()) throw std::invalid_argument("assemble_windows: empty machine subset");
    if (k < p || k + q - 1 >= mt.n_samples()) throw std::invalid_argument("assemble_windows: window out of range");
    for (int m : machines)
        if (m < 0 || m >= mt.n_machines()) throw std::invalid_argument("assemble_windows: bad machine index");

    WindowA a;
    a.k = k;
    a.p = p;
    a.q = q;
    a.machines = machines;
    a.X = detail::gather(mt.states, machines, k - p, p + q);
    a.Y = detail::gather(mt.phasors, machines, k - p, p + q);
    a.U = detail::gather(mt.controls, machines, k - p, p + q);
    a.Z = detail::gather(mt.meas, machines, k - p, p + q);

    WindowB b;
    b.k = k;
    b.p = p;
    b.q = q;
    b.machines = machines;
    b.X = detail::gather(mt.states, machines, k - p, p);
    b.Y = detail::gather(mt.phasors, machines, k - p + 1, p);
    b.U = detail::gather(mt.controls, machines, k - p, p);
    b.Z = detail::gather(mt.meas, machines, k - p + 1, p);
    return {a, b};
}

namespace detail {

inline Eigen::MatrixXd stack_blocks(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const Eigen::MatrixXd& u,
                                    const Eigen::MatrixXd& z) {
    Eigen::MatrixXd s(x.rows() + y.rows() + u.rows() + z.rows(), x.cols());
    s << x, y, u, z;
    return s;
}

inline Eigen::VectorXd flatten_row_major(const Eigen::MatrixXd& m) {
    Eigen::VectorXd v(m.size());
    Eigen::Index idx = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) v[idx++] = m(r, c);
    return v;
}

inline Eigen::MatrixXd unflatten_row_major(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
    if (v.size() != rows * cols) throw std::invalid_argument("unflatten: size mismatch");
    Eigen::MatrixXd m(rows, cols);
    Eigen::Index idx = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[idx++];
    return m;
}

} // namespace detail

inline Eigen::MatrixXd stacked(const WindowA& a) { return detail::stack_blocks(a.X, a.Y, a.U, a.Z); }
inline Eigen::MatrixXd stacked(const WindowB& b) { return detail::stack_blocks(b.X, b.Y, b.U, b.Z); }
inline Eigen::VectorXd flatten(const WindowA& a) { return detail::flatten_row_major(stacked(a)); }
inline Eigen::VectorXd flatten(const WindowB& b) { return detail::flatten_row_major(stacked(b)); }

// Rebuilds a WindowA's block structure from a flat vector (the decoder's
// output layout).
inline WindowA unflatten_a(const Eigen::VectorXd& v, int n_machines, int p, int q, int k = 0) {
    WindowA a;
    a.k = k;
    a.p = p;
    a.q = q;
    a.machines.resize(static_cast<std::size_t>(n_machines));
    for (int i = 0; i < n_machines; ++i) a.machines[static_cast<std::size_t>(i)] = i;
    const int cols = p + q;
    Eigen::MatrixXd s = detail::unflatten_row_major(v, static_cast<Eigen::Index>(kRowsAll) * n_machines, cols);
    a.X = s.topRows(kRowsX * n_machines);
    a.Y = s.middleRows(kRowsX * n_machines, kRowsY * n_machines);
    a.U = s.middleRows((kRowsX + kRowsY) * n_machines, kRowsU * n_machines);
    a.Z = s.bottomRows(kRowsZ * n_machines);
    return a;
}

// Row index helpers into the stacked window layout.
inline int row_x(int n_machines, int machine_pos, int var) { (void)n_machines; return machine_pos * kRowsX + var; }
inline int row_y(int n_machines, int machine_pos, int var) { return kRowsX * n_machines + machine_pos * kRowsY + var; }
inline int row_u(int n_machines, int machine_pos, int var) {
    return (kRowsX + kRowsY) * n_machines + machine_pos * kRowsU + var;
}
inline int row_z(int n_machines, int machine_pos, int var) {
    return (kRowsX + kRowsY + kRowsU) * n_machines + machine_pos * kRowsZ + var;
}

// Flat binary tensor format: magic, dims, ordering tag, row-major doubles.
inline void save_window_tensor(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write("DSEWIN1\0", 8);
    io::detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
    io::detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
    io::detail::put_string(out, window_order_tag());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double v = m(r, c);
            out.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
}

inline Eigen::MatrixXd load_window_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != std::string("DSEWIN1\0", 8))
        throw std::runtime_error("bad window tensor magic");
    auto rows = static_cast<Eigen::Index>(io::detail::get_u64(in));
    auto cols = static_cast<Eigen::Index>(io::detail::get_u64(in));
    std::string tag = io::detail::get_string(in);
    if (tag != window_order_tag()) throw std::runtime_error("window tensor ordering tag mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            double v;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in) throw std::runtime_error("truncated window tensor");
            m(r, c) = v;
        }
    return m;
}

} // namespace dse::statespace
