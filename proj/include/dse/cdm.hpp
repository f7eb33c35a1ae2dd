#pragma once

#include "dse/gan.hpp"

#include <Eigen/Core>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace dse::diffusion {

using nn::DenseNet;

// Discrete power-law-warped noise levels sigma_0..sigma_N with sigma_0 = 0,
// plus the truncation level m used by recovery.
struct NoiseSchedule {
    int n_steps = 100;    // N
    double rho = 7.0;
    double sigma1 = 0.002;
    double sigmaN = 80.0;
    int m = 50;
    Eigen::VectorXd levels; // size N + 1

    double at(int n) const { return levels[n]; }
    double eps_level() const { return levels[1]; } // consistency target level
};

inline NoiseSchedule build_schedule(int n_steps, double rho = 7.0, double sigma1 = 0.002,
                                    double sigmaN = 80.0, int m = 50) {
    if (n_steps < 2) throw std::invalid_argument("build_schedule: need N >= 2");
    if (!(sigma1 > 0.0) || !(sigmaN > sigma1) || !(rho > 0.0))
        throw std::invalid_argument("build_schedule: invalid constants");
    if (m < 1 || m > n_steps) throw std::invalid_argument("build_schedule: need 1 <= m <= N");
    NoiseSchedule s;
    s.n_steps = n_steps;
    s.rho = rho;
    s.sigma1 = sigma1;
    s.sigmaN = sigmaN;
    s.m = m;
    s.levels.resize(n_steps + 1);
    s.levels[0] = 0.0;
    const double lo = std::pow(sigma1, 1.0 / rho);
    const double hi = std::pow(sigmaN, 1.0 / rho);
    for (int n = 1; n <= n_steps; ++n) {
        const double frac = static_cast<double>(n - 1) / static_cast<double>(n_steps - 1);
        s.levels[n] = std::pow(lo + frac * (hi - lo), rho);
    }
    // interpolation endpoints are exact by construction; pin them anyway
    s.levels[1] = sigma1;
    s.levels[n_steps] = sigmaN;
    return s;
}

inline Eigen::VectorXd forward_sample(const Eigen::VectorXd& z0, double t, const Eigen::VectorXd& eps) {
    if (t < 0.0) throw std::invalid_argument("forward_sample: t must be >= 0");
    return z0 + t * eps;
}

// Denoiser with the skip-scaled parameterization
//   D(z, t) = c_skip(t) z + c_out(t) F(c_in(t) z, c_noise(t)).
// The inner network takes the scaled latent plus the noise conditioning as
// one extra input row.
struct DenoiserNet {
    DenseNet f;
    double sigma_data = 0.5;

    double c_skip(double t) const { return sigma_data * sigma_data / (t * t + sigma_data * sigma_data); }
    double c_in(double t) const { return 1.0 / std::sqrt(t * t + sigma_data * sigma_data); }
    double c_out(double t) const { return sigma_data * t / std::sqrt(t * t + sigma_data * sigma_data); }
    double c_noise(double t) const { return std::log(t) / 4.0; }

    int dim() const { return f.out_dim(); }

    Eigen::MatrixXd inner_input(const Eigen::MatrixXd& z_t, double t) const {
        Eigen::MatrixXd in(z_t.rows() + 1, z_t.cols());
        in.topRows(z_t.rows()) = c_in(t) * z_t;
        in.bottomRows(1).setConstant(c_noise(t));
        return in;
    }

    Eigen::MatrixXd denoise(const Eigen::MatrixXd& z_t, double t,
                            nn::ForwardCache<double>* cache = nullptr) const {
        if (t == 0.0) return z_t; // boundary: D(z, 0) = z
        if (t < 0.0) throw std::invalid_argument("denoise: t must be >= 0");
        Eigen::MatrixXd out = nn::forward<double>(f, inner_input(z_t, t), cache);
        return c_skip(t) * z_t + c_out(t) * out;
    }
};

// Affine map between raw latents and the diffusion working space, scaled so
// each coordinate has standard deviation sigma_data.
struct LatentScaler {
    Eigen::VectorXd mean, std;
    double sigma_data = 0.5;

    static LatentScaler fit(const Eigen::MatrixXd& latents, double sigma_data = 0.5) {
        LatentScaler s;
        s.sigma_data = sigma_data;
        s.mean = latents.rowwise().mean();
        Eigen::VectorXd var = (latents.colwise() - s.mean).cwiseAbs2().rowwise().mean();
        s.std = var.cwiseSqrt().cwiseMax(1e-8);
        return s;
    }
    Eigen::MatrixXd scale(const Eigen::MatrixXd& z) const {
        return (z.colwise() - mean).array().colwise() * (sigma_data / std.array());
    }
    Eigen::MatrixXd unscale(const Eigen::MatrixXd& z) const {
        return (z.array().colwise() * (std.array() / sigma_data)).colwise() + mean.array();
    }
};

// Consistency loss through the decoder metric: adjacent noise levels on the
// same forward trajectory (shared eps) must decode to the same window. The
// teacher theta^- receives no gradient.
inline double consistency_loss(const DenoiserNet& student, const DenoiserNet& teacher, const DenseNet& decoder,
                               const LatentScaler& scaler, const Eigen::MatrixXd& z0_scaled,
                               const NoiseSchedule& schedule, int n, const Eigen::MatrixXd& eps,
                               nn::Gradients<double>* student_grads = nullptr) {
    if (n < 1 || n + 1 > schedule.n_steps) throw std::invalid_argument("consistency_loss: n out of range");
    const auto batch = static_cast<int>(z0_scaled.cols());
    const double t_hi = schedule.at(n + 1);
    const double t_lo = schedule.at(n);

    Eigen::MatrixXd z_hi = z0_scaled + t_hi * eps;
    Eigen::MatrixXd z_lo = z0_scaled + t_lo * eps;

    nn::ForwardCache<double> cache_f, cache_dec;
    Eigen::MatrixXd d_hi = student.denoise(z_hi, t_hi, student_grads ? &cache_f : nullptr);
    Eigen::MatrixXd d_lo = teacher.denoise(z_lo, t_lo);

    Eigen::MatrixXd out_hi =
        nn::forward<double>(decoder, scaler.unscale(d_hi), student_grads ? &cache_dec : nullptr);
    Eigen::MatrixXd out_lo = nn::forward<double>(decoder, scaler.unscale(d_lo));

    const double loss = (out_hi - out_lo).squaredNorm() / batch;
    if (student_grads) {
        student_grads->init_like(student.f);
        Eigen::MatrixXd d_out = 2.0 * (out_hi - out_lo) / batch;
        Eigen::MatrixXd d_unscaled = nn::backward<double>(decoder, cache_dec, d_out, nullptr);
        Eigen::MatrixXd d_dhi = d_unscaled.array().colwise() * (scaler.std.array() / scaler.sigma_data);
        // D = c_skip z + c_out F: only the F term carries parameters
        Eigen::MatrixXd d_f = student.c_out(t_hi) * d_dhi;
        nn::backward<double>(student.f, cache_f, d_f, student_grads);
    }
    return loss;
}

struct CdmTrainConfig {
    int steps = 2000;
    int batch = 64;
    double lr = 1e-3;
    double ema_rate = 0.99;
    std::vector<int> hidden = {128, 128, 128};
    double sigma_data = 0.5;
    std::uint64_t seed = 1;
    double divergence_abort = 1e9;
};

struct CdmResult {
    DenoiserNet denoiser;
    DenoiserNet teacher; // EMA copy, exposed for inspection
    LatentScaler scaler;
    gen::LossCurve curve;
};

// Truncated consistency training on the latent dataset: levels are sampled
// uniformly in [1, m-1] so only the 0..m portion of the schedule is learned.
inline CdmResult train_consistency(const Eigen::MatrixXd& latents_raw, const DenseNet& decoder,
                                   const NoiseSchedule& schedule, const CdmTrainConfig& cfg,
                                   std::optional<std::filesystem::path> curve_dump = std::nullopt) {
    if (schedule.m < 2) throw std::invalid_argument("train_consistency: schedule truncation m must be >= 2");
    rng::Stream stream(rng::derive_seed(cfg.seed, "cdm"));
    CdmResult result;
    result.scaler = LatentScaler::fit(latents_raw, cfg.sigma_data);
    Eigen::MatrixXd z_scaled = result.scaler.scale(latents_raw);

    const auto dz = static_cast<int>(latents_raw.rows());
    result.denoiser.sigma_data = cfg.sigma_data;
    result.denoiser.f = nn::make_mlp(dz + 1, cfg.hidden, dz, stream);
    DenoiserNet teacher = result.denoiser;
    result.curve.columns = {"step", "consistency_loss"};

    nn::Adam opt(cfg.lr);
    for (int step = 0; step < cfg.steps; ++step) {
        Eigen::MatrixXd z0(dz, cfg.batch), eps(dz, cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            z0.col(i) = z_scaled.col(stream.uniform_int(0, z_scaled.cols() - 1));
            for (int j = 0; j < dz; ++j) eps(j, i) = stream.normal();
        }
        const int n = static_cast<int>(stream.uniform_int(1, schedule.m - 1));
        nn::Gradients<double> grads;
        const double loss =
            consistency_loss(result.denoiser, teacher, decoder, result.scaler, z0, schedule, n, eps, &grads);
        opt.step(result.denoiser.f, grads);
        // EMA teacher update
        for (std::size_t l = 0; l < teacher.f.layers.size(); ++l) {
            teacher.f.layers[l].w =
                cfg.ema_rate * teacher.f.layers[l].w + (1.0 - cfg.ema_rate) * result.denoiser.f.layers[l].w;
            teacher.f.layers[l].b =
                cfg.ema_rate * teacher.f.layers[l].b + (1.0 - cfg.ema_rate) * result.denoiser.f.layers[l].b;
        }
        result.curve.rows.push_back({static_cast<double>(step), loss});
        if (!std::isfinite(loss) || loss > cfg.divergence_abort) {
            if (curve_dump) result.curve.dump_csv(*curve_dump);
            throw std::runtime_error("train_consistency diverged at step " + std::to_string(step));
        }
    }
    result.teacher = teacher;
    return result;
}

struct RecoveryConfig {
    std::vector<int> tau = {50, 10}; // tau_1 = m > tau_2 > ... > tau_s
    double threshold = 1.0;          // per-coordinate detection cutoff (scaled space)
    std::uint64_t seed = 0;

    void validate(const NoiseSchedule& schedule) const {
        if (tau.empty()) throw std::invalid_argument("recovery: tau must be nonempty");
        if (tau.front() != schedule.m) throw std::invalid_argument("recovery: tau_1 must equal m");
        for (std::size_t i = 1; i < tau.size(); ++i)
            if (tau[i] >= tau[i - 1] || tau[i] < 1) throw std::invalid_argument("recovery: tau must decrease");
    }
};

inline RecoveryConfig default_recovery(const NoiseSchedule& schedule, double threshold) {
    RecoveryConfig cfg;
    cfg.tau = {schedule.m, std::max(1, schedule.m / 5)};
    if (cfg.tau[1] >= cfg.tau[0]) cfg.tau.pop_back();
    cfg.threshold = threshold;
    return cfg;
}

struct DetectionResult {
    Eigen::VectorXd z_hat_scaled; // denoised estimate in the working space
    Eigen::Array<bool, Eigen::Dynamic, 1> mask; // flagged coordinates
    Eigen::VectorXd residual;    // |z' - z_hat| per coordinate (scaled)
};

namespace detail {

inline Eigen::VectorXd gaussian_vector(Eigen::Index n, rng::Stream& stream) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = stream.normal();
    return v;
}

// One or more reverse passes down the subsampling sequence.
inline Eigen::VectorXd denoise_chain(const DenoiserNet& denoiser, const NoiseSchedule& schedule,
                                     const RecoveryConfig& cfg, const Eigen::VectorXd& start_scaled,
                                     rng::Stream& stream) {
    const double eps_lvl = schedule.eps_level();
    Eigen::VectorXd z = start_scaled + schedule.at(cfg.tau[0]) * gaussian_vector(start_scaled.size(), stream);
    Eigen::VectorXd z_eps = denoiser.denoise(z, schedule.at(cfg.tau[0]));
    for (std::size_t i = 1; i < cfg.tau.size(); ++i) {
        const double t = schedule.at(cfg.tau[i]);
        const double spread = std::sqrt(std::max(t * t - eps_lvl * eps_lvl, 0.0));
        Eigen::VectorXd z_noisy = z_eps + spread * gaussian_vector(z_eps.size(), stream);
        z_eps = denoiser.denoise(z_noisy, t);
    }
    return z_eps;
}

} // namespace detail

// Phase one of the two-phase mitigation: re-noise the received latent to the
// truncation level, denoise back down the tau sequence, and flag coordinates
// whose residual exceeds the threshold.
inline DetectionResult detect_anomalies(const DenoiserNet& denoiser, const LatentScaler& scaler,
                                        const Eigen::VectorXd& z_received_raw, const NoiseSchedule& schedule,
                                        const RecoveryConfig& cfg, rng::Stream& stream) {
    cfg.validate(schedule);
    Eigen::VectorXd z_scaled = scaler.scale(z_received_raw);
    DetectionResult det;
    det.z_hat_scaled = detail::denoise_chain(denoiser, schedule, cfg, z_scaled, stream);
    det.residual = (z_scaled - det.z_hat_scaled).cwiseAbs();
    det.mask = det.residual.array() > cfg.threshold;
    return det;
}

// Phase two: zero-fill the flagged coordinates (in raw units), regenerate
// them through the forward/reverse pass, and re-impose the trusted
// coordinates after every recombination.
inline Eigen::VectorXd impute_latent(const DenoiserNet& denoiser, const LatentScaler& scaler,
                                     const DetectionResult& det, const NoiseSchedule& schedule,
                                     const RecoveryConfig& cfg, rng::Stream& stream) {
    cfg.validate(schedule);
    const double eps_lvl = schedule.eps_level();
    Eigen::VectorXd z_hat_raw = scaler.unscale(det.z_hat_scaled);
    Eigen::VectorXd zero_filled_raw = z_hat_raw;
    for (Eigen::Index i = 0; i < zero_filled_raw.size(); ++i)
        if (det.mask[i]) zero_filled_raw[i] = 0.0;

    Eigen::VectorXd z = scaler.scale(zero_filled_raw);
    Eigen::VectorXd z_tilde =
        denoiser.denoise(z + schedule.at(cfg.tau[0]) * detail::gaussian_vector(z.size(), stream),
                         schedule.at(cfg.tau[0]));
    auto recombine = [&](Eigen::VectorXd& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i)
            if (!det.mask[i]) v[i] = det.z_hat_scaled[i];
    };
    recombine(z_tilde);
    for (std::size_t i = 1; i < cfg.tau.size(); ++i) {
        const double t = schedule.at(cfg.tau[i]);
        const double spread = std::sqrt(std::max(t * t - eps_lvl * eps_lvl, 0.0));
        Eigen::VectorXd z_noisy = z_tilde + spread * detail::gaussian_vector(z_tilde.size(), stream);
        z_tilde = denoiser.denoise(z_noisy, t);
        recombine(z_tilde);
    }
    return z_tilde; // scaled space
}

struct RecoveryOutput {
    Eigen::VectorXd a_estimate;  // decoder output (normalized window space)
    Eigen::VectorXd z_recovered; // raw latent units
    DetectionResult detection;
};

// detect -> impute -> decode; deterministic for a fixed config seed.
inline RecoveryOutput recover(const DenoiserNet& denoiser, const LatentScaler& scaler, const DenseNet& decoder,
                              const Eigen::VectorXd& z_received_raw, const NoiseSchedule& schedule,
                              const RecoveryConfig& cfg) {
    rng::Stream stream(cfg.seed);
    RecoveryOutput out;
    out.detection = detect_anomalies(denoiser, scaler, z_received_raw, schedule, cfg, stream);
    Eigen::VectorXd z_scaled = impute_latent(denoiser, scaler, out.detection, schedule, cfg, stream);
    out.z_recovered = scaler.unscale(z_scaled);
    out.a_estimate = nn::forward<double>(decoder, Eigen::MatrixXd(out.z_recovered)).col(0);
    return out;
}

// Checkpoint layout: denoiser net + scaler + schedule header.
inline void save_denoiser(const std::filesystem::path& path, const DenoiserNet& denoiser,
                          const LatentScaler& scaler, const NoiseSchedule& schedule, double threshold,
                          const gen::ModelMeta& meta) {
    io::BlobStore store;
    nn::net_to_blobs(store, "net", denoiser.f);
    store.matrices["scaler.mean"] = scaler.mean;
    store.matrices["scaler.std"] = scaler.std;
    nlohmann::json j = {{"sigma_data", denoiser.sigma_data}, {"n_steps", schedule.n_steps},
                        {"rho", schedule.rho},               {"sigma1", schedule.sigma1},
                        {"sigmaN", schedule.sigmaN},         {"m", schedule.m},
                        {"threshold", threshold}};
    store.strings["schedule"] = j.dump();
    store.strings["meta"] = meta.to_json().dump();
    store.strings["kind"] = "denoiser";
    store.save(path);
}

struct LoadedDenoiser {
    DenoiserNet denoiser;
    LatentScaler scaler;
    NoiseSchedule schedule;
    double threshold = 0.0;
    gen::ModelMeta meta;
};

inline LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
    io::BlobStore store = io::BlobStore::load(path);
    if (store.strings.at("kind") != "denoiser") throw std::runtime_error("checkpoint is not a denoiser");
    LoadedDenoiser d;
    d.denoiser.f = nn::net_from_blobs(store, "net");
    d.scaler.mean = store.matrices.at("scaler.mean");
    d.scaler.std = store.matrices.at("scaler.std");
    auto j = nlohmann::json::parse(store.strings.at("schedule"));
    d.denoiser.sigma_data = j.at("sigma_data").get<double>();
    d.scaler.sigma_data = d.denoiser.sigma_data;
    d.schedule = build_schedule(j.at("n_steps").get<int>(), j.at("rho").get<double>(),
                                j.at("sigma1").get<double>(), j.at("sigmaN").get<double>(), j.at("m").get<int>());
    d.threshold = j.at("threshold").get<double>();
    d.meta = gen::ModelMeta::from_json(nlohmann::json::parse(store.strings.at("meta")));
    return d;
}

} // namespace dse::diffusion
