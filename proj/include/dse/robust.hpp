#pragma once

#include "dse/gan.hpp"

#include <Eigen/Core>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace dse::robust {

using gen::Normalizer;
using nn::DenseNet;

// Bounded-perturbation budget in raw (p.u.) window units. The support mask
// restricts the attack to the measured channels (Y and Z block rows);
// states and past controls are not PMU data and cannot be contaminated.
struct PerturbationBudget {
    double xi = 0.05;
    double p_norm = 2.0;
    Eigen::MatrixXd lower, upper;         // physical box on B + delta
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> support; // 1 on attackable rows

    static PerturbationBudget for_windows(int n_machines, int p, double xi = 0.05) {
        using namespace statespace;
        PerturbationBudget budget;
        budget.xi = xi;
        const int rows = kRowsAll * n_machines;
        budget.support = Eigen::MatrixXd::Zero(rows, p);
        budget.lower = Eigen::MatrixXd::Constant(rows, p, -1e9);
        budget.upper = Eigen::MatrixXd::Constant(rows, p, 1e9);
        for (int m = 0; m < n_machines; ++m) {
            for (int v = 0; v < kRowsY; ++v) budget.support.row(row_y(n_machines, m, v)).setOnes();
            for (int v = 0; v < kRowsZ; ++v) budget.support.row(row_z(n_machines, m, v)).setOnes();
            // generous physical envelopes per channel
            budget.lower.row(row_y(n_machines, m, 0)).setConstant(0.0);  // current magnitude
            budget.upper.row(row_y(n_machines, m, 0)).setConstant(5.0);
            budget.lower.row(row_y(n_machines, m, 1)).setConstant(-10.0); // current angle
            budget.upper.row(row_y(n_machines, m, 1)).setConstant(10.0);
            budget.lower.row(row_z(n_machines, m, 0)).setConstant(0.0);  // voltage magnitude
            budget.upper.row(row_z(n_machines, m, 0)).setConstant(2.0);
            budget.lower.row(row_z(n_machines, m, 1)).setConstant(-10.0); // voltage angle
            budget.upper.row(row_z(n_machines, m, 1)).setConstant(10.0);
            for (int v = 2; v < 4; ++v) { // active/reactive power
                budget.lower.row(row_z(n_machines, m, v)).setConstant(-5.0);
                budget.upper.row(row_z(n_machines, m, v)).setConstant(5.0);
            }
        }
        return budget;
    }

    void validate() const {
        if (!(xi >= 0.0) || !(p_norm >= 1.0)) throw std::invalid_argument("budget: bad xi or norm");
        if ((lower.array() > upper.array()).any()) throw std::invalid_argument("budget: lower > upper");
    }
};

struct PgdConfig {
    double eta1 = 0.01;
    int max_iters = 50;
    double lambda_pen = 1.0;
    double tol = 1e-7; // on ||delta_i - delta_{i-1}||
    std::uint64_t seed = 0;

    void validate() const {
        if (!(eta1 > 0.0) || lambda_pen < 0.0) throw std::invalid_argument("pgd config: bad eta or lambda");
    }
};

struct AttackResult {
    Eigen::MatrixXd delta; // raw window units, WindowB shape
    std::vector<double> objective_trace;
    double final_norm = 0.0;
};

namespace detail {

inline double p_norm_of(const Eigen::MatrixXd& m, double p) {
    if (p == 2.0) return m.norm();
    return std::pow(m.array().abs().pow(p).sum(), 1.0 / p);
}

inline Eigen::MatrixXd p_norm_grad(const Eigen::MatrixXd& m, double p) {
    const double n = p_norm_of(m, p);
    if (n < 1e-12) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
    if (p == 2.0) return m / n;
    return (m.array().sign() * m.array().abs().pow(p - 1.0) / std::pow(n, p - 1.0)).matrix();
}

// Deterministic estimation path through the encoder mean and the decoder,
// with the gradient pulled back to the raw window entries.
struct DecodePath {
    Eigen::VectorXd output; // decoder output (normalized space)
    nn::ForwardCache<double> cache_enc, cache_dec;

    static DecodePath run(const DenseNet& encoder, const DenseNet& decoder, const Normalizer& norm,
                          const Eigen::MatrixXd& b_raw, bool keep_caches) {
        const auto dz = decoder.layers.front().w.cols();
        Eigen::VectorXd flat = statespace::detail::flatten_row_major(norm.normalize(b_raw));
        DecodePath path;
        Eigen::MatrixXd e =
            nn::forward<double>(encoder, Eigen::MatrixXd(flat), keep_caches ? &path.cache_enc : nullptr);
        Eigen::MatrixXd mu = e.topRows(dz);
        path.output = nn::forward<double>(decoder, mu, keep_caches ? &path.cache_dec : nullptr).col(0);
        return path;
    }

    Eigen::MatrixXd pull_back(const DenseNet& encoder, const DenseNet& decoder, const Normalizer& norm,
                              const Eigen::VectorXd& d_output, Eigen::Index rows, Eigen::Index cols) const {
        const auto dz = decoder.layers.front().w.cols();
        Eigen::MatrixXd dmu = nn::backward<double>(decoder, cache_dec, Eigen::MatrixXd(d_output), nullptr);
        Eigen::MatrixXd de = Eigen::MatrixXd::Zero(2 * dz, 1);
        de.topRows(dz) = dmu;
        Eigen::MatrixXd dflat = nn::backward<double>(encoder, cache_enc, de, nullptr);
        Eigen::MatrixXd dbn = statespace::detail::unflatten_row_major(dflat.col(0), rows, cols);
        return dbn.array().colwise() / norm.std.array();
    }
};

} // namespace detail

// Precomputed clean decode for a window under attack.
struct AttackContext {
    const DenseNet* encoder;
    const DenseNet* decoder;
    const Normalizer* norm;
    Eigen::MatrixXd b_raw;
    Eigen::VectorXd clean_output;

    static AttackContext make(const DenseNet& encoder, const DenseNet& decoder, const Normalizer& norm,
                              const Eigen::MatrixXd& b_raw) {
        AttackContext ctx{&encoder, &decoder, &norm, b_raw, {}};
        ctx.clean_output = detail::DecodePath::run(encoder, decoder, norm, b_raw, false).output;
        return ctx;
    }

    // lambda * ||delta||_p - || G(E(B)) - G(E(B + delta)) ||_2
    double objective(const Eigen::MatrixXd& delta, double lambda_pen, double p_norm,
                     Eigen::MatrixXd* grad = nullptr) const {
        auto perturbed = detail::DecodePath::run(*encoder, *decoder, *norm, b_raw + delta, grad != nullptr);
        Eigen::VectorXd r = clean_output - perturbed.output;
        const double dist = r.norm();
        const double value = lambda_pen * detail::p_norm_of(delta, p_norm) - dist;
        if (grad) {
            Eigen::VectorXd pullback =
                dist > 1e-12 ? Eigen::VectorXd(r / dist) : Eigen::VectorXd::Zero(r.size());
            *grad = lambda_pen * detail::p_norm_grad(delta, p_norm) +
                    perturbed.pull_back(*encoder, *decoder, *norm, pullback, b_raw.rows(), b_raw.cols());
        }
        return value;
    }
};

// lambda * ||delta||_p - || G(E(B)) - G(E(B + delta)) ||_2 ; the quantity the
// PGD attack minimizes. Gradient (optional) is with respect to delta.
inline double attack_objective(const DenseNet& encoder, const DenseNet& decoder, const Normalizer& norm,
                               const Eigen::MatrixXd& b_raw, const Eigen::MatrixXd& delta, double lambda_pen,
                               double p_norm = 2.0, Eigen::MatrixXd* grad = nullptr) {
    if (delta.rows() != b_raw.rows() || delta.cols() != b_raw.cols())
        throw std::invalid_argument("attack_objective: delta shape mismatch");
    return AttackContext::make(encoder, decoder, norm, b_raw).objective(delta, lambda_pen, p_norm, grad);
}

// Projection onto the constraint set: support mask first, then the physical
// box, then a rescale into the xi-ball. The box contains zero, so the final
// shrink cannot leave it and the composition is idempotent.
inline Eigen::MatrixXd project_constraints(const Eigen::MatrixXd& delta, const Eigen::MatrixXd& b_raw,
                                           const PerturbationBudget& budget) {
    Eigen::MatrixXd out = delta.cwiseProduct(budget.support);
    out = out.cwiseMax(budget.lower - b_raw).cwiseMin(budget.upper - b_raw);
    const double n = detail::p_norm_of(out, budget.p_norm);
    if (n > budget.xi && n > 0.0) out *= budget.xi / n;
    return out;
}

// Projected gradient descent for the worst-case bounded perturbation. Steps
// are accepted only if the post-projection objective does not increase
// (up to 1e-12 slack), with per-iteration step halving as the guard.
inline AttackResult pgd_worst_case(const DenseNet& encoder, const DenseNet& decoder, const Normalizer& norm,
                                   const Eigen::MatrixXd& b_raw, const PerturbationBudget& budget,
                                   const PgdConfig& cfg) {
    budget.validate();
    cfg.validate();
    AttackResult result;
    result.delta = Eigen::MatrixXd::Zero(b_raw.rows(), b_raw.cols());
    if (cfg.max_iters == 0) return result;

    auto ctx = AttackContext::make(encoder, decoder, norm, b_raw);

    // tiny seeded start inside the constraint set; the objective gradient
    // vanishes at exactly zero
    rng::Stream stream(cfg.seed);
    for (Eigen::Index i = 0; i < result.delta.size(); ++i)
        result.delta(i) = 1e-3 * budget.xi * stream.normal();
    result.delta = project_constraints(result.delta, b_raw, budget);

    double value = ctx.objective(result.delta, cfg.lambda_pen, budget.p_norm);
    result.objective_trace.push_back(value);
    const double slack = 1e-12;

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        Eigen::MatrixXd grad;
        ctx.objective(result.delta, cfg.lambda_pen, budget.p_norm, &grad);
        double eta = cfg.eta1;
        bool accepted = false;
        for (int halving = 0; halving < 20; ++halving, eta *= 0.5) {
            Eigen::MatrixXd candidate = project_constraints(result.delta - eta * grad, b_raw, budget);
            const double cand_value = ctx.objective(candidate, cfg.lambda_pen, budget.p_norm);
            if (cand_value <= value + slack) {
                const double step = (candidate - result.delta).norm();
                result.delta = candidate;
                value = cand_value;
                result.objective_trace.push_back(value);
                accepted = true;
                if (step <= cfg.tol) iter = cfg.max_iters; // converged
                break;
            }
        }
        if (!accepted) break; // no descent direction within step budget
        if (!std::isfinite(value) || std::abs(value) > 1e9)
            throw std::runtime_error("pgd_worst_case: divergent objective (last value " +
                                     std::to_string(value) + ")");
    }
    result.final_norm = detail::p_norm_of(result.delta, budget.p_norm);
    return result;
}

// Entropy-regularized Gaussian Wasserstein distance between two diagonal
// Gaussians, evaluated coordinate-wise and summed.
inline double entropic_gaussian_w(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                                  const Eigen::VectorXd& mu2, const Eigen::VectorXd& sigma2, double beta) {
    if (mu.size() != sigma.size() || mu2.size() != sigma2.size() || mu.size() != mu2.size())
        throw std::invalid_argument("entropic_gaussian_w: size mismatch");
    if (beta < 0.0) throw std::invalid_argument("entropic_gaussian_w: beta must be >= 0");
    double total = 0.0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double s1 = sigma[i], s2 = sigma2[i];
        if (!(s1 > 0.0) || !(s2 > 0.0)) throw std::invalid_argument("entropic_gaussian_w: sigma must be > 0");
        const double dmu = mu[i] - mu2[i];
        const double prod = s1 * s1 * s2 * s2;
        const double root = std::sqrt(1.0 + 4.0 * beta * beta * prod);
        total += beta / 2.0 * (dmu * dmu + s1 * s1 + s2 * s2) - 0.5 * std::log(2.0 * prod) +
                 0.5 * std::log(root + 1.0) - 0.5 * (root - 1.0) - std::log(2.0 * M_PI) - 1.0;
    }
    return total;
}

// Coordinate-wise partial derivatives of the distance above.
struct EntropicWGrad {
    Eigen::VectorXd d_mu, d_sigma, d_mu2, d_sigma2;
};

inline EntropicWGrad entropic_gaussian_w_grad(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                                              const Eigen::VectorXd& mu2, const Eigen::VectorXd& sigma2,
                                              double beta) {
    EntropicWGrad g;
    g.d_mu.resize(mu.size());
    g.d_sigma.resize(mu.size());
    g.d_mu2.resize(mu.size());
    g.d_sigma2.resize(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double s1 = sigma[i], s2 = sigma2[i];
        const double dmu = mu[i] - mu2[i];
        const double root = std::sqrt(1.0 + 4.0 * beta * beta * s1 * s1 * s2 * s2);
        g.d_mu[i] = beta * dmu;
        g.d_mu2[i] = -beta * dmu;
        g.d_sigma[i] = beta * s1 - 1.0 / s1 - 2.0 * beta * beta * s2 * s2 * s1 / (root + 1.0);
        g.d_sigma2[i] = beta * s2 - 1.0 / s2 - 2.0 * beta * beta * s1 * s1 * s2 / (root + 1.0);
    }
    return g;
}

struct RobustTrainConfig {
    int steps = 400;
    int batch = 16;
    double lr = 1e-4;
    double beta = 1.0; // entropic coupling
    std::uint64_t seed = 1;
    double divergence_abort = 1e6;
};

// Robust loss of one batch: prior + estimation fidelity on the clean input
// plus the Wasserstein robustness fidelity between the clean and perturbed
// posteriors. Gradients (optional) flow to the encoder only.
inline double robust_loss(const DenseNet& encoder, const DenseNet& decoder_frozen, const Normalizer& norm,
                          const std::vector<Eigen::MatrixXd>& b_raw, const std::vector<Eigen::MatrixXd>& delta,
                          const Eigen::MatrixXd& a_norm_flat, double alpha_phi, double beta,
                          const Eigen::MatrixXd& eps, nn::Gradients<double>* encoder_grads = nullptr) {
    const auto batch = static_cast<int>(b_raw.size());
    const auto dz = eps.rows();

    Eigen::MatrixXd b_clean(statespace::detail::flatten_row_major(norm.normalize(b_raw[0])).size(), batch);
    Eigen::MatrixXd b_pert(b_clean.rows(), batch);
    for (int i = 0; i < batch; ++i) {
        b_clean.col(i) = statespace::detail::flatten_row_major(norm.normalize(b_raw[static_cast<std::size_t>(i)]));
        b_pert.col(i) = statespace::detail::flatten_row_major(
            norm.normalize(b_raw[static_cast<std::size_t>(i)] + delta[static_cast<std::size_t>(i)]));
    }

    nn::ForwardCache<double> cache_clean, cache_pert, cache_dec;
    Eigen::MatrixXd e_clean = nn::forward<double>(encoder, b_clean, encoder_grads ? &cache_clean : nullptr);
    Eigen::MatrixXd e_pert = nn::forward<double>(encoder, b_pert, encoder_grads ? &cache_pert : nullptr);

    Eigen::MatrixXd mu = e_clean.topRows(dz), lv = e_clean.bottomRows(dz);
    Eigen::MatrixXd mu2 = e_pert.topRows(dz), lv2 = e_pert.bottomRows(dz);
    Eigen::MatrixXd z(dz, batch);
    for (int i = 0; i < batch; ++i) z.col(i) = gen::reparameterize(mu.col(i), lv.col(i), eps.col(i));
    Eigen::MatrixXd a_hat = nn::forward<double>(decoder_frozen, z, encoder_grads ? &cache_dec : nullptr);

    double kl = 0.0, wass = 0.0;
    for (int i = 0; i < batch; ++i) {
        kl += gen::kl_diag_gaussian(mu.col(i), lv.col(i));
        Eigen::VectorXd s1 = (lv.col(i).array() / 2.0).exp();
        Eigen::VectorXd s2 = (lv2.col(i).array() / 2.0).exp();
        wass += entropic_gaussian_w(mu.col(i), s1, mu2.col(i), s2, beta);
    }
    kl /= batch;
    wass /= batch;
    const double rec = (a_hat - a_norm_flat).squaredNorm() / (static_cast<double>(a_norm_flat.rows()) * batch);
    const double loss = alpha_phi * kl + (1.0 - alpha_phi) * rec + wass;

    if (encoder_grads) {
        encoder_grads->init_like(encoder);
        // clean-path gradient: reconstruction + KL + Wasserstein(mu, sigma)
        Eigen::MatrixXd da =
            (2.0 * (1.0 - alpha_phi) / (static_cast<double>(a_norm_flat.rows()) * batch)) * (a_hat - a_norm_flat);
        Eigen::MatrixXd dz_grad = nn::backward<double>(decoder_frozen, cache_dec, da, nullptr);
        Eigen::MatrixXd de_clean = Eigen::MatrixXd::Zero(2 * dz, batch);
        Eigen::MatrixXd de_pert = Eigen::MatrixXd::Zero(2 * dz, batch);
        for (int i = 0; i < batch; ++i) {
            Eigen::VectorXd s1 = (lv.col(i).array() / 2.0).exp();
            Eigen::VectorXd s2 = (lv2.col(i).array() / 2.0).exp();
            auto wg = entropic_gaussian_w_grad(mu.col(i), s1, mu2.col(i), s2, beta);
            for (Eigen::Index j = 0; j < dz; ++j) {
                const double sigma = s1[j];
                de_clean(j, i) = dz_grad(j, i) + alpha_phi * mu(j, i) / batch + wg.d_mu[j] / batch;
                de_clean(dz + j, i) = dz_grad(j, i) * eps(j, i) * sigma * 0.5 +
                                      alpha_phi * 0.5 * (sigma * sigma - 1.0) / batch +
                                      wg.d_sigma[j] * 0.5 * sigma / batch;
                de_pert(j, i) = wg.d_mu2[j] / batch;
                de_pert(dz + j, i) = wg.d_sigma2[j] * 0.5 * s2[j] / batch;
            }
        }
        nn::backward<double>(encoder, cache_clean, de_clean, encoder_grads);
        nn::backward<double>(encoder, cache_pert, de_pert, encoder_grads);
    }
    return loss;
}

struct RobustResult {
    DenseNet encoder;
    gen::LossCurve curve;
};

// Adversarial fine-tuning: an inner PGD per batch finds the worst bounded
// perturbation against the current encoder, then one optimizer step on the
// three-term robust loss. The decoder stays frozen.
inline RobustResult robust_finetune(const DenseNet& encoder, const DenseNet& decoder_frozen,
                                    const Normalizer& norm, const std::vector<Eigen::MatrixXd>& b_raw_set,
                                    const Eigen::MatrixXd& a_norm_flat_set, double alpha_phi,
                                    const PerturbationBudget& budget, const PgdConfig& pgd_cfg,
                                    const RobustTrainConfig& cfg,
                                    std::optional<std::filesystem::path> curve_dump = std::nullopt) {
    if (b_raw_set.size() != static_cast<std::size_t>(a_norm_flat_set.cols()))
        throw std::invalid_argument("robust_finetune: dataset mismatch");
    rng::Stream stream(rng::derive_seed(cfg.seed, "robust"));
    RobustResult result;
    result.encoder = encoder;
    result.curve.columns = {"step", "robust_loss"};
    nn::Adam opt(cfg.lr);
    const auto dz = static_cast<Eigen::Index>(decoder_frozen.layers.front().w.cols());

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Eigen::MatrixXd> b_batch, d_batch;
        Eigen::MatrixXd a_batch(a_norm_flat_set.rows(), cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            const auto idx = stream.uniform_int(0, static_cast<std::int64_t>(b_raw_set.size()) - 1);
            b_batch.push_back(b_raw_set[static_cast<std::size_t>(idx)]);
            a_batch.col(i) = a_norm_flat_set.col(idx);
        }
        for (int i = 0; i < cfg.batch; ++i) {
            PgdConfig inner = pgd_cfg;
            inner.seed = rng::derive_seed(cfg.seed, "robust.pgd", static_cast<std::uint64_t>(step) * 1000 + i);
            d_batch.push_back(
                pgd_worst_case(result.encoder, decoder_frozen, norm, b_batch[static_cast<std::size_t>(i)],
                               budget, inner)
                    .delta);
        }
        Eigen::MatrixXd eps(dz, cfg.batch);
        for (Eigen::Index j = 0; j < eps.size(); ++j) eps(j) = stream.normal();
        nn::Gradients<double> grads;
        const double loss = robust_loss(result.encoder, decoder_frozen, norm, b_batch, d_batch, a_batch,
                                        alpha_phi, cfg.beta, eps, &grads);
        opt.step(result.encoder, grads);
        result.curve.rows.push_back({static_cast<double>(step), loss});
        if (!std::isfinite(loss) || std::abs(loss) > cfg.divergence_abort) {
            if (curve_dump) result.curve.dump_csv(*curve_dump);
            throw std::runtime_error("robust_finetune diverged at step " + std::to_string(step));
        }
    }
    return result;
}

} // namespace dse::robust
