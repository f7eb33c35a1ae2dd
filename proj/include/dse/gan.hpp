#pragma once

#include "dse/net.hpp"
#include "dse/state_space.hpp"

#include <json.hpp>

#include <Eigen/Core>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dse::gen {

using nn::DenseNet;
using nn::MatX;

// Per-feature z-score statistics over the stacked window rows, computed on
// the training set and stored with every checkpoint. WindowB rows carry the
// same variables as WindowA rows, so one set of stats serves both.
struct Normalizer {
    Eigen::VectorXd mean, std;

    static Normalizer fit(const std::vector<Eigen::MatrixXd>& stacked_windows) {
        if (stacked_windows.empty()) throw std::invalid_argument("normalizer: empty dataset");
        const auto rows = stacked_windows[0].rows();
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(rows), sq = Eigen::VectorXd::Zero(rows);
        double count = 0.0;
        for (const auto& w : stacked_windows) {
            sum += w.rowwise().sum();
            sq += w.cwiseProduct(w).rowwise().sum();
            count += static_cast<double>(w.cols());
        }
        Normalizer n;
        n.mean = sum / count;
        n.std = ((sq / count) - n.mean.cwiseProduct(n.mean)).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-8);
        return n;
    }

    Eigen::MatrixXd normalize(const Eigen::MatrixXd& w) const {
        return (w.colwise() - mean).array().colwise() / std.array();
    }
    Eigen::MatrixXd denormalize(const Eigen::MatrixXd& w) const {
        return (w.array().colwise() * std.array()).colwise() + mean.array();
    }
};

struct LatentGaussian {
    Eigen::VectorXd mu;
    Eigen::VectorXd log_var;

    Eigen::VectorXd sigma() const { return (log_var.array() / 2.0).exp(); }
};

constexpr double kLogVarCap = 40.0;

// z = mu + exp(log_var / 2) .* eps, with the log-variance capped; at the
// lower cap sigma is floored to exactly zero so z == mu.
inline Eigen::VectorXd reparameterize(const Eigen::VectorXd& mu, const Eigen::VectorXd& log_var,
                                      const Eigen::VectorXd& eps) {
    Eigen::VectorXd z(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double lv = std::min(log_var[i], kLogVarCap);
        const double sigma = lv <= -kLogVarCap ? 0.0 : std::exp(lv / 2.0);
        z[i] = mu[i] + sigma * eps[i];
    }
    return z;
}

// KL( N(mu, sigma^2) || N(0, I) ) for a diagonal Gaussian.
inline double kl_diag_gaussian(const Eigen::VectorXd& mu, const Eigen::VectorXd& log_var) {
    double kl = 0.0;
    for (Eigen::Index i = 0; i < mu.size(); ++i)
        kl += 0.5 * (std::exp(log_var[i]) + mu[i] * mu[i] - 1.0 - log_var[i]);
    return kl;
}

struct TrainConfig {
    double alpha_phi = 0.1; // encoder loss balance in [0, 1]
    double gp_weight = 10.0;
    double lr_critic = 1e-4;
    double lr_gen = 1e-4;
    double lr_enc = 1e-3;
    int batch = 64;
    int critic_steps = 3000; // total critic updates
    int n_critic = 5;        // critic updates per generator update
    int encoder_steps = 3000;
    int d_z = 16;
    std::vector<int> hidden = {128, 128, 128};
    std::uint64_t seed = 1;
    double divergence_abort = 1e6;

    void validate() const {
        if (alpha_phi < 0.0 || alpha_phi > 1.0) throw std::invalid_argument("alpha_phi must be in [0,1]");
        if (batch < 1 || d_z < 1) throw std::invalid_argument("bad train config");
    }
};

// mu on top, log-variance head below.
inline void split_encoder_output(const Eigen::MatrixXd& e, Eigen::MatrixXd& mu, Eigen::MatrixXd& log_var) {
    const auto dz = e.rows() / 2;
    mu = e.topRows(dz);
    log_var = e.bottomRows(dz);
}

inline LatentGaussian encode(const DenseNet& encoder, const Eigen::VectorXd& b_flat) {
    MatX<double> e = nn::forward<double>(encoder, b_flat);
    LatentGaussian lg;
    lg.mu = e.col(0).head(e.rows() / 2);
    lg.log_var = e.col(0).tail(e.rows() / 2);
    return lg;
}

// ---------------------------------------------------------------------------
// WGAN-GP losses

// -E[D(real)] + E[D(G(z))] + gp_weight * E[(||grad D at interpolates|| - 1)^2].
// `interp_u` supplies the per-sample interpolation coefficients explicitly so
// the loss is a pure function; gradients (optional) flow to the critic only.
inline double critic_loss(const DenseNet& critic, const DenseNet& decoder, const Eigen::MatrixXd& real_a,
                          const Eigen::MatrixXd& z, double gp_weight, const Eigen::VectorXd& interp_u,
                          nn::Gradients<double>* critic_grads = nullptr) {
    const auto batch = static_cast<int>(real_a.cols());
    if (z.cols() != batch || interp_u.size() != batch) throw std::invalid_argument("critic_loss: batch mismatch");

    nn::ForwardCache<double> cache_real, cache_fake, cache_interp;
    MatX<double> d_real = nn::forward<double>(critic, real_a, critic_grads ? &cache_real : nullptr);
    Eigen::MatrixXd fake = nn::forward<double>(decoder, z);
    MatX<double> d_fake = nn::forward<double>(critic, fake, critic_grads ? &cache_fake : nullptr);

    Eigen::MatrixXd interp(real_a.rows(), batch);
    for (int i = 0; i < batch; ++i)
        interp.col(i) = interp_u[i] * real_a.col(i) + (1.0 - interp_u[i]) * fake.col(i);

    // input gradients of the critic at the interpolates
    nn::ForwardCache<double> cache_g;
    nn::forward<double>(critic, interp, &cache_g);
    Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(1, batch);
    Eigen::MatrixXd g = nn::backward<double>(critic, cache_g, ones, nullptr);

    double loss = -d_real.row(0).mean() + d_fake.row(0).mean();
    double gp = 0.0;
    Eigen::VectorXd norms(batch);
    for (int i = 0; i < batch; ++i) {
        norms[i] = g.col(i).norm();
        gp += (norms[i] - 1.0) * (norms[i] - 1.0);
    }
    gp /= batch;
    loss += gp_weight * gp;
    if (!std::isfinite(loss)) throw std::runtime_error("critic_loss: non-finite loss");

    if (critic_grads) {
        critic_grads->init_like(critic);
        Eigen::MatrixXd gr = Eigen::MatrixXd::Constant(1, batch, -1.0 / batch);
        nn::backward<double>(critic, cache_real, gr, critic_grads);
        Eigen::MatrixXd gf = Eigen::MatrixXd::Constant(1, batch, 1.0 / batch);
        nn::backward<double>(critic, cache_fake, gf, critic_grads);

        if (gp_weight != 0.0) {
            // Forward-over-reverse: a dual pass whose input tangents are the
            // input gradients yields d/d(theta) of ||grad_x D||^2 terms.
            MatX<nn::Dual> xd(interp.rows(), batch);
            for (Eigen::Index r = 0; r < interp.rows(); ++r)
                for (int c = 0; c < batch; ++c) xd(r, c) = nn::Dual(interp(r, c), g(r, c));
            nn::ForwardCache<nn::Dual> cache_d;
            nn::forward<nn::Dual>(critic, xd, &cache_d);
            MatX<nn::Dual> w(1, batch);
            for (int i = 0; i < batch; ++i) {
                const double denom = std::max(norms[i], 1e-12);
                w(0, i) = nn::Dual(gp_weight * 2.0 * (norms[i] - 1.0) / (denom * batch), 0.0);
            }
            nn::Gradients<nn::Dual> dual_grads;
            nn::backward<nn::Dual>(critic, cache_d, w, &dual_grads);
            for (std::size_t l = 0; l < critic_grads->dw.size(); ++l) {
                for (Eigen::Index i = 0; i < critic_grads->dw[l].size(); ++i)
                    critic_grads->dw[l](i) += dual_grads.dw[l](i).t;
                for (Eigen::Index i = 0; i < critic_grads->db[l].size(); ++i)
                    critic_grads->db[l][i] += dual_grads.db[l][i].t;
            }
        }
    }
    return loss;
}

// -E[D(G(z))]; gradients (optional) flow to the decoder only.
inline double generator_loss(const DenseNet& critic, const DenseNet& decoder, const Eigen::MatrixXd& z,
                             nn::Gradients<double>* decoder_grads = nullptr) {
    const auto batch = static_cast<int>(z.cols());
    nn::ForwardCache<double> cache_dec, cache_val;
    Eigen::MatrixXd fake = nn::forward<double>(decoder, z, decoder_grads ? &cache_dec : nullptr);
    MatX<double> d = nn::forward<double>(critic, fake, &cache_val);
    double loss = -d.row(0).mean();
    if (decoder_grads) {
        decoder_grads->init_like(decoder);
        Eigen::MatrixXd gd = Eigen::MatrixXd::Constant(1, batch, -1.0 / batch);
        Eigen::MatrixXd dfake = nn::backward<double>(critic, cache_val, gd, nullptr);
        nn::backward<double>(decoder, cache_dec, dfake, decoder_grads);
    }
    return loss;
}

// alpha * KL(N(mu, sigma^2) || N(0,I)) + (1 - alpha) * mean squared
// reconstruction error of G(E(B)) against A. Expectations are batch means,
// KL is summed over latent coordinates, the reconstruction term is a mean
// over window entries. Gradients (optional) flow to the encoder only.
inline double encoder_loss(const DenseNet& encoder, const DenseNet& decoder_frozen, const Eigen::MatrixXd& b,
                           const Eigen::MatrixXd& a, double alpha_phi, const Eigen::MatrixXd& eps,
                           nn::Gradients<double>* encoder_grads = nullptr) {
    const auto batch = static_cast<int>(b.cols());
    const auto dz = eps.rows();
    nn::ForwardCache<double> cache_enc, cache_dec;
    Eigen::MatrixXd e = nn::forward<double>(encoder, b, encoder_grads ? &cache_enc : nullptr);
    if (e.rows() != 2 * dz) throw std::invalid_argument("encoder_loss: eps dim mismatch");

    Eigen::MatrixXd mu, lv;
    split_encoder_output(e, mu, lv);
    Eigen::MatrixXd z(dz, batch);
    for (int i = 0; i < batch; ++i) z.col(i) = reparameterize(mu.col(i), lv.col(i), eps.col(i));
    Eigen::MatrixXd a_hat = nn::forward<double>(decoder_frozen, z, encoder_grads ? &cache_dec : nullptr);

    double kl = 0.0;
    for (int i = 0; i < batch; ++i) kl += kl_diag_gaussian(mu.col(i), lv.col(i));
    kl /= batch;
    const double rec = (a_hat - a).squaredNorm() / (static_cast<double>(a.rows()) * batch);
    const double loss = alpha_phi * kl + (1.0 - alpha_phi) * rec;

    if (encoder_grads) {
        encoder_grads->init_like(encoder);
        Eigen::MatrixXd da = (2.0 * (1.0 - alpha_phi) / (static_cast<double>(a.rows()) * batch)) * (a_hat - a);
        Eigen::MatrixXd dz_grad = nn::backward<double>(decoder_frozen, cache_dec, da, nullptr);
        Eigen::MatrixXd de(2 * dz, batch);
        for (int i = 0; i < batch; ++i) {
            for (Eigen::Index j = 0; j < dz; ++j) {
                const double lvij = lv(j, i);
                const double capped = std::min(lvij, kLogVarCap);
                const double sigma = capped <= -kLogVarCap ? 0.0 : std::exp(capped / 2.0);
                const bool in_range = std::abs(lvij) < kLogVarCap;
                // reconstruction path
                de(j, i) = dz_grad(j, i);
                de(dz + j, i) = in_range ? dz_grad(j, i) * eps(j, i) * sigma * 0.5 : 0.0;
                // prior path
                de(j, i) += alpha_phi * mu(j, i) / batch;
                de(dz + j, i) += alpha_phi * 0.5 * (std::exp(std::min(lvij, kLogVarCap)) - 1.0) / batch;
            }
        }
        nn::backward<double>(encoder, cache_enc, de, encoder_grads);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Training loops

struct LossCurve {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    void dump_csv(const std::filesystem::path& path) const {
        io::CsvWriter csv(path, columns);
        for (const auto& r : rows) {
            std::vector<std::string> cells;
            cells.reserve(r.size());
            for (double v : r) cells.push_back(io::format_full(v));
            csv.row(cells);
        }
    }
};

struct WganResult {
    DenseNet decoder;
    DenseNet critic;
    LossCurve curve;
};

namespace detail {

inline Eigen::MatrixXd sample_columns(const Eigen::MatrixXd& data, int batch, rng::Stream& stream) {
    Eigen::MatrixXd out(data.rows(), batch);
    for (int i = 0; i < batch; ++i)
        out.col(i) = data.col(stream.uniform_int(0, static_cast<std::int64_t>(data.cols()) - 1));
    return out;
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, rng::Stream& stream) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = stream.normal();
    return m;
}

[[noreturn]] inline void abort_divergence(const std::string& what, const LossCurve& curve,
                                          const std::optional<std::filesystem::path>& dump) {
    std::string msg = what;
    if (dump) {
        curve.dump_csv(*dump);
        msg += "; loss curve dumped to " + dump->string();
    }
    throw std::runtime_error(msg);
}

} // namespace detail

// WGAN-GP over normalized flattened WindowA samples (columns).
inline WganResult train_wgan(const Eigen::MatrixXd& dataset_a, const TrainConfig& cfg,
                             std::optional<std::filesystem::path> curve_dump = std::nullopt) {
    cfg.validate();
    if (dataset_a.cols() < cfg.batch) throw std::invalid_argument("train_wgan: dataset smaller than batch");
    rng::Stream stream(rng::derive_seed(cfg.seed, "wgan"));
    const auto adim = static_cast<int>(dataset_a.rows());

    WganResult result;
    result.decoder = nn::make_mlp(cfg.d_z, cfg.hidden, adim, stream);
    result.critic = nn::make_mlp(adim, cfg.hidden, 1, stream);
    result.curve.columns = {"step", "critic_loss", "generator_loss"};

    nn::Adam opt_critic(cfg.lr_critic, 0.5, 0.9);
    nn::Adam opt_gen(cfg.lr_gen, 0.5, 0.9);

    double last_gen_loss = 0.0;
    for (int step = 0; step < cfg.critic_steps; ++step) {
        Eigen::MatrixXd real = detail::sample_columns(dataset_a, cfg.batch, stream);
        Eigen::MatrixXd z = detail::gaussian_matrix(cfg.d_z, cfg.batch, stream);
        Eigen::VectorXd u(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) u[i] = stream.uniform();

        nn::Gradients<double> cg;
        double closs = critic_loss(result.critic, result.decoder, real, z, cfg.gp_weight, u, &cg);
        opt_critic.step(result.critic, cg);

        if ((step + 1) % cfg.n_critic == 0) {
            Eigen::MatrixXd zg = detail::gaussian_matrix(cfg.d_z, cfg.batch, stream);
            nn::Gradients<double> gg;
            last_gen_loss = generator_loss(result.critic, result.decoder, zg, &gg);
            opt_gen.step(result.decoder, gg);
        }
        result.curve.rows.push_back({static_cast<double>(step), closs, last_gen_loss});
        if (std::abs(closs) > cfg.divergence_abort || std::abs(last_gen_loss) > cfg.divergence_abort)
            detail::abort_divergence("train_wgan diverged at step " + std::to_string(step), result.curve,
                                     curve_dump);
    }
    return result;
}

struct EncoderResult {
    DenseNet encoder;
    LossCurve curve;
};

// Variational encoder trained as the frozen decoder's inversion.
inline EncoderResult train_encoder(const Eigen::MatrixXd& dataset_b, const Eigen::MatrixXd& dataset_a,
                                   const DenseNet& decoder, const TrainConfig& cfg,
                                   std::optional<std::filesystem::path> curve_dump = std::nullopt) {
    cfg.validate();
    if (dataset_b.cols() != dataset_a.cols()) throw std::invalid_argument("train_encoder: dataset mismatch");
    rng::Stream stream(rng::derive_seed(cfg.seed, "encoder"));
    const auto bdim = static_cast<int>(dataset_b.rows());

    EncoderResult result;
    result.encoder = nn::make_mlp(bdim, cfg.hidden, 2 * cfg.d_z, stream);
    result.curve.columns = {"step", "encoder_loss"};
    nn::Adam opt(cfg.lr_enc);

    for (int step = 0; step < cfg.encoder_steps; ++step) {
        Eigen::MatrixXd b(dataset_b.rows(), cfg.batch), a(dataset_a.rows(), cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            const auto idx = stream.uniform_int(0, static_cast<std::int64_t>(dataset_b.cols()) - 1);
            b.col(i) = dataset_b.col(idx);
            a.col(i) = dataset_a.col(idx);
        }
        Eigen::MatrixXd eps = detail::gaussian_matrix(cfg.d_z, cfg.batch, stream);
        nn::Gradients<double> eg;
        double loss = encoder_loss(result.encoder, decoder, b, a, cfg.alpha_phi, eps, &eg);
        opt.step(result.encoder, eg);
        result.curve.rows.push_back({static_cast<double>(step), loss});
        if (std::abs(loss) > cfg.divergence_abort)
            detail::abort_divergence("train_encoder diverged at step " + std::to_string(step), result.curve,
                                     curve_dump);
    }
    return result;
}

// Deterministic estimation path: decode the encoder mean.
inline Eigen::VectorXd estimate(const DenseNet& encoder, const DenseNet& decoder, const Eigen::VectorXd& b_flat) {
    LatentGaussian lg = encode(encoder, b_flat);
    return nn::forward<double>(decoder, Eigen::MatrixXd(lg.mu));
}

// ---------------------------------------------------------------------------
// Checkpoint bundle

struct ModelMeta {
    int n_machines = 1; // estimated subset size
    std::vector<int> machines;
    int p = 30, q = 1;
    int d_z = 16;

    nlohmann::json to_json() const {
        return {{"n_machines", n_machines}, {"machines", machines}, {"p", p}, {"q", q}, {"d_z", d_z},
                {"order", statespace::window_order_tag()}};
    }
    static ModelMeta from_json(const nlohmann::json& j) {
        ModelMeta m;
        m.n_machines = j.at("n_machines").get<int>();
        m.machines = j.at("machines").get<std::vector<int>>();
        m.p = j.at("p").get<int>();
        m.q = j.at("q").get<int>();
        m.d_z = j.at("d_z").get<int>();
        if (j.at("order").get<std::string>() != statespace::window_order_tag())
            throw std::runtime_error("checkpoint window ordering mismatch");
        return m;
    }
};

inline void save_model(const std::filesystem::path& path, const DenseNet& net, const Normalizer& norm,
                       const ModelMeta& meta, const std::string& kind) {
    io::BlobStore store;
    nn::net_to_blobs(store, "net", net);
    store.matrices["norm.mean"] = norm.mean;
    store.matrices["norm.std"] = norm.std;
    store.strings["meta"] = meta.to_json().dump();
    store.strings["kind"] = kind;
    store.save(path);
}

struct LoadedModel {
    DenseNet net;
    Normalizer norm;
    ModelMeta meta;
    std::string kind;
};

inline LoadedModel load_model(const std::filesystem::path& path, const std::string& expected_kind = "") {
    io::BlobStore store = io::BlobStore::load(path);
    LoadedModel m;
    m.net = nn::net_from_blobs(store, "net");
    m.norm.mean = store.matrices.at("norm.mean");
    m.norm.std = store.matrices.at("norm.std");
    m.meta = ModelMeta::from_json(nlohmann::json::parse(store.strings.at("meta")));
    m.kind = store.strings.at("kind");
    if (!expected_kind.empty() && m.kind != expected_kind)
        throw std::runtime_error("checkpoint kind mismatch: expected " + expected_kind + ", got " + m.kind);
    return m;
}

} // namespace dse::gen
