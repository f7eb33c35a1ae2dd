#pragma once

#include "dse/gan.hpp"

#include <Eigen/Core>
#include <stdexcept>

namespace dse::adapt {

using nn::DenseNet;

// Single affine latent transform z_hat = W^T z + b, fitted one-shot on the
// observable reconstruction error when the decoder meets an unknown data
// distribution. Initialized at identity.
struct AdaptorParams {
    Eigen::MatrixXd w;
    Eigen::VectorXd b;

    static AdaptorParams identity(int d_z) {
        AdaptorParams p;
        p.w = Eigen::MatrixXd::Identity(d_z, d_z);
        p.b = Eigen::VectorXd::Zero(d_z);
        return p;
    }
    bool is_identity(double tol = 0.0) const {
        return (w - Eigen::MatrixXd::Identity(w.rows(), w.cols())).cwiseAbs().maxCoeff() <= tol &&
               b.cwiseAbs().maxCoeff() <= tol;
    }
};

inline Eigen::VectorXd adaptor_apply(const AdaptorParams& params, const Eigen::VectorXd& z) {
    if (params.w.rows() != z.size() || params.b.size() != z.size())
        throw std::invalid_argument("adaptor_apply: dimension mismatch");
    return params.w.transpose() * z + params.b;
}

// Observable positions of the flattened WindowA layout: the Y and Z block
// rows over every column.
inline Eigen::VectorXd known_mask(int n_machines, int p, int q) {
    using namespace statespace;
    const int cols = p + q;
    const int rows = kRowsAll * n_machines;
    Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(rows, cols);
    for (int m = 0; m < n_machines; ++m) {
        for (int v = 0; v < kRowsY; ++v) mask.row(row_y(n_machines, m, v)).setOnes();
        for (int v = 0; v < kRowsZ; ++v) mask.row(row_z(n_machines, m, v)).setOnes();
    }
    return statespace::detail::flatten_row_major(mask);
}

// Mean squared decode error over the observable positions (normalized
// window space).
inline double observable_mse(const DenseNet& decoder, const Eigen::VectorXd& z,
                             const Eigen::VectorXd& observed_flat, const Eigen::VectorXd& mask) {
    Eigen::VectorXd out = nn::forward<double>(decoder, Eigen::MatrixXd(z)).col(0);
    const double count = mask.sum();
    if (count <= 0.0) throw std::invalid_argument("observable_mse: empty mask");
    return ((out - observed_flat).cwiseProduct(mask)).squaredNorm() / count;
}

inline bool should_adapt(const DenseNet& decoder, const Eigen::VectorXd& z, const Eigen::VectorXd& observed_flat,
                         const Eigen::VectorXd& mask, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("should_adapt: threshold must be > 0");
    return observable_mse(decoder, z, observed_flat, mask) > threshold;
}

struct AdaptFitResult {
    AdaptorParams params;
    std::vector<double> loss_trace;
    bool reverted = false; // divergence guard fell back to identity
};

// Gradient descent from the identity on the masked reconstruction loss; the
// decoder (and everything upstream) stays frozen. Steps that increase the
// loss are retried with a halved rate and the loss trace is non-increasing.
inline AdaptFitResult adapt_fit(const DenseNet& decoder_frozen, const Eigen::VectorXd& z_init,
                                const Eigen::VectorXd& observed_flat, const Eigen::VectorXd& mask,
                                int steps = 200, double lr = 1e-2) {
    const auto dz = z_init.size();
    AdaptFitResult result;
    result.params = AdaptorParams::identity(static_cast<int>(dz));
    const double count = mask.sum();
    if (count <= 0.0) throw std::invalid_argument("adapt_fit: empty mask");

    auto loss_of = [&](const AdaptorParams& p, nn::ForwardCache<double>* cache,
                       Eigen::VectorXd* z_out) -> double {
        Eigen::VectorXd z = p.w.transpose() * z_init + p.b;
        if (z_out) *z_out = z;
        Eigen::VectorXd out = nn::forward<double>(decoder_frozen, Eigen::MatrixXd(z), cache).col(0);
        return ((out - observed_flat).cwiseProduct(mask)).squaredNorm() / count;
    };

    double loss = loss_of(result.params, nullptr, nullptr);
    result.loss_trace.push_back(loss);
    double rate = lr;

    for (int step = 0; step < steps; ++step) {
        nn::ForwardCache<double> cache;
        Eigen::VectorXd z;
        loss_of(result.params, &cache, &z);
        Eigen::VectorXd out = cache.post.back().col(0);
        Eigen::VectorXd d_out = 2.0 * (out - observed_flat).cwiseProduct(mask) / count;
        Eigen::MatrixXd dz_grad = nn::backward<double>(decoder_frozen, cache, Eigen::MatrixXd(d_out), nullptr);
        // z_hat = W^T z_init + b
        Eigen::MatrixXd dw = z_init * dz_grad.col(0).transpose();
        Eigen::VectorXd db = dz_grad.col(0);

        bool accepted = false;
        for (int halving = 0; halving < 25; ++halving) {
            AdaptorParams trial = result.params;
            trial.w -= rate * dw;
            trial.b -= rate * db;
            const double trial_loss = loss_of(trial, nullptr, nullptr);
            if (std::isfinite(trial_loss) && trial_loss <= loss) {
                result.params = trial;
                loss = trial_loss;
                result.loss_trace.push_back(loss);
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if (!accepted) break; // converged: no descent at any tried rate
    }

    if (!std::isfinite(loss)) {
        result.params = AdaptorParams::identity(static_cast<int>(dz));
        result.reverted = true;
    }
    return result;
}

// Wire format appended to the latent payload: d_z, W row-major, then b, all
// as 64-bit floats.
inline std::vector<double> adaptor_wire(const AdaptorParams& params) {
    const auto dz = params.b.size();
    std::vector<double> wire;
    wire.reserve(static_cast<std::size_t>(1 + dz * dz + dz));
    wire.push_back(static_cast<double>(dz));
    for (Eigen::Index r = 0; r < dz; ++r)
        for (Eigen::Index c = 0; c < dz; ++c) wire.push_back(params.w(r, c));
    for (Eigen::Index i = 0; i < dz; ++i) wire.push_back(params.b[i]);
    return wire;
}

inline AdaptorParams adaptor_from_wire(const std::vector<double>& wire) {
    if (wire.empty()) throw std::invalid_argument("adaptor wire: empty");
    const auto dz = static_cast<Eigen::Index>(wire[0]);
    if (static_cast<Eigen::Index>(wire.size()) != 1 + dz * dz + dz)
        throw std::invalid_argument("adaptor wire: size mismatch");
    AdaptorParams p;
    p.w.resize(dz, dz);
    std::size_t at = 1;
    for (Eigen::Index r = 0; r < dz; ++r)
        for (Eigen::Index c = 0; c < dz; ++c) p.w(r, c) = wire[at++];
    p.b.resize(dz);
    for (Eigen::Index i = 0; i < dz; ++i) p.b[i] = wire[at++];
    return p;
}

// Payload accounting for the compression ratio: d_z^2 + d_z extra values
// when the adaptor rides along.
inline int adaptor_payload_dims(int d_z) { return d_z * d_z + d_z; }

} // namespace dse::adapt
