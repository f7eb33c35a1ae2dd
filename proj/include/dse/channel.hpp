#pragma once

#include "dse/rng.hpp"

#include <Eigen/Core>
#include <stdexcept>
#include <vector>

namespace dse::channel {

// Imperfect communication model for the transmitted latent vector: each
// coordinate is independently lost (zero-filled), manipulated (biased), or
// delivered clean.
struct ChannelModel {
    double loss_fraction = 0.0;
    double manipulation_fraction = 0.0;
    double manipulation_magnitude = 3.0; // in units of the latent std
    std::uint64_t seed = 0;

    void validate() const {
        if (loss_fraction < 0.0 || manipulation_fraction < 0.0 ||
            loss_fraction + manipulation_fraction > 1.0 + 1e-12)
            throw std::invalid_argument("channel: fractions must be >= 0 and sum <= 1");
    }
};

struct ChannelResult {
    Eigen::VectorXd received;
    std::vector<int> lost;        // zero-filled, flagged unreachable
    std::vector<int> manipulated; // additive bias with random sign
};

inline ChannelResult corrupt_channel(const Eigen::VectorXd& z, const ChannelModel& model,
                                     const Eigen::VectorXd& latent_std) {
    model.validate();
    if (latent_std.size() != z.size()) throw std::invalid_argument("channel: latent std size mismatch");
    rng::Stream stream(model.seed);
    ChannelResult out;
    out.received = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double u = stream.uniform();
        const double sign = stream.uniform() < 0.5 ? -1.0 : 1.0;
        if (u < model.loss_fraction) {
            out.received[i] = 0.0;
            out.lost.push_back(static_cast<int>(i));
        } else if (u < model.loss_fraction + model.manipulation_fraction) {
            out.received[i] += sign * model.manipulation_magnitude * latent_std[i];
            out.manipulated.push_back(static_cast<int>(i));
        }
    }
    return out;
}

} // namespace dse::channel
