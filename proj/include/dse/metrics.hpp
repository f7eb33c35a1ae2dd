#pragma once

#include <Eigen/Core>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dse::metrics {

// Dynamic mean absolute percentage error with an explicitly supplied
// normalization range; used when the range is defined on a longer truth
// context than the scored segment.
inline double dmape_with_range(const Eigen::VectorXd& estimates, const Eigen::VectorXd& truth,
                               double truth_min, double truth_max) {
    if (estimates.size() != truth.size() || truth.size() < 1)
        throw std::invalid_argument("dmape: series length mismatch");
    const double range = truth_max - truth_min;
    if (!(range > 0.0)) throw std::invalid_argument("dmape: degenerate range");
    return (estimates - truth).cwiseAbs().mean() / range * 100.0;
}

// Dynamic mean absolute percentage error: mean absolute error normalized by
// the truth range, in percent. The range comes from the truth series alone.
inline double dmape(const Eigen::VectorXd& estimates, const Eigen::VectorXd& truth) {
    if (truth.size() < 1) throw std::invalid_argument("dmape: empty series");
    return dmape_with_range(estimates, truth, truth.minCoeff(), truth.maxCoeff());
}

// Mean DMAPE over several series sharing one truth range definition; series
// with a degenerate truth range are skipped (a constant channel carries no
// dynamics to score).
inline double dmape_pooled(const std::vector<Eigen::VectorXd>& estimates,
                           const std::vector<Eigen::VectorXd>& truths, double degenerate_range = 1e-12) {
    if (estimates.size() != truths.size()) throw std::invalid_argument("dmape_pooled: series count mismatch");
    double sum = 0.0;
    int used = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const double range = truths[i].maxCoeff() - truths[i].minCoeff();
        if (range <= degenerate_range) continue;
        sum += dmape(estimates[i], truths[i]);
        ++used;
    }
    if (used == 0) throw std::invalid_argument("dmape_pooled: all series degenerate");
    return sum / used;
}

// 100 * transmitted / raw; raw is the per-window PMU payload.
inline double compression_ratio(int transmitted_dims, int raw_dims) {
    if (transmitted_dims <= 0 || raw_dims <= 0) throw std::invalid_argument("compression_ratio: dims must be > 0");
    return 100.0 * static_cast<double>(transmitted_dims) / static_cast<double>(raw_dims);
}

struct MetricsReport {
    std::string scenario;
    std::map<std::string, double> dmape_by_class; // delta, domega, eprime, controls
    double compression_ratio = 100.0;
    double wall_time_s = 0.0;
};

} // namespace dse::metrics
