#pragma once

#include "dse/net.hpp"

#include <Eigen/Core>
#include <functional>

namespace dse::testutil {

// Central finite differences of a scalar function of the net parameters.
inline Eigen::VectorXd fd_param_gradient(nn::DenseNet& net, const std::function<double()>& eval,
                                         double h = 1e-6) {
    Eigen::VectorXd params = nn::get_params(net);
    Eigen::VectorXd grad(params.size());
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        Eigen::VectorXd up = params, dn = params;
        up[i] += h;
        dn[i] -= h;
        nn::set_params(net, up);
        const double fu = eval();
        nn::set_params(net, dn);
        const double fd = eval();
        grad[i] = (fu - fd) / (2.0 * h);
    }
    nn::set_params(net, params);
    return grad;
}

inline double max_rel_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                            double floor = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

// Energy distance between two sample sets (columns are samples).
inline double energy_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    auto mean_pair = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < a.cols(); ++i)
            for (Eigen::Index j = 0; j < b.cols(); ++j) sum += (a.col(i) - b.col(j)).norm();
        return sum / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
    };
    return 2.0 * mean_pair(x, y) - mean_pair(x, x) - mean_pair(y, y);
}

} // namespace dse::testutil
