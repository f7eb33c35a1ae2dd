#pragma once

#include "dse/dual.hpp"
#include "dse/io.hpp"
#include "dse/rng.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dse::nn {

enum class Act { linear, tanh_act, softplus };

inline const char* act_name(Act a) {
    switch (a) {
        case Act::linear: return "linear";
        case Act::tanh_act: return "tanh";
        case Act::softplus: return "softplus";
    }
    return "?";
}

inline Act act_from_name(const std::string& s) {
    if (s == "linear") return Act::linear;
    if (s == "tanh") return Act::tanh_act;
    if (s == "softplus") return Act::softplus;
    throw std::invalid_argument("unknown activation: " + s);
}

template <typename S>
inline S act_apply(Act act, const S& x) {
    using std::exp;
    using std::log;
    using std::tanh;
    switch (act) {
        case Act::linear: return x;
        case Act::tanh_act: return tanh(x);
        case Act::softplus:
            if (value_of(x) > 30.0) return x + log(S(1.0) + exp(-x));
            return log(S(1.0) + exp(x));
    }
    return x;
}

template <typename S>
inline S act_deriv(Act act, const S& pre) {
    using std::exp;
    using std::tanh;
    switch (act) {
        case Act::linear: return S(1.0);
        case Act::tanh_act: {
            S t = tanh(pre);
            return S(1.0) - t * t;
        }
        case Act::softplus: {
            if (value_of(pre) > 30.0) return S(1.0) / (S(1.0) + exp(-pre));
            S e = exp(pre);
            return e / (S(1.0) + e);
        }
    }
    return S(1.0);
}

struct DenseNet {
    struct Layer {
        Eigen::MatrixXd w;
        Eigen::VectorXd b;
        Act act = Act::tanh_act;
    };
    std::vector<Layer> layers;

    int in_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().w.cols()); }
    int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().w.rows()); }
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.w.size() + l.b.size());
        return n;
    }
};

inline DenseNet make_mlp(int in, const std::vector<int>& hidden, int out, rng::Stream& stream,
                         Act hidden_act = Act::tanh_act, Act out_act = Act::linear) {
    DenseNet net;
    std::vector<int> dims;
    dims.push_back(in);
    for (int h : hidden) dims.push_back(h);
    dims.push_back(out);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseNet::Layer layer;
        const int fan_in = dims[l], fan_out = dims[l + 1];
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        layer.w.resize(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r)
            for (int c = 0; c < fan_in; ++c) layer.w(r, c) = stream.uniform(-limit, limit);
        layer.b = Eigen::VectorXd::Zero(fan_out);
        layer.act = (l + 2 == dims.size()) ? out_act : hidden_act;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
struct ForwardCache {
    std::vector<MatX<S>> pre;  // pre-activations per layer
    std::vector<MatX<S>> post; // post[0] is the input batch
};

template <typename S>
inline MatX<S> forward(const DenseNet& net, const MatX<S>& x, ForwardCache<S>* cache = nullptr) {
    if (static_cast<int>(x.rows()) != net.in_dim()) throw std::invalid_argument("net forward: dim mismatch");
    MatX<S> h = x;
    if (cache) {
        cache->pre.clear();
        cache->post.clear();
        cache->post.push_back(h);
    }
    for (const auto& layer : net.layers) {
        MatX<S> a = layer.w.cast<S>() * h;
        for (Eigen::Index c = 0; c < a.cols(); ++c) a.col(c) += layer.b.cast<S>();
        MatX<S> out(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.size(); ++i) out(i) = act_apply<S>(layer.act, a(i));
        if (cache) {
            cache->pre.push_back(a);
            cache->post.push_back(out);
        }
        h = std::move(out);
    }
    return h;
}

template <typename S>
struct Gradients {
    std::vector<MatX<S>> dw;
    std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> db;

    void init_like(const DenseNet& net) {
        dw.clear();
        db.clear();
        for (const auto& l : net.layers) {
            dw.push_back(MatX<S>::Zero(l.w.rows(), l.w.cols()));
            db.push_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(l.b.size()));
        }
    }
    void accumulate(const Gradients& o, double scale = 1.0) {
        for (std::size_t l = 0; l < dw.size(); ++l) {
            dw[l] += o.dw[l] * S(scale);
            db[l] += o.db[l] * S(scale);
        }
    }
};

// Reverse pass: takes dL/d(output) and returns dL/d(input); parameter
// gradients are accumulated into `grads` when given.
template <typename S>
inline MatX<S> backward(const DenseNet& net, const ForwardCache<S>& cache, const MatX<S>& grad_out,
                        Gradients<S>* grads = nullptr) {
    if (grads && grads->dw.empty()) grads->init_like(net);
    MatX<S> g = grad_out;
    for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l) {
        const auto& layer = net.layers[static_cast<std::size_t>(l)];
        const auto& a = cache.pre[static_cast<std::size_t>(l)];
        MatX<S> ga(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.size(); ++i) ga(i) = g(i) * act_deriv<S>(layer.act, a(i));
        if (grads) {
            grads->dw[static_cast<std::size_t>(l)] += ga * cache.post[static_cast<std::size_t>(l)].transpose();
            grads->db[static_cast<std::size_t>(l)] += ga.rowwise().sum();
        }
        g = layer.w.cast<S>().transpose() * ga;
    }
    return g;
}

// Flat parameter views, used by the optimizers and the finite-difference
// checks in the test suite.
inline Eigen::VectorXd get_params(const DenseNet& net) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(net.param_count()));
    Eigen::Index at = 0;
    for (const auto& l : net.layers) {
        for (Eigen::Index c = 0; c < l.w.cols(); ++c)
            for (Eigen::Index r = 0; r < l.w.rows(); ++r) v[at++] = l.w(r, c);
        for (Eigen::Index r = 0; r < l.b.size(); ++r) v[at++] = l.b[r];
    }
    return v;
}

inline void set_params(DenseNet& net, const Eigen::VectorXd& v) {
    Eigen::Index at = 0;
    for (auto& l : net.layers) {
        for (Eigen::Index c = 0; c < l.w.cols(); ++c)
            for (Eigen::Index r = 0; r < l.w.rows(); ++r) l.w(r, c) = v[at++];
        for (Eigen::Index r = 0; r < l.b.size(); ++r) l.b[r] = v[at++];
    }
    if (at != v.size()) throw std::invalid_argument("set_params: size mismatch");
}

inline Eigen::VectorXd grads_to_vector(const DenseNet& net, const Gradients<double>& g) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(net.param_count()));
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& dw = g.dw[l];
        for (Eigen::Index c = 0; c < dw.cols(); ++c)
            for (Eigen::Index r = 0; r < dw.rows(); ++r) v[at++] = dw(r, c);
        for (Eigen::Index r = 0; r < g.db[l].size(); ++r) v[at++] = g.db[l][r];
    }
    return v;
}

// Adam with per-tensor slots.
class Adam {
public:
    Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(DenseNet& net, const Gradients<double>& grads) {
        if (mw_.empty()) {
            for (const auto& l : net.layers) {
                mw_.push_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
                vw_.push_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
                mb_.push_back(Eigen::VectorXd::Zero(l.b.size()));
                vb_.push_back(Eigen::VectorXd::Zero(l.b.size()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            auto& layer = net.layers[l];
            mw_[l] = beta1_ * mw_[l] + (1.0 - beta1_) * grads.dw[l];
            vw_[l] = beta2_ * vw_[l] + (1.0 - beta2_) * grads.dw[l].cwiseProduct(grads.dw[l]);
            layer.w -= (lr_ / bc1) * mw_[l].cwiseQuotient(((vw_[l] / bc2).cwiseSqrt().array() + eps_).matrix());
            mb_[l] = beta1_ * mb_[l] + (1.0 - beta1_) * grads.db[l];
            vb_[l] = beta2_ * vb_[l] + (1.0 - beta2_) * grads.db[l].cwiseProduct(grads.db[l]);
            layer.b -= (lr_ / bc1) * mb_[l].cwiseQuotient(((vb_[l] / bc2).cwiseSqrt().array() + eps_).matrix());
        }
    }

    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Eigen::MatrixXd> mw_, vw_;
    std::vector<Eigen::VectorXd> mb_, vb_;
};

inline void net_to_blobs(io::BlobStore& store, const std::string& prefix, const DenseNet& net) {
    std::string acts;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        store.matrices[prefix + ".l" + std::to_string(l) + ".w"] = layer.w;
        store.matrices[prefix + ".l" + std::to_string(l) + ".b"] = layer.b;
        if (l) acts += ",";
        acts += act_name(layer.act);
    }
    store.strings[prefix + ".acts"] = acts;
    store.strings[prefix + ".layers"] = std::to_string(net.layers.size());
}

inline DenseNet net_from_blobs(const io::BlobStore& store, const std::string& prefix) {
    DenseNet net;
    const auto n = static_cast<std::size_t>(std::stoul(store.strings.at(prefix + ".layers")));
    std::vector<std::string> acts;
    {
        std::istringstream ss(store.strings.at(prefix + ".acts"));
        std::string tok;
        while (std::getline(ss, tok, ',')) acts.push_back(tok);
    }
    for (std::size_t l = 0; l < n; ++l) {
        DenseNet::Layer layer;
        layer.w = store.matrices.at(prefix + ".l" + std::to_string(l) + ".w");
        layer.b = store.matrices.at(prefix + ".l" + std::to_string(l) + ".b");
        layer.act = act_from_name(acts.at(l));
        net.layers.push_back(std::move(layer));
    }
    return net;
}

} // namespace dse::nn
