#pragma once

#include <Eigen/Core>
#include <cmath>
#include <iosfwd>

namespace dse::nn {

// First-order dual number a + eps*b with eps^2 = 0. Running an ordinary
// backprop pass with Dual inputs yields parameter gradients whose tangent
// parts are directional derivatives of those gradients — this is how the
// gradient-penalty term gets its exact parameter gradient.
struct Dual {
    double v = 0.0; // value
    double t = 0.0; // tangent

    Dual() = default;
    Dual(double value) : v(value) {}
    Dual(double value, double tangent) : v(value), t(tangent) {}

    Dual& operator+=(const Dual& o) { v += o.v; t += o.t; return *this; }
    Dual& operator-=(const Dual& o) { v -= o.v; t -= o.t; return *this; }
    Dual& operator*=(const Dual& o) { t = t * o.v + v * o.t; v *= o.v; return *this; }
    Dual& operator/=(const Dual& o) { t = (t * o.v - v * o.t) / (o.v * o.v); v /= o.v; return *this; }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.t}; }
inline Dual operator+(const Dual& a) { return a; }

inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }
inline bool operator!=(const Dual& a, const Dual& b) { return a.v != b.v; }
inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }

inline Dual exp(const Dual& a) { double e = std::exp(a.v); return {e, a.t * e}; }
inline Dual log(const Dual& a) { return {std::log(a.v), a.t / a.v}; }
inline Dual sqrt(const Dual& a) { double s = std::sqrt(a.v); return {s, s > 0.0 ? a.t / (2.0 * s) : 0.0}; }
inline Dual tanh(const Dual& a) { double th = std::tanh(a.v); return {th, a.t * (1.0 - th * th)}; }
inline Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }
inline double tangent_of(double) { return 0.0; }
inline double tangent_of(const Dual& x) { return x.t; }

inline std::ostream& operator<<(std::ostream& os, const Dual& d);

} // namespace dse::nn

namespace Eigen {

template <>
struct NumTraits<dse::nn::Dual> : NumTraits<double> {
    using Real = dse::nn::Dual;
    using NonInteger = dse::nn::Dual;
    using Nested = dse::nn::Dual;
    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 1,
        ReadCost = 2,
        AddCost = 4,
        MulCost = 6,
    };
};

template <typename BinaryOp>
struct ScalarBinaryOpTraits<dse::nn::Dual, double, BinaryOp> {
    using ReturnType = dse::nn::Dual;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, dse::nn::Dual, BinaryOp> {
    using ReturnType = dse::nn::Dual;
};

} // namespace Eigen
