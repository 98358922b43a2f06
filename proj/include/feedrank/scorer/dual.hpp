#pragma once

// Forward-mode dual numbers. Running the reverse-mode gradient code on Dual
// inputs seeded with a direction v yields (grad, H v) in one pass.

#include <cmath>

namespace feedrank::scorer {

struct Dual {
    double v = 0.0;  // value
    double d = 0.0;  // directional derivative

    constexpr Dual() = default;
    constexpr Dual(double value, double deriv = 0.0) : v(value), d(deriv) {}

    Dual& operator+=(const Dual& o) {
        v += o.v;
        d += o.d;
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        d -= o.d;
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        d = d * o.v + v * o.d;
        v *= o.v;
        return *this;
    }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.d}; }

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }

inline Dual tanh(const Dual& x) {
    const double t = std::tanh(x.v);
    return {t, (1.0 - t * t) * x.d};
}

inline Dual log(const Dual& x) { return {std::log(x.v), x.d / x.v}; }

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline Dual sigmoid(const Dual& z) {
    const double s = sigmoid(z.v);
    return {s, s * (1.0 - s) * z.d};
}

}  // namespace feedrank::scorer
