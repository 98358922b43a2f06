#pragma once

// The few-shot relevance scorer: F -> H (tanh) -> 1 (sigmoid), trained with
// binary cross-entropy. Parameters live in one flat buffer laid out as
// [W1 (H x F, row-major) | b1 (H) | W2 (H) | b2 (1)]; gradients and
// Hessian-vector products use the same layout.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedrank/error.hpp"
#include "feedrank/scorer/dual.hpp"

namespace feedrank::scorer {

inline constexpr double kProbClamp = 1e-7;

struct ScorerShape {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 16;

    std::size_t w1_offset() const { return 0; }
    std::size_t b1_offset() const { return hidden_dim * input_dim; }
    std::size_t w2_offset() const { return b1_offset() + hidden_dim; }
    std::size_t b2_offset() const { return w2_offset() + hidden_dim; }
    std::size_t param_count() const { return b2_offset() + 1; }
    std::size_t bias_count() const { return hidden_dim + 1; }

    bool is_bias(std::size_t i) const {
        return (i >= b1_offset() && i < w2_offset()) || i == b2_offset();
    }

    friend bool operator==(const ScorerShape&, const ScorerShape&) = default;
};

/// Which tensor kinds an update may touch.
struct TrainableMask {
    bool weights = true;
    bool biases = true;

    static TrainableMask all() { return {true, true}; }
    static TrainableMask bias_only() { return {false, true}; }
    static TrainableMask none() { return {false, false}; }

    /// 1.0 for trainable coordinates, 0.0 for frozen ones.
    std::vector<double> coordinates(const ScorerShape& shape) const {
        std::vector<double> m(shape.param_count());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = (shape.is_bias(i) ? biases : weights) ? 1.0 : 0.0;
        return m;
    }

    double trainable_fraction(const ScorerShape& shape) const {
        const double total = static_cast<double>(shape.param_count());
        const double b = static_cast<double>(shape.bias_count());
        return ((biases ? b : 0.0) + (weights ? total - b : 0.0)) / total;
    }

    friend bool operator==(const TrainableMask&, const TrainableMask&) = default;
};

using Gradient = std::vector<double>;

class ScorerParams {
public:
    ScorerParams() = default;
    ScorerParams(ScorerShape shape, std::vector<double> theta, TrainableMask mask = {})
        : shape_(shape), theta_(std::move(theta)), mask_(mask) {
        if (theta_.size() != shape_.param_count())
            throw ShapeError("parameter buffer has " + std::to_string(theta_.size()) + " values, shape needs " +
                             std::to_string(shape_.param_count()));
        for (double x : theta_)
            if (!std::isfinite(x)) throw PreconditionError("non-finite scorer parameter");
    }

    static ScorerParams zeros(ScorerShape shape, TrainableMask mask = {}) {
        return {shape, std::vector<double>(shape.param_count(), 0.0), mask};
    }

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a seeded mt19937_64,
    /// biases zero.
    static ScorerParams init(ScorerShape shape, std::uint64_t seed, TrainableMask mask = {}) {
        if (shape.input_dim == 0 || shape.hidden_dim == 0) throw ShapeError("scorer dimensions must be positive");
        std::mt19937_64 rng(seed);
        auto uniform = [&](double bound) {
            // 53-bit mantissa draw; portable across standard libraries.
            const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            return (2.0 * u - 1.0) * bound;
        };
        ScorerParams p = zeros(shape, mask);
        const double b1 = 1.0 / std::sqrt(static_cast<double>(shape.input_dim));
        const double b2 = 1.0 / std::sqrt(static_cast<double>(shape.hidden_dim));
        for (std::size_t i = 0; i < shape.hidden_dim * shape.input_dim; ++i) p.theta_[shape.w1_offset() + i] = uniform(b1);
        for (std::size_t j = 0; j < shape.hidden_dim; ++j) p.theta_[shape.w2_offset() + j] = uniform(b2);
        return p;
    }

    const ScorerShape& shape() const noexcept { return shape_; }
    const TrainableMask& mask() const noexcept { return mask_; }
    void set_mask(TrainableMask m) { mask_ = m; }

    std::span<const double> theta() const noexcept { return theta_; }
    std::span<double> theta() noexcept { return theta_; }

    std::span<const double> w1() const { return theta().subspan(shape_.w1_offset(), shape_.hidden_dim * shape_.input_dim); }
    std::span<const double> b1() const { return theta().subspan(shape_.b1_offset(), shape_.hidden_dim); }
    std::span<const double> w2() const { return theta().subspan(shape_.w2_offset(), shape_.hidden_dim); }
    double b2() const { return theta_[shape_.b2_offset()]; }
    std::span<double> w1() { return theta().subspan(shape_.w1_offset(), shape_.hidden_dim * shape_.input_dim); }
    std::span<double> b1() { return theta().subspan(shape_.b1_offset(), shape_.hidden_dim); }
    std::span<double> w2() { return theta().subspan(shape_.w2_offset(), shape_.hidden_dim); }
    double& b2() { return theta_[shape_.b2_offset()]; }

    double trainable_fraction() const { return mask_.trainable_fraction(shape_); }

    nlohmann::json to_json() const {
        auto tensor = [&](const char* name, std::vector<std::size_t> dims, std::span<const double> values) {
            return nlohmann::json{{"name", name}, {"shape", dims}, {"values", std::vector<double>(values.begin(), values.end())}};
        };
        return {{"format", "feedrank-scorer"},
                {"version", kFormatVersion},
                {"input_dim", shape_.input_dim},
                {"hidden_dim", shape_.hidden_dim},
                {"mask", {{"weights", mask_.weights}, {"biases", mask_.biases}}},
                {"tensors",
                 {tensor("w1", {shape_.hidden_dim, shape_.input_dim}, w1()), tensor("b1", {shape_.hidden_dim}, b1()),
                  tensor("w2", {1, shape_.hidden_dim}, w2()), tensor("b2", {1}, theta().subspan(shape_.b2_offset(), 1))}}};
    }

    static ScorerParams from_json(const nlohmann::json& j) {
        if (j.value("format", "") != "feedrank-scorer") throw ParseError("not a feedrank scorer file");
        if (j.value("version", 0) != kFormatVersion) throw ParseError("unsupported scorer version");
        ScorerShape shape{j.at("input_dim").get<std::size_t>(), j.at("hidden_dim").get<std::size_t>()};
        TrainableMask mask{j.at("mask").at("weights").get<bool>(), j.at("mask").at("biases").get<bool>()};
        std::vector<double> theta;
        theta.reserve(shape.param_count());
        const char* order[] = {"w1", "b1", "w2", "b2"};
        const auto& tensors = j.at("tensors");
        if (tensors.size() != 4) throw ParseError("scorer file needs 4 tensors");
        for (std::size_t t = 0; t < 4; ++t) {
            if (tensors[t].at("name").get<std::string>() != order[t]) throw ParseError("unexpected tensor order in scorer file");
            auto values = tensors[t].at("values").get<std::vector<double>>();
            theta.insert(theta.end(), values.begin(), values.end());
        }
        return {shape, std::move(theta), mask};
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write '" + path + "'");
        out << to_json().dump() << '\n';
    }

    static ScorerParams load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open '" + path + "'");
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid scorer file: ") + e.what());
        }
    }

    friend bool operator==(const ScorerParams&, const ScorerParams&) = default;

private:
    static constexpr int kFormatVersion = 1;

    ScorerShape shape_;
    std::vector<double> theta_;
    TrainableMask mask_;
};

/// One labelled feature vector (label 1 = relevant).
struct Example {
    std::vector<double> x;
    double label = 0.0;
};

using Batch = std::vector<Example>;

namespace detail {

inline void check_input(const ScorerShape& shape, std::span<const double> x) {
    if (x.size() != shape.input_dim)
        throw ShapeError("feature vector has " + std::to_string(x.size()) + " values, scorer expects " +
                         std::to_string(shape.input_dim));
}

/// Output logit; `hidden` receives tanh activations.
template <class T>
T logit(const ScorerShape& s, std::span<const T> theta, std::span<const double> x, std::vector<T>& hidden) {
    hidden.resize(s.hidden_dim);
    T z = theta[s.b2_offset()];
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
        T a = theta[s.b1_offset() + j];
        const std::size_t row = s.w1_offset() + j * s.input_dim;
        for (std::size_t i = 0; i < s.input_dim; ++i) a += theta[row + i] * T(x[i]);
        using std::tanh;
        hidden[j] = tanh(a);
        z += theta[s.w2_offset() + j] * hidden[j];
    }
    return z;
}

/// Mean BCE over `batch` and its exact gradient w.r.t. theta (accumulated
/// into `grad`, which must be zeroed and sized by the caller).
template <class T>
T loss_and_grad(const ScorerShape& s, std::span<const T> theta, const Batch& batch, std::span<T> grad) {
    if (batch.empty()) throw PreconditionError("empty batch");
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    std::vector<T> hidden;
    T total = T(0.0);
    for (const auto& ex : batch) {
        check_input(s, ex.x);
        const T z = logit<T>(s, theta, ex.x, hidden);
        const T p = sigmoid(z);
        const double pv = value_of(p);
        T g_z = T(0.0);
        T lp, lq;
        using std::log;
        if (pv < kProbClamp) {
            lp = T(std::log(kProbClamp));
            lq = T(std::log1p(-kProbClamp));
        } else if (pv > 1.0 - kProbClamp) {
            lp = T(std::log1p(-kProbClamp));
            lq = T(std::log(kProbClamp));
        } else {
            lp = log(p);
            lq = log(T(1.0) - p);
            g_z = (p - T(ex.label)) * T(inv_n);
        }
        total += -(T(ex.label) * lp + T(1.0 - ex.label) * lq);
        grad[s.b2_offset()] += g_z;
        for (std::size_t j = 0; j < s.hidden_dim; ++j) {
            const T& h = hidden[j];
            grad[s.w2_offset() + j] += g_z * h;
            const T g_a = g_z * theta[s.w2_offset() + j] * (T(1.0) - h * h);
            grad[s.b1_offset() + j] += g_a;
            const std::size_t row = s.w1_offset() + j * s.input_dim;
            for (std::size_t i = 0; i < s.input_dim; ++i) grad[row + i] += g_a * T(ex.x[i]);
        }
    }
    return total * T(inv_n);
}

}  // namespace detail

/// sigmoid(W2 tanh(W1 x + b1) + b2).
inline double forward(const ScorerParams& params, std::span<const double> x) {
    detail::check_input(params.shape(), x);
    std::vector<double> hidden;
    return sigmoid(detail::logit<double>(params.shape(), params.theta(), x, hidden));
}

/// Mean over the batch of -[y ln p + (1-y) ln(1-p)], p clamped to [1e-7, 1-1e-7].
inline double bce_loss(const ScorerParams& params, const Batch& batch) {
    Gradient scratch(params.shape().param_count(), 0.0);
    return detail::loss_and_grad<double>(params.shape(), params.theta(), batch, std::span<double>(scratch));
}

/// Exact gradient of bce_loss for every coordinate (masking is applied by
/// the update rules, not here). Where the clamp is active the gradient is 0.
inline Gradient grad(const ScorerShape& shape, std::span<const double> theta, const Batch& batch) {
    Gradient g(shape.param_count(), 0.0);
    detail::loss_and_grad<double>(shape, theta, batch, std::span<double>(g));
    return g;
}

inline Gradient grad(const ScorerParams& params, const Batch& batch) { return grad(params.shape(), params.theta(), batch); }

/// Hessian of bce_loss at theta times v, via dual numbers over the gradient code.
inline std::vector<double> hessian_vector(const ScorerShape& shape, std::span<const double> theta, const Batch& batch,
                                          std::span<const double> v) {
    if (theta.size() != shape.param_count() || v.size() != shape.param_count())
        throw ShapeError("hessian_vector: parameter/direction size mismatch");
    std::vector<Dual> th(theta.size());
    for (std::size_t i = 0; i < th.size(); ++i) th[i] = Dual(theta[i], v[i]);
    std::vector<Dual> g(theta.size());
    detail::loss_and_grad<Dual>(shape, th, batch, std::span<Dual>(g));
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i].d;
    return out;
}

}  // namespace feedrank::scorer
