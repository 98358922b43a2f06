#pragma once

// Model-agnostic meta-learning over per-query tasks.
//
// Inner:  theta' = theta - alpha * M (.) grad L(theta; T1)   (repeated inner_steps times)
// Outer:  theta  <- theta - beta * M (.) d/dtheta L(theta'; T2)
//
// Second order differentiates through the inner updates:
//   d/dtheta = (I - alpha H1(theta_0) M) ... (I - alpha H1(theta_{n-1}) M) grad L(theta_n; T2)
// using Hessian-vector products. First order drops the Hessian terms.
// Second order is limited to two inner steps; longer inner loops fall back
// to first order with a warning.
//
// Works for any objective exposing `gradient(theta, task)` and
// `hessian_vector(theta, task, v)`.

#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "feedrank/error.hpp"
#include "feedrank/log.hpp"
#include "feedrank/scorer/mlp.hpp"
#include "feedrank/scorer/training.hpp"

namespace feedrank::scorer {

enum class MamlOrder { second_order, first_order };

inline MamlOrder parse_maml_order(std::string_view s) {
    if (s == "second_order" || s == "second") return MamlOrder::second_order;
    if (s == "first_order" || s == "first") return MamlOrder::first_order;
    throw PreconditionError("unknown MAML mode '" + std::string(s) + "'");
}

inline constexpr std::size_t kMaxSecondOrderInnerSteps = 2;

struct MamlOptions {
    double inner_lr = 0.1;
    double outer_lr = 0.1;
    std::size_t inner_steps = 1;
    std::size_t epochs = 1;
    MamlOrder order = MamlOrder::second_order;
    std::uint64_t seed = 0;
};

template <class O>
concept MetaObjective = requires(const O& o, std::span<const double> theta, const typename O::Task& t,
                                 std::span<const double> v) {
    { o.gradient(theta, t) } -> std::convertible_to<std::vector<double>>;
    { o.hessian_vector(theta, t, v) } -> std::convertible_to<std::vector<double>>;
};

/// Meta-gradient of L(theta'; T2) with respect to theta (unmasked).
template <MetaObjective O>
std::vector<double> maml_outer_gradient(const O& obj, std::span<const double> theta, std::span<const double> mask,
                                        const typename O::Task& adapt, const typename O::Task& evaluate,
                                        double inner_lr, std::size_t inner_steps, MamlOrder order) {
    if (mask.size() != theta.size()) throw ShapeError("mask and parameters differ in size");
    if (order == MamlOrder::second_order && inner_steps > kMaxSecondOrderInnerSteps) {
        log::warn("second-order MAML supports at most 2 inner steps; using first order");
        order = MamlOrder::first_order;
    }
    std::vector<std::vector<double>> path;  // theta_0 .. theta_{n-1}
    std::vector<double> cur(theta.begin(), theta.end());
    for (std::size_t s = 0; s < inner_steps; ++s) {
        if (order == MamlOrder::second_order) path.push_back(cur);
        const auto g = obj.gradient(cur, adapt);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] -= inner_lr * mask[i] * g[i];
    }
    std::vector<double> g = obj.gradient(cur, evaluate);
    if (order == MamlOrder::first_order) return g;
    // Apply the transposed Jacobians last step first. H is symmetric, so
    // (I - a M H)^T g = g - a H (M g).
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
        std::vector<double> mg(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) mg[i] = mask[i] * g[i];
        const auto hv = obj.hessian_vector(*it, adapt, mg);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= inner_lr * hv[i];
    }
    return g;
}

/// One meta-update on the task pair (adapt on T1, evaluate on T2).
template <MetaObjective O>
std::vector<double> maml_step(const O& obj, std::span<const double> theta, std::span<const double> mask,
                              const typename O::Task& adapt, const typename O::Task& evaluate, const MamlOptions& opts) {
    const auto g = maml_outer_gradient(obj, theta, mask, adapt, evaluate, opts.inner_lr, opts.inner_steps, opts.order);
    std::vector<double> out(theta.begin(), theta.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask[i] != 0.0) out[i] -= opts.outer_lr * mask[i] * g[i];
    return out;
}

/// Ordered pair of distinct task indices drawn from raw mt19937_64 output.
inline std::pair<std::size_t, std::size_t> sample_task_pair(std::mt19937_64& rng, std::size_t n) {
    const std::size_t a = static_cast<std::size_t>(rng() % n);
    const std::size_t b = (a + 1 + static_cast<std::size_t>(rng() % (n - 1))) % n;
    return {a, b};
}

/// epochs * |tasks| meta-updates, one sampled (T1, T2) pair each.
template <MetaObjective O>
std::vector<double> maml_train(const O& obj, std::span<const double> theta, std::span<const double> mask,
                               const std::vector<typename O::Task>& tasks, const MamlOptions& opts) {
    if (tasks.size() < 2) throw PreconditionError("MAML needs at least 2 tasks");
    std::mt19937_64 rng(opts.seed);
    std::vector<double> cur(theta.begin(), theta.end());
    const std::size_t steps = opts.epochs * tasks.size();
    for (std::size_t s = 0; s < steps; ++s) {
        const auto [a, b] = sample_task_pair(rng, tasks.size());
        cur = maml_step(obj, cur, mask, tasks[a], tasks[b], opts);
    }
    return cur;
}

/// Adapts the scorer's BCE to the MetaObjective interface.
struct ScorerObjective {
    using Task = TrainTask;
    ScorerShape shape;

    std::vector<double> gradient(std::span<const double> theta, const Task& t) const {
        return grad(shape, theta, t.examples);
    }
    std::vector<double> hessian_vector(std::span<const double> theta, const Task& t, std::span<const double> v) const {
        return scorer::hessian_vector(shape, theta, t.examples, v);
    }
};

inline ScorerParams maml_train(const ScorerParams& params, const std::vector<TrainTask>& tasks, const MamlOptions& opts,
                               const TrainableMask& mask) {
    for (const auto& t : tasks) t.validate();
    const ScorerObjective obj{params.shape()};
    const auto m = mask.coordinates(params.shape());
    auto theta = maml_train(obj, params.theta(), m, tasks, opts);
    return ScorerParams(params.shape(), std::move(theta), params.mask());
}

}  // namespace feedrank::scorer
