#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. None of these call into the code they check.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "feedrank/scorer/mlp.hpp"

namespace feedrank::oracle {

/// sigmoid(sum_j w2_j tanh(sum_i W1_ji x_i + b1_j) + b2), written out from the
/// flat [W1 row-major | b1 | w2 | b2] layout.
inline double mlp_forward(std::size_t in, std::size_t hid, std::span<const double> theta, std::span<const double> x) {
    double z = theta[hid * in + hid + hid];
    for (std::size_t j = 0; j < hid; ++j) {
        double a = theta[hid * in + j];
        for (std::size_t i = 0; i < in; ++i) a += theta[j * in + i] * x[i];
        z += theta[hid * in + hid + j] * std::tanh(a);
    }
    return 1.0 / (1.0 + std::exp(-z));
}

/// Unclamped mean binary cross-entropy through mlp_forward.
inline double mlp_bce(std::size_t in, std::size_t hid, std::span<const double> theta, const scorer::Batch& batch) {
    double total = 0.0;
    for (const auto& ex : batch) {
        const double p = mlp_forward(in, hid, theta, ex.x);
        total += -(ex.label * std::log(p) + (1.0 - ex.label) * std::log(1.0 - p));
    }
    return total / static_cast<double>(batch.size());
}

/// Central differences of mlp_bce in every coordinate.
inline std::vector<double> fd_gradient(std::size_t in, std::size_t hid, std::span<const double> theta,
                                       const scorer::Batch& batch, double h = 1e-5) {
    std::vector<double> t(theta.begin(), theta.end()), g(theta.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double orig = t[i];
        t[i] = orig + h;
        const double up = mlp_bce(in, hid, t, batch);
        t[i] = orig - h;
        const double down = mlp_bce(in, hid, t, batch);
        t[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
    return worst;
}

struct GradientDraw {
    scorer::ScorerShape shape;
    std::vector<double> theta;
    scorer::Batch batch;
};

/// Seeded random parameters and a 5-example batch with moderate logits.
inline GradientDraw gradient_draw(std::uint64_t seed, std::size_t in = 6, std::size_t hid = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    GradientDraw d{{in, hid}, {}, {}};
    d.theta.resize(d.shape.param_count());
    for (auto& v : d.theta) v = u(rng);
    for (int e = 0; e < 5; ++e) {
        scorer::Example ex;
        ex.x.resize(in);
        for (auto& v : ex.x) v = u(rng);
        ex.label = static_cast<double>(e % 2);
        d.batch.push_back(std::move(ex));
    }
    return d;
}

/// One-parameter model with L(theta; T) = c_T theta^2.
/// One inner step: theta' = (1 - 2 a c1) theta.
/// Second order: theta - beta (1 - 2 a c1) 2 c2 theta'.
/// First order:  theta - beta 2 c2 theta'.
inline double maml_scalar_second_order(double theta, double c1, double c2, double alpha, double beta) {
    const double j = 1.0 - 2.0 * alpha * c1;
    return theta - beta * j * 2.0 * c2 * (j * theta);
}

inline double maml_scalar_first_order(double theta, double c1, double c2, double alpha, double beta) {
    const double j = 1.0 - 2.0 * alpha * c1;
    return theta - beta * 2.0 * c2 * (j * theta);
}

/// Two inner steps: theta'' = j^2 theta, second-order gradient j^2 2 c2 theta''.
inline double maml_scalar_second_order_two_steps(double theta, double c1, double c2, double alpha, double beta) {
    const double j = 1.0 - 2.0 * alpha * c1;
    return theta - beta * j * j * 2.0 * c2 * (j * j * theta);
}

/// nDCG@k from first principles: linear gain, log2(rank + 1) discount.
inline double ndcg(const std::vector<int>& grades_in_rank_order, std::vector<int> all_grades, std::size_t k) {
    double dcg = 0.0, idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, grades_in_rank_order.size()); ++i)
        dcg += grades_in_rank_order[i] / std::log2(static_cast<double>(i) + 2.0);
    std::sort(all_grades.rbegin(), all_grades.rend());
    for (std::size_t i = 0; i < std::min(k, all_grades.size()); ++i)
        idcg += all_grades[i] / std::log2(static_cast<double>(i) + 2.0);
    return idcg > 0.0 ? dcg / idcg : 0.0;
}

}  // namespace feedrank::oracle
