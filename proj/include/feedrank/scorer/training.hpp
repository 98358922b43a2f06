#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "feedrank/corpus_io.hpp"
#include "feedrank/error.hpp"
#include "feedrank/feedback.hpp"
#include "feedrank/ranking.hpp"
#include "feedrank/scorer/features.hpp"
#include "feedrank/scorer/mlp.hpp"

namespace feedrank::scorer {

/// One query's feedback documents as labelled examples.
struct TrainTask {
    std::string query_id;
    Batch examples;

    /// Both labels must be present.
    void validate() const {
        bool pos = false, neg = false;
        for (const auto& e : examples) (e.label > 0.5 ? pos : neg) = true;
        if (!pos || !neg) throw PreconditionError("task '" + query_id + "' needs relevant and non-relevant examples");
    }
};

/// R+ as label 1, R- as label 0, in that order.
inline TrainTask make_task(const FeedbackSet& feedback, const FeatureBuilder& features) {
    TrainTask t{feedback.query_id, {}};
    for (const auto& d : feedback.relevant) t.examples.push_back({features(d), 1.0});
    for (const auto& d : feedback.nonrelevant) t.examples.push_back({features(d), 0.0});
    return t;
}

/// theta <- theta - lr * grad on trainable coordinates only; frozen ones are
/// never written.
inline void masked_step(ScorerParams& params, const Gradient& g, double lr, const TrainableMask& mask) {
    auto theta = params.theta();
    const auto& shape = params.shape();
    for (std::size_t i = 0; i < theta.size(); ++i)
        if (shape.is_bias(i) ? mask.biases : mask.weights) theta[i] -= lr * g[i];
}

/// Full-batch gradient descent on the task for `steps` steps.
inline ScorerParams query_finetune(const ScorerParams& params, const TrainTask& task, double lr, std::size_t steps,
                                   const TrainableMask& mask) {
    ScorerParams out = params;
    if (steps == 0 || (!mask.weights && !mask.biases)) return out;
    task.validate();
    for (std::size_t s = 0; s < steps; ++s) masked_step(out, grad(out, task.examples), lr, mask);
    return out;
}

struct SupervisedOptions {
    double lr = 0.1;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    /// 0: one full-batch step per epoch.
    std::size_t batch_size = 32;
};

/// Plain supervised training on the pooled examples of all tasks: each epoch
/// shuffles the pool (seeded) and takes one step per minibatch.
inline ScorerParams train_supervised(const ScorerParams& params, const std::vector<TrainTask>& tasks,
                                     const SupervisedOptions& opts, const TrainableMask& mask) {
    Batch pool;
    for (const auto& t : tasks) pool.insert(pool.end(), t.examples.begin(), t.examples.end());
    if (pool.empty()) throw PreconditionError("supervised training needs at least one example");
    ScorerParams out = params;
    const std::size_t bs = opts.batch_size == 0 ? pool.size() : opts.batch_size;
    std::vector<std::size_t> order(pool.size());
    std::mt19937_64 rng(opts.seed);
    Batch batch;
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            batch.clear();
            for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i) batch.push_back(pool[order[i]]);
            masked_step(out, grad(out, batch), opts.lr, mask);
        }
    }
    return out;
}

/// Re-sorts candidates by scorer probability; exact permutation of the input.
inline Ranking ce_rerank(const ScorerParams& params, const Ranking& candidates, const FeatureBuilder& features) {
    std::vector<ScoredDoc> items;
    items.reserve(candidates.size());
    for (const auto& c : candidates) items.push_back({c.doc_id, forward(params, features(c.doc_id))});
    return Ranking::from_scores(candidates.query_id(), std::move(items));
}

}  // namespace feedrank::scorer
