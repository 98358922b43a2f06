#pragma once

// Feedback kNN re-ranking: a candidate scores its similarity to the query
// plus the summed similarity to every relevant feedback document. This is a
// prototype classifier with k+1 unaveraged points per query.

#include <span>
#include <string>
#include <vector>

#include "feedrank/corpus_io.hpp"
#include "feedrank/embedder.hpp"
#include "feedrank/feedback.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank::knn {

/// cos(doc, query) + sum over r in R+ of cos(doc, r).
inline double knn_score(std::span<const double> query_vec, std::span<const double> doc_vec,
                        const std::vector<Vector>& relevant_vecs) {
    double s = cosine(doc_vec, query_vec);
    for (const auto& r : relevant_vecs) s += cosine(doc_vec, r);
    return s;
}

struct KnnOptions {
    /// Drops the feedback term (query similarity only).
    bool query_only = false;
};

/// Re-sorts `candidates` by knn_score. Missing vectors count as zero vectors
/// (with a warning). Non-relevant feedback is not used. The output holds
/// exactly the input doc ids.
inline Ranking knn_rerank(const Ranking& candidates, std::span<const double> query_vec, const FeedbackSet& feedback,
                          const EmbeddingStore& store, const KnnOptions& opts = {}) {
    std::vector<Vector> rel;
    if (!opts.query_only) {
        rel.reserve(feedback.relevant.size());
        for (const auto& id : feedback.relevant) rel.push_back(store.get_or_zero(id));
    }
    std::vector<ScoredDoc> items;
    items.reserve(candidates.size());
    for (const auto& c : candidates) {
        const Vector* dv = store.find(c.doc_id);
        items.push_back({c.doc_id, dv ? knn_score(query_vec, *dv, rel) : knn_score(query_vec, store.get_or_zero(c.doc_id), rel)});
    }
    return Ranking::from_scores(candidates.query_id(), std::move(items));
}

inline Ranking knn_rerank(const Ranking& candidates, const Query& query, const FeedbackSet& feedback,
                          const EmbeddingStore& store, const KnnOptions& opts = {}) {
    return knn_rerank(candidates, store.get_or_zero(query.id), feedback, store, opts);
}

}  // namespace feedrank::knn
