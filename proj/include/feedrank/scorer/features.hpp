#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "feedrank/corpus_io.hpp"
#include "feedrank/embedder.hpp"
#include "feedrank/error.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank::scorer {

/// Feature width for embeddings of dimension `dim`.
constexpr std::size_t feature_dim(std::size_t dim) { return 3 * dim + 2; }

/// [q ; d ; q*d ; cos(q,d) ; bm25_norm]
inline std::vector<double> featurize(std::span<const double> q, std::span<const double> d, double bm25_norm) {
    if (q.size() != d.size()) throw ShapeError("query and document vectors differ in dimension");
    const std::size_t n = q.size();
    std::vector<double> x(feature_dim(n));
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = q[i];
        x[n + i] = d[i];
        x[2 * n + i] = q[i] * d[i];
    }
    x[3 * n] = cosine(q, d);
    x[3 * n + 1] = bm25_norm;
    return x;
}

/// Builds feature vectors for one query. The lexical feature is the document's
/// score in `bm25_reference` (the second-stage retrieval), min-max scaled over
/// that ranking; documents missing from it, and every document when all
/// scores are equal, get 0.
class FeatureBuilder {
public:
    FeatureBuilder(const EmbeddingStore& store, const Query& query, const Ranking& bm25_reference)
        : FeatureBuilder(store, store.get_or_zero(query.id), bm25_reference) {}

    FeatureBuilder(const EmbeddingStore& store, Vector query_vec, const Ranking& bm25_reference)
        : store_(&store), query_vec_(std::move(query_vec)) {
        if (query_vec_.size() != store.dim()) throw ShapeError("query vector does not match the embedding dimension");
        for (const auto& item : bm25_reference) bm25_.emplace(item.doc_id, item.score);
        if (!bm25_reference.empty()) {
            hi_ = bm25_reference[0].score;
            lo_ = bm25_reference[bm25_reference.size() - 1].score;
        }
    }

    std::size_t dim() const { return feature_dim(store_->dim()); }

    double bm25_feature(const std::string& doc_id) const {
        auto it = bm25_.find(doc_id);
        if (it == bm25_.end() || hi_ <= lo_) return 0.0;
        return std::clamp((it->second - lo_) / (hi_ - lo_), 0.0, 1.0);
    }

    std::vector<double> operator()(const std::string& doc_id) const {
        if (const Vector* v = store_->find(doc_id)) return featurize(query_vec_, *v, bm25_feature(doc_id));
        return featurize(query_vec_, store_->get_or_zero(doc_id), bm25_feature(doc_id));
    }

private:
    const EmbeddingStore* store_;
    Vector query_vec_;
    std::unordered_map<std::string, double> bm25_;
    double lo_ = 0.0;
    double hi_ = 0.0;
};

}  // namespace feedrank::scorer
