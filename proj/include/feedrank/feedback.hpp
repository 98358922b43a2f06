#pragma once

// Simulated explicit feedback and residual-collection bookkeeping.

#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedrank/corpus_io.hpp"
#include "feedrank/error.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank {

/// R+ and R- for one query, each in source-ranking order.
///
/// Simulated sets have |relevant| == |nonrelevant| == k. Sets built from live
/// sessions may be unbalanced; `k` is then the number of relevant marks.
struct FeedbackSet {
    std::string query_id;
    std::vector<std::string> relevant;
    std::vector<std::string> nonrelevant;
    std::size_t k = 0;

    std::unordered_set<std::string> all_ids() const {
        std::unordered_set<std::string> ids(relevant.begin(), relevant.end());
        ids.insert(nonrelevant.begin(), nonrelevant.end());
        return ids;
    }

    std::size_t size() const { return relevant.size() + nonrelevant.size(); }
    bool empty() const { return relevant.empty() && nonrelevant.empty(); }

    friend bool operator==(const FeedbackSet&, const FeedbackSet&) = default;
};

inline void to_json(nlohmann::json& j, const FeedbackSet& f) {
    j = {{"query_id", f.query_id}, {"k", f.k}, {"relevant", f.relevant}, {"nonrelevant", f.nonrelevant}};
}

inline void from_json(const nlohmann::json& j, FeedbackSet& f) {
    f.query_id = j.at("query_id").get<std::string>();
    f.relevant = j.at("relevant").get<std::vector<std::string>>();
    f.nonrelevant = j.at("nonrelevant").get<std::vector<std::string>>();
    f.k = j.value("k", f.relevant.size());
    std::unordered_set<std::string> rel(f.relevant.begin(), f.relevant.end());
    for (const auto& d : f.nonrelevant)
        if (rel.contains(d)) throw IntegrityError("document '" + d + "' is both relevant and non-relevant feedback");
}

struct FeedbackOptions {
    /// When set, judged documents for which this returns false (not in the
    /// corpus) are skipped with a warning.
    std::function<bool(std::string_view)> in_corpus;
};

/// Walks `ranking` top-down and takes the first k feedback-eligible relevant
/// and the first k eligible non-relevant judged documents.
inline FeedbackSet select_feedback(const Ranking& ranking, const JudgmentSet& qrels, std::size_t k,
                                   const GradePolicy& policy = {}, const FeedbackOptions& opts = {}) {
    if (k == 0) throw PreconditionError("k must be positive");
    FeedbackSet fb;
    fb.query_id = ranking.query_id();
    fb.k = k;
    const auto& judged = qrels.for_query(ranking.query_id());
    for (const auto& item : ranking) {
        if (fb.relevant.size() == k && fb.nonrelevant.size() == k) break;
        auto g = judged.find(item.doc_id);
        if (g == judged.end()) continue;
        if (opts.in_corpus && !opts.in_corpus(item.doc_id)) {
            log::warn("query '" + fb.query_id + "': judged document '" + item.doc_id +
                      "' is missing from the corpus; skipped for feedback");
            continue;
        }
        if (policy.feedback_relevant(g->second)) {
            if (fb.relevant.size() < k) fb.relevant.push_back(item.doc_id);
        } else if (policy.feedback_nonrelevant(g->second)) {
            if (fb.nonrelevant.size() < k) fb.nonrelevant.push_back(item.doc_id);
        }
    }
    if (fb.relevant.size() < k || fb.nonrelevant.size() < k)
        throw InfeasibleQueryError("query '" + fb.query_id + "': found " + std::to_string(fb.relevant.size()) +
                                   " relevant and " + std::to_string(fb.nonrelevant.size()) +
                                   " non-relevant feedback documents, need " + std::to_string(k) + " of each");
    return fb;
}

/// Drops every document whose text exactly repeats a higher-ranked one.
/// Applied to the feedback source ranking only.
inline Ranking drop_duplicate_texts(const Ranking& ranking,
                                    const std::unordered_map<std::string, std::string>& text_by_id) {
    std::unordered_set<std::string_view> seen_texts;
    std::unordered_set<std::string> dropped;
    for (const auto& item : ranking) {
        auto t = text_by_id.find(item.doc_id);
        if (t == text_by_id.end()) continue;
        if (!seen_texts.insert(t->second).second) dropped.insert(item.doc_id);
    }
    return dropped.empty() ? ranking : ranking.without(dropped);
}

struct ResidualCollection {
    JudgmentSet qrels;
    Ranking ranking;
};

/// Removes the feedback documents from the query's judgments and from the
/// candidate ranking; everything else is untouched.
inline ResidualCollection residualize(const JudgmentSet& qrels, const Ranking& ranking, const FeedbackSet& feedback) {
    ResidualCollection out{qrels, {}};
    const auto ids = feedback.all_ids();
    for (const auto& d : ids) out.qrels.erase(feedback.query_id, d);
    out.ranking = ranking.query_id() == feedback.query_id || feedback.empty() ? ranking.without(ids) : ranking;
    return out;
}

}  // namespace feedrank
