#pragma once

// Reciprocal rank fusion, trec_eval-compatible ranking metrics, top-k
// overlap and per-stage wall-clock timing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedrank/corpus_io.hpp"
#include "feedrank/error.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank::eval {

inline constexpr double kDefaultRrfConstant = 60.0;

/// s(d) = sum over rankings of 1 / (c + rank(d)), 1-based ranks; a ranking
/// that lacks d contributes nothing. Only ranks are used, never scores.
inline Ranking rrf(const std::vector<Ranking>& rankings, double c = kDefaultRrfConstant) {
    if (rankings.empty()) throw PreconditionError("rrf needs at least one ranking");
    if (!(c > 0.0)) throw PreconditionError("rrf constant must be positive");
    std::unordered_map<std::string, double> fused;
    for (const auto& r : rankings)
        for (std::size_t i = 0; i < r.size(); ++i) fused[r[i].doc_id] += 1.0 / (c + static_cast<double>(i + 1));
    std::vector<ScoredDoc> items;
    items.reserve(fused.size());
    for (auto& [id, s] : fused) items.push_back({id, s});
    return Ranking::from_scores(rankings.front().query_id(), std::move(items));
}

enum class Gain { linear, exponential };

/// nDCG@k with trec_eval's ndcg_cut conventions: gain = grade (or 2^grade - 1),
/// discount log2(i + 1), ideal ordering from all judged grades truncated at k.
/// Zero when the query has no positive grade.
inline double ndcg_at_k(const Ranking& ranking, const JudgmentSet::DocGrades& grades, std::size_t k = 20,
                        Gain gain = Gain::linear) {
    if (k == 0) throw PreconditionError("k must be at least 1");
    auto g = [gain](int grade) {
        const double v = std::max(grade, 0);
        return gain == Gain::linear ? v : std::exp2(v) - 1.0;
    };
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
        auto it = grades.find(ranking[i].doc_id);
        if (it != grades.end()) dcg += g(it->second) / std::log2(static_cast<double>(i) + 2.0);
    }
    std::vector<int> ideal;
    for (const auto& [_, grade] : grades)
        if (grade > 0) ideal.push_back(grade);
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) idcg += g(ideal[i]) / std::log2(static_cast<double>(i) + 2.0);
    return idcg > 0.0 ? dcg / idcg : 0.0;
}

inline double ndcg_at_k(const Ranking& ranking, const JudgmentSet& qrels, std::size_t k = 20, Gain gain = Gain::linear) {
    return ndcg_at_k(ranking, qrels.for_query(ranking.query_id()), k, gain);
}

/// |relevant in top k| / |relevant|, relevance = grade >= threshold.
/// Zero (with a warning) when nothing is relevant.
inline double recall_at_k(const Ranking& ranking, const JudgmentSet::DocGrades& grades, std::size_t k,
                          int relevant_threshold = 1) {
    if (k == 0) throw PreconditionError("k must be at least 1");
    std::size_t relevant = 0;
    for (const auto& [_, grade] : grades)
        if (grade >= relevant_threshold) ++relevant;
    if (relevant == 0) {
        log::warn("recall for query '" + ranking.query_id() + "' undefined (no relevant documents); reporting 0");
        return 0.0;
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
        auto it = grades.find(ranking[i].doc_id);
        if (it != grades.end() && it->second >= relevant_threshold) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(relevant);
}

inline double recall_at_k(const Ranking& ranking, const JudgmentSet& qrels, std::size_t k, int relevant_threshold = 1) {
    return recall_at_k(ranking, qrels.for_query(ranking.query_id()), k, relevant_threshold);
}

/// |top-k(a) intersect top-k(b)|.
inline std::size_t overlap_at_k(const Ranking& a, const Ranking& b, std::size_t k = 20) {
    if (k == 0) throw PreconditionError("k must be at least 1");
    std::unordered_set<std::string_view> top;
    for (std::size_t i = 0; i < std::min(k, a.size()); ++i) top.insert(a[i].doc_id);
    std::size_t n = 0;
    for (std::size_t i = 0; i < std::min(k, b.size()); ++i) n += top.contains(b[i].doc_id);
    return n;
}

// --- Timing ---------------------------------------------------------------------

/// Canonical stage names of a retrieve / expand / fine-tune / re-rank cycle.
namespace stage {
inline constexpr const char* retrieval = "retrieval";
inline constexpr const char* expansion = "expansion";
inline constexpr const char* finetune = "finetune";
inline constexpr const char* rerank = "rerank";
}  // namespace stage

struct TimingStats {
    std::size_t count = 0;
    double total_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;

    double mean_ms() const { return count ? total_ms / static_cast<double>(count) : 0.0; }

    void add(double ms) {
        min_ms = count ? std::min(min_ms, ms) : ms;
        max_ms = count ? std::max(max_ms, ms) : ms;
        total_ms += ms;
        ++count;
    }

    void merge(const TimingStats& o) {
        if (!o.count) return;
        min_ms = count ? std::min(min_ms, o.min_ms) : o.min_ms;
        max_ms = count ? std::max(max_ms, o.max_ms) : o.max_ms;
        total_ms += o.total_ms;
        count += o.count;
    }
};

class StageTimings {
public:
    /// Starts with the four canonical stages present (count 0).
    StageTimings() {
        for (const char* s : {stage::retrieval, stage::expansion, stage::finetune, stage::rerank}) stats_[s];
    }

    void record(const std::string& stage_name, double ms) { stats_[stage_name].add(ms); }
    void merge(const StageTimings& o) {
        for (const auto& [k, v] : o.stats_) stats_[k].merge(v);
    }
    const std::map<std::string, TimingStats>& stats() const noexcept { return stats_; }
    const TimingStats& at(const std::string& stage_name) const { return stats_.at(stage_name); }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : stats_)
            j[k] = {{"count", v.count}, {"total_ms", v.total_ms}, {"mean_ms", v.mean_ms()}, {"min_ms", v.min_ms},
                    {"max_ms", v.max_ms}};
        return j;
    }

private:
    std::map<std::string, TimingStats> stats_;
};

/// Runs `op`, records its monotonic wall time under `stage_name`, returns
/// op's result (if any) and the elapsed milliseconds.
template <class F>
auto time_stage(StageTimings& timings, const std::string& stage_name, F&& op) {
    using Clock = std::chrono::steady_clock;
    const auto start = Clock::now();
    auto elapsed = [&] { return std::chrono::duration<double, std::milli>(Clock::now() - start).count(); };
    if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
        std::forward<F>(op)();
        const double ms = elapsed();
        timings.record(stage_name, ms);
        return ms;
    } else {
        auto result = std::forward<F>(op)();
        const double ms = elapsed();
        timings.record(stage_name, ms);
        return std::pair<decltype(result), double>{std::move(result), ms};
    }
}

// --- Report -------------------------------------------------------------------------

struct QueryMetrics {
    double ndcg_20 = 0.0;
    double recall_100 = 0.0;
    double recall_1000 = 0.0;

    friend bool operator==(const QueryMetrics&, const QueryMetrics&) = default;
};

/// Per-query metrics, their arithmetic means and stage timings.
struct MetricReport {
    std::map<std::string, QueryMetrics> per_query;
    StageTimings timing;

    void add(const std::string& query_id, const Ranking& ranking, const JudgmentSet::DocGrades& grades,
             int relevant_threshold = 1, Gain gain = Gain::linear) {
        per_query[query_id] = {ndcg_at_k(ranking, grades, 20, gain), recall_at_k(ranking, grades, 100, relevant_threshold),
                               recall_at_k(ranking, grades, 1000, relevant_threshold)};
    }

    QueryMetrics aggregate() const {
        QueryMetrics m;
        if (per_query.empty()) return m;
        for (const auto& [_, q] : per_query) {
            m.ndcg_20 += q.ndcg_20;
            m.recall_100 += q.recall_100;
            m.recall_1000 += q.recall_1000;
        }
        const double n = static_cast<double>(per_query.size());
        m.ndcg_20 /= n;
        m.recall_100 /= n;
        m.recall_1000 /= n;
        return m;
    }

    nlohmann::json to_json() const {
        nlohmann::json pq = nlohmann::json::object();
        for (const auto& [q, m] : per_query) pq[q] = metrics_json(m);
        return {{"per_query", pq}, {"aggregate", metrics_json(aggregate())}, {"timing", timing.to_json()}};
    }

    static nlohmann::json metrics_json(const QueryMetrics& m) {
        return {{"ndcg@20", m.ndcg_20}, {"recall@100", m.recall_100}, {"recall@1000", m.recall_1000}};
    }
};

}  // namespace feedrank::eval
