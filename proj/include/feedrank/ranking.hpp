#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "feedrank/error.hpp"

namespace feedrank {

struct ScoredDoc {
    std::string doc_id;
    double score = 0.0;

    friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// Score-descending ordering with ascending doc id as the tie break.
inline bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
}

/// An ordered result list for one query.
///
/// Scores are non-increasing, ties are ordered by ascending doc id, and a doc
/// id appears at most once. Build through `from_scores` (which sorts) or
/// `from_ordered` (which validates); the filtering helpers keep the invariant.
class Ranking {
public:
    Ranking() = default;

    static Ranking from_scores(std::string query_id, std::vector<ScoredDoc> items) {
        std::sort(items.begin(), items.end(), ranks_before);
        Ranking r(std::move(query_id), std::move(items));
        r.check_unique();
        return r;
    }

    static Ranking from_ordered(std::string query_id, std::vector<ScoredDoc> items) {
        for (std::size_t i = 1; i < items.size(); ++i) {
            if (!ranks_before(items[i - 1], items[i]))
                throw IntegrityError("ranking for query '" + query_id + "' is not in score/tie order at position " +
                                     std::to_string(i + 1));
        }
        Ranking r(std::move(query_id), std::move(items));
        r.check_unique();
        return r;
    }

    const std::string& query_id() const noexcept { return query_id_; }
    const std::vector<ScoredDoc>& items() const noexcept { return items_; }
    std::size_t size() const noexcept { return items_.size(); }
    bool empty() const noexcept { return items_.empty(); }
    const ScoredDoc& operator[](std::size_t i) const { return items_[i]; }
    auto begin() const noexcept { return items_.begin(); }
    auto end() const noexcept { return items_.end(); }

    /// First `n` items (all when shorter).
    Ranking top(std::size_t n) const {
        Ranking r = *this;
        if (r.items_.size() > n) r.items_.resize(n);
        return r;
    }

    /// Items whose id is not in `excluded`, relative order kept.
    template <class Set>
    Ranking without(const Set& excluded) const {
        Ranking r;
        r.query_id_ = query_id_;
        for (const auto& it : items_)
            if (!excluded.contains(it.doc_id)) r.items_.push_back(it);
        return r;
    }

    std::vector<std::string> doc_ids() const {
        std::vector<std::string> ids;
        ids.reserve(items_.size());
        for (const auto& it : items_) ids.push_back(it.doc_id);
        return ids;
    }

    /// 1-based rank of `doc_id`, 0 when absent.
    std::size_t rank_of(std::string_view doc_id) const {
        for (std::size_t i = 0; i < items_.size(); ++i)
            if (items_[i].doc_id == doc_id) return i + 1;
        return 0;
    }

    bool contains(std::string_view doc_id) const { return rank_of(doc_id) != 0; }

    friend bool operator==(const Ranking&, const Ranking&) = default;

private:
    Ranking(std::string query_id, std::vector<ScoredDoc> items)
        : query_id_(std::move(query_id)), items_(std::move(items)) {}

    void check_unique() const {
        std::unordered_set<std::string_view> seen;
        seen.reserve(items_.size());
        for (const auto& it : items_)
            if (!seen.insert(it.doc_id).second)
                throw IntegrityError("duplicate doc id '" + it.doc_id + "' in ranking for query '" + query_id_ + "'");
    }

    std::string query_id_;
    std::vector<ScoredDoc> items_;
};

/// Shortest decimal form that parses back to the same double; locale-independent.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

// --- TREC run files: `query_id Q0 doc_id rank score tag` ---------------------

inline void write_run(std::ostream& os, const Ranking& r, std::string_view tag) {
    for (std::size_t i = 0; i < r.size(); ++i)
        os << r.query_id() << " Q0 " << r[i].doc_id << ' ' << (i + 1) << ' ' << format_double(r[i].score) << ' '
           << tag << '\n';
}

inline void write_run(std::ostream& os, const std::vector<Ranking>& runs, std::string_view tag) {
    for (const auto& r : runs) write_run(os, r, tag);
}

/// Parses a run file into rankings keyed by query id. Lines are ordered by
/// their rank column; scores are then re-validated against the tie rule.
namespace detail {
struct RunRow {
    long rank;
    ScoredDoc doc;
};
}  // namespace detail

inline std::map<std::string, Ranking> read_run(std::istream& is) {
    using Row = detail::RunRow;
    std::map<std::string, std::vector<Row>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string qid, q0, doc, rank_s, score_s, tag;
        if (!(ls >> qid)) continue;
        if (!(ls >> q0 >> doc >> rank_s >> score_s >> tag)) throw ParseError("run line needs 6 columns", lineno);
        Row row;
        auto rr = std::from_chars(rank_s.data(), rank_s.data() + rank_s.size(), row.rank);
        if (rr.ec != std::errc() || rr.ptr != rank_s.data() + rank_s.size())
            throw ParseError("bad rank '" + rank_s + "'", lineno);
        if (!parse_double(score_s, row.doc.score) || !std::isfinite(row.doc.score))
            throw ParseError("bad score '" + score_s + "'", lineno);
        row.doc.doc_id = doc;
        rows[qid].push_back(std::move(row));
    }
    std::map<std::string, Ranking> out;
    for (auto& [qid, list] : rows) {
        std::stable_sort(list.begin(), list.end(), [](const Row& a, const Row& b) { return a.rank < b.rank; });
        std::vector<ScoredDoc> items;
        items.reserve(list.size());
        for (auto& row : list) items.push_back(std::move(row.doc));
        out.emplace(qid, Ranking::from_scores(qid, std::move(items)));
    }
    return out;
}

}  // namespace feedrank
