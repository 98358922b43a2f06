#pragma once

// Corpus, query and judgment ingestion; the judged-depth query filter;
// seeded 3:1:1 splits; BM25 negative augmentation for sparsely judged sets.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedrank/error.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"
#include "feedrank/unicode.hpp"

namespace feedrank {

struct Document {
    std::string id;
    std::string text;

    friend bool operator==(const Document&, const Document&) = default;
};

struct Query {
    std::string id;
    std::string text;

    friend bool operator==(const Query&, const Query&) = default;
};

/// Graded judgments keyed by (query id, doc id). Grades are >= 0.
class JudgmentSet {
public:
    using DocGrades = std::map<std::string, int>;

    /// Inserts a judgment. Re-inserting the same grade is a no-op; a
    /// conflicting grade for an existing pair is an IntegrityError.
    void insert(const std::string& query_id, const std::string& doc_id, int grade) {
        if (grade < 0) throw PreconditionError("negative grade for (" + query_id + ", " + doc_id + ")");
        auto [it, inserted] = by_query_[query_id].emplace(doc_id, grade);
        if (!inserted && it->second != grade)
            throw IntegrityError("conflicting grades for (" + query_id + ", " + doc_id + "): " +
                                 std::to_string(it->second) + " vs " + std::to_string(grade));
    }

    std::optional<int> grade(const std::string& query_id, const std::string& doc_id) const {
        auto q = by_query_.find(query_id);
        if (q == by_query_.end()) return std::nullopt;
        auto d = q->second.find(doc_id);
        if (d == q->second.end()) return std::nullopt;
        return d->second;
    }

    bool is_judged(const std::string& query_id, const std::string& doc_id) const {
        return grade(query_id, doc_id).has_value();
    }

    /// All judgments of one query (empty map when none).
    const DocGrades& for_query(const std::string& query_id) const {
        static const DocGrades empty;
        auto q = by_query_.find(query_id);
        return q == by_query_.end() ? empty : q->second;
    }

    void erase(const std::string& query_id, const std::string& doc_id) {
        auto q = by_query_.find(query_id);
        if (q == by_query_.end()) return;
        q->second.erase(doc_id);
        if (q->second.empty()) by_query_.erase(q);
    }

    std::vector<std::string> query_ids() const {
        std::vector<std::string> ids;
        for (const auto& [q, _] : by_query_) ids.push_back(q);
        return ids;
    }

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [_, docs] : by_query_) n += docs.size();
        return n;
    }

    bool empty() const { return by_query_.empty(); }

    const std::map<std::string, DocGrades>& entries() const noexcept { return by_query_; }

    friend bool operator==(const JudgmentSet&, const JudgmentSet&) = default;

private:
    std::map<std::string, DocGrades> by_query_;
};

/// Dataset-specific grade semantics.
///
/// `relevant_threshold` decides relevance for filtering and recall. Feedback
/// selection only uses documents graded >= `feedback_relevant_min` as
/// relevant and <= `feedback_nonrelevant_max` as non-relevant; grades in
/// between (e.g. "partially relevant") are skipped for feedback but stay in
/// the evaluation qrels.
struct GradePolicy {
    int relevant_threshold = 1;
    int feedback_relevant_min = 1;
    int feedback_nonrelevant_max = 0;

    bool is_relevant(int grade) const { return grade >= relevant_threshold; }
    bool feedback_relevant(int grade) const { return grade >= feedback_relevant_min; }
    bool feedback_nonrelevant(int grade) const { return grade <= feedback_nonrelevant_max; }

    static GradePolicy standard() { return {}; }
    /// 0/1/2 schemes where 1 means partially relevant.
    static GradePolicy partial_excluded() { return {1, 2, 0}; }
    /// Fine-grained scales where feedback needs a grade of at least 3.
    static GradePolicy high_relevance_feedback() { return {1, 3, 0}; }

    friend bool operator==(const GradePolicy&, const GradePolicy&) = default;
};

inline void to_json(nlohmann::json& j, const GradePolicy& p) {
    j = {{"relevant_threshold", p.relevant_threshold},
         {"feedback_relevant_min", p.feedback_relevant_min},
         {"feedback_nonrelevant_max", p.feedback_nonrelevant_max}};
}

inline void from_json(const nlohmann::json& j, GradePolicy& p) {
    p.relevant_threshold = j.value("relevant_threshold", 1);
    p.feedback_relevant_min = j.value("feedback_relevant_min", p.relevant_threshold);
    p.feedback_nonrelevant_max = j.value("feedback_nonrelevant_max", 0);
    if (p.feedback_nonrelevant_max >= p.feedback_relevant_min)
        throw PreconditionError("feedback_nonrelevant_max must be below feedback_relevant_min");
}

enum class CorpusFormat { jsonl, trec_text };

inline CorpusFormat parse_corpus_format(std::string_view s) {
    if (s == "jsonl") return CorpusFormat::jsonl;
    if (s == "trec-text" || s == "trec_text" || s == "trec") return CorpusFormat::trec_text;
    throw PreconditionError("unknown corpus format '" + std::string(s) + "'");
}

namespace detail {

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return in;
}

inline std::string join_title_text(const std::string& title, const std::string& text) {
    if (title.empty()) return text;
    if (text.empty()) return title;
    return title + " " + text;
}

inline std::string string_field(const nlohmann::json& rec, std::string_view path, std::size_t lineno) {
    const nlohmann::json* node = &rec;
    std::size_t start = 0;
    while (start <= path.size()) {
        const auto dot = path.find('.', start);
        const std::string key(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (!node->is_object() || !node->contains(key)) return {};
        node = &(*node)[key];
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    if (node->is_null()) return {};
    if (!node->is_string()) throw ParseError("field '" + std::string(path) + "' is not a string", lineno);
    return node->get<std::string>();
}

inline void check_unique_ids(std::unordered_set<std::string>& seen, const std::string& id, std::string_view what) {
    if (!seen.insert(id).second) throw IntegrityError("duplicate " + std::string(what) + " id '" + id + "'");
}

}  // namespace detail

// --- Corpus -----------------------------------------------------------------

/// JSON Lines with `_id`, optional `title`, `text`. Title and text are joined
/// with a single space; the result is NFC-normalized and whitespace-collapsed.
inline std::vector<Document> read_corpus_jsonl(std::istream& in) {
    std::vector<Document> docs;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
        }
        if (!rec.is_object()) throw ParseError("record is not a JSON object", lineno);
        Document d;
        d.id = detail::string_field(rec, "_id", lineno);
        if (d.id.empty()) throw ParseError("missing or empty _id", lineno);
        try {
            d.text = unicode::normalize_text(
                detail::join_title_text(detail::string_field(rec, "title", lineno), detail::string_field(rec, "text", lineno)));
        } catch (const ParseError& e) {
            throw ParseError(e.what(), lineno);
        }
        if (d.text.empty()) throw ParseError("document '" + d.id + "' has no text", lineno);
        detail::check_unique_ids(seen, d.id, "document");
        docs.push_back(std::move(d));
    }
    return docs;
}

/// TREC SGML-style documents: `<DOC><DOCNO>id</DOCNO>` with optional
/// `<TITLE>`/`<HEAD>` and `<TEXT>` blocks.
inline std::vector<Document> read_corpus_trec(std::istream& in) {
    std::vector<Document> docs;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    std::size_t doc_start = 0;
    bool in_doc = false;
    std::string buf;

    auto extract = [](const std::string& body, std::string_view tag) {
        std::string out;
        const std::string open = "<" + std::string(tag) + ">";
        const std::string close = "</" + std::string(tag) + ">";
        std::size_t pos = 0;
        while ((pos = body.find(open, pos)) != std::string::npos) {
            const auto from = pos + open.size();
            const auto to = body.find(close, from);
            if (to == std::string::npos) return std::optional<std::string>{};
            if (!out.empty()) out.push_back(' ');
            out.append(body, from, to - from);
            pos = to + close.size();
        }
        return std::optional<std::string>{out};
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (!in_doc) {
            if (line.find("<DOC>") != std::string::npos) {
                in_doc = true;
                doc_start = lineno;
                buf.clear();
            } else if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw ParseError("content outside <DOC>", lineno);
            }
            continue;
        }
        if (line.find("</DOC>") != std::string::npos) {
            in_doc = false;
            auto docno = extract(buf, "DOCNO");
            auto title = extract(buf, "TITLE");
            auto head = extract(buf, "HEAD");
            auto text = extract(buf, "TEXT");
            if (!docno || !title || !head || !text) throw ParseError("unterminated tag in document", doc_start);
            Document d;
            d.id = unicode::collapse_whitespace(*docno);
            if (d.id.empty()) throw ParseError("missing DOCNO", doc_start);
            std::string t = title->empty() ? *head : *title;
            try {
                d.text = unicode::normalize_text(detail::join_title_text(unicode::collapse_whitespace(t), *text));
            } catch (const ParseError& e) {
                throw ParseError(e.what(), doc_start);
            }
            if (d.text.empty()) throw ParseError("document '" + d.id + "' has no text", doc_start);
            detail::check_unique_ids(seen, d.id, "document");
            docs.push_back(std::move(d));
            continue;
        }
        buf += line;
        buf.push_back('\n');
    }
    if (in_doc) throw ParseError("unterminated <DOC>", doc_start);
    return docs;
}

inline std::vector<Document> load_corpus(const std::string& path, CorpusFormat format = CorpusFormat::jsonl) {
    auto in = detail::open_input(path);
    return format == CorpusFormat::jsonl ? read_corpus_jsonl(in) : read_corpus_trec(in);
}

inline void write_corpus_jsonl(std::ostream& out, const std::vector<Document>& docs) {
    for (const auto& d : docs) out << nlohmann::json{{"_id", d.id}, {"text", d.text}}.dump() << '\n';
}

// --- Queries ----------------------------------------------------------------

/// JSON Lines `_id`, `text`. `field` selects which (possibly dotted, e.g.
/// `metadata.description`) string field supplies the query text.
inline std::vector<Query> read_queries_jsonl(std::istream& in, std::string_view field = "text") {
    std::vector<Query> queries;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
        }
        if (!rec.is_object()) throw ParseError("record is not a JSON object", lineno);
        Query q;
        q.id = detail::string_field(rec, "_id", lineno);
        if (q.id.empty()) throw ParseError("missing or empty _id", lineno);
        try {
            q.text = unicode::normalize_text(detail::string_field(rec, field, lineno));
        } catch (const ParseError& e) {
            throw ParseError(e.what(), lineno);
        }
        if (q.text.empty()) throw ParseError("query '" + q.id + "' has empty '" + std::string(field) + "'", lineno);
        detail::check_unique_ids(seen, q.id, "query");
        queries.push_back(std::move(q));
    }
    return queries;
}

inline std::vector<Query> load_queries(const std::string& path, std::string_view field = "text") {
    auto in = detail::open_input(path);
    return read_queries_jsonl(in, field);
}

inline void write_queries_jsonl(std::ostream& out, const std::vector<Query>& queries) {
    for (const auto& q : queries) out << nlohmann::json{{"_id", q.id}, {"text", q.text}}.dump() << '\n';
}

// --- Qrels ------------------------------------------------------------------

/// TREC qrels `query_id iter doc_id grade`. Negative grades are clamped to 0
/// with a warning (they count as non-relevant, as trec_eval does).
inline JudgmentSet read_qrels(std::istream& in) {
    JudgmentSet qrels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string qid, iter, doc, grade_s, extra;
        if (!(ls >> qid)) continue;
        if (!(ls >> iter >> doc >> grade_s) || (ls >> extra)) throw ParseError("qrels line needs 4 columns", lineno);
        int grade = 0;
        auto res = std::from_chars(grade_s.data(), grade_s.data() + grade_s.size(), grade);
        if (res.ec != std::errc() || res.ptr != grade_s.data() + grade_s.size())
            throw ParseError("grade '" + grade_s + "' is not an integer", lineno);
        if (grade < 0) {
            log::warn("qrels line " + std::to_string(lineno) + ": negative grade " + grade_s + " for (" + qid + ", " +
                      doc + ") clamped to 0");
            grade = 0;
        }
        try {
            qrels.insert(qid, doc, grade);
        } catch (const IntegrityError& e) {
            throw IntegrityError(std::string(e.what()) + " at line " + std::to_string(lineno));
        }
    }
    return qrels;
}

inline JudgmentSet load_qrels(const std::string& path) {
    auto in = detail::open_input(path);
    return read_qrels(in);
}

inline void write_qrels(std::ostream& out, const JudgmentSet& qrels) {
    for (const auto& [qid, docs] : qrels.entries())
        for (const auto& [doc, grade] : docs) out << qid << " 0 " << doc << ' ' << grade << '\n';
}

/// Reports judged doc ids that are not in the corpus. They are tolerated.
inline std::size_t warn_dangling_judgments(const JudgmentSet& qrels, const std::unordered_set<std::string>& corpus_ids) {
    std::size_t dangling = 0;
    for (const auto& [qid, docs] : qrels.entries())
        for (const auto& [doc, _] : docs)
            if (!corpus_ids.contains(doc)) ++dangling;
    if (dangling) log::warn(std::to_string(dangling) + " judged document ids are missing from the corpus");
    return dangling;
}

// --- Query filter -------------------------------------------------------------

/// Keeps a query iff at least `min_judged` judged-relevant and `min_judged`
/// judged-non-relevant documents appear in its first-stage ranking (the
/// caller passes the top-1000 list). Output follows `query_ids` order.
inline std::vector<std::string> filter_queries(const std::vector<std::string>& query_ids, const JudgmentSet& qrels,
                                               const std::map<std::string, Ranking>& bm25_top1000,
                                               std::size_t min_judged = 32, const GradePolicy& policy = {}) {
    std::vector<std::string> kept;
    for (const auto& qid : query_ids) {
        auto it = bm25_top1000.find(qid);
        if (it == bm25_top1000.end()) throw PreconditionError("no first-stage ranking for query '" + qid + "'");
        const auto& judged = qrels.for_query(qid);
        std::size_t rel = 0, nonrel = 0;
        for (const auto& item : it->second) {
            auto g = judged.find(item.doc_id);
            if (g == judged.end()) continue;
            (policy.is_relevant(g->second) ? rel : nonrel)++;
        }
        if (rel >= min_judged && nonrel >= min_judged) kept.push_back(qid);
    }
    return kept;
}

// --- Splits -------------------------------------------------------------------

struct SplitAssignment {
    std::uint64_t shuffle_seed = 0;
    std::vector<std::string> train;
    std::vector<std::string> valid;
    std::vector<std::string> test;

    friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

inline void to_json(nlohmann::json& j, const SplitAssignment& s) {
    j = {{"seed", s.shuffle_seed}, {"train", s.train}, {"valid", s.valid}, {"test", s.test}};
}

inline void from_json(const nlohmann::json& j, SplitAssignment& s) {
    s.shuffle_seed = j.at("seed").get<std::uint64_t>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.valid = j.at("valid").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
}

/// Fisher-Yates with raw mt19937_64 draws, so a seed yields the same order on
/// every standard library.
template <class T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

/// Random 3:1:1 assignment: test and valid get floor(n/5) each, train the rest.
/// Each set is returned sorted.
inline SplitAssignment make_splits(std::vector<std::string> query_ids, std::uint64_t shuffle_seed) {
    if (query_ids.size() < 5) throw PreconditionError("need at least 5 queries to split, got " + std::to_string(query_ids.size()));
    {
        std::set<std::string> unique(query_ids.begin(), query_ids.end());
        if (unique.size() != query_ids.size()) throw IntegrityError("duplicate query ids passed to make_splits");
    }
    std::sort(query_ids.begin(), query_ids.end());
    seeded_shuffle(query_ids, shuffle_seed);
    const std::size_t fifth = query_ids.size() / 5;
    SplitAssignment s;
    s.shuffle_seed = shuffle_seed;
    s.test.assign(query_ids.begin(), query_ids.begin() + fifth);
    s.valid.assign(query_ids.begin() + fifth, query_ids.begin() + 2 * fifth);
    s.train.assign(query_ids.begin() + 2 * fifth, query_ids.end());
    for (auto* set : {&s.train, &s.valid, &s.test}) std::sort(set->begin(), set->end());
    return s;
}

// --- Negative augmentation --------------------------------------------------

/// Adds grade-0 judgments for the first `needed` unjudged documents ranked
/// strictly below `rank_threshold` (1-based). Warns when fewer exist.
inline JudgmentSet augment_negatives(const JudgmentSet& qrels, const Ranking& bm25_ranking, std::size_t needed,
                                     std::size_t rank_threshold = 100) {
    JudgmentSet out = qrels;
    const auto& qid = bm25_ranking.query_id();
    std::size_t added = 0;
    for (std::size_t i = rank_threshold; i < bm25_ranking.size() && added < needed; ++i) {
        const auto& doc = bm25_ranking[i].doc_id;
        if (qrels.is_judged(qid, doc)) continue;
        out.insert(qid, doc, 0);
        ++added;
    }
    if (added < needed)
        log::warn("query '" + qid + "': only " + std::to_string(added) + " of " + std::to_string(needed) +
                  " augmented negatives available below rank " + std::to_string(rank_threshold));
    return out;
}

}  // namespace feedrank
