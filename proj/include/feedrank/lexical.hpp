#pragma once

// Tokenization, inverted index, weighted BM25 retrieval, TF-IDF term
// extraction and feedback query expansion.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "feedrank/corpus_io.hpp"
#include "feedrank/error.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank::lexical {

// --- Tokenizer ----------------------------------------------------------------

/// The Lucene/Elasticsearch `_english_` stop set.
inline constexpr std::array<std::string_view, 33> kEnglishStopwords = {
    "a",    "an",   "and",  "are",  "as",   "at",    "be",    "but",  "by",   "for",  "if",
    "in",   "into", "is",   "it",   "no",   "not",   "of",    "on",   "or",   "such", "that",
    "the",  "their", "then", "there", "these", "they", "this", "to",   "was",  "will", "with"};

inline bool is_stopword(std::string_view term) {
    return std::find(kEnglishStopwords.begin(), kEnglishStopwords.end(), term) != kEnglishStopwords.end();
}

struct TokenizerOptions {
    /// Applied to each kept token; empty means no stemming.
    std::function<std::string(std::string_view)> stemmer;
};

/// Lowercases, splits on anything that is not a Unicode letter or digit,
/// drops tokens shorter than two code points and English stopwords.
inline std::vector<std::string> tokenize(std::string_view text, const TokenizerOptions& opts = {}) {
    std::vector<std::string> out;
    std::string current;
    std::size_t current_len = 0;
    auto flush = [&] {
        if (current_len >= 2 && !is_stopword(current)) out.push_back(opts.stemmer ? opts.stemmer(current) : current);
        current.clear();
        current_len = 0;
    };
    const auto* p = reinterpret_cast<const std::uint8_t*>(text.data());
    const auto len = static_cast<std::int32_t>(text.size());
    std::int32_t i = 0;
    while (i < len) {
        UChar32 c;
        U8_NEXT(p, i, len, c);
        if (c >= 0 && u_isalnum(c)) {
            const UChar32 lower = u_tolower(c);
            char buf[U8_MAX_LENGTH];
            std::int32_t n = 0;
            U8_APPEND_UNSAFE(reinterpret_cast<std::uint8_t*>(buf), n, lower);
            current.append(buf, static_cast<std::size_t>(n));
            ++current_len;
        } else {
            flush();
        }
    }
    flush();
    return out;
}

// --- Index --------------------------------------------------------------------

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;

    friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

struct Posting {
    std::uint32_t doc = 0;
    std::uint32_t tf = 0;

    friend bool operator==(const Posting&, const Posting&) = default;
};

/// Immutable inverted index with a forward (per-document) term list used for
/// term extraction. Internal doc ids follow corpus order.
class InvertedIndex {
public:
    InvertedIndex() = default;

    static InvertedIndex build(const std::vector<Document>& corpus, const TokenizerOptions& tok = {}) {
        if (corpus.empty()) throw PreconditionError("cannot index an empty corpus");
        InvertedIndex idx;
        idx.doc_ids_.reserve(corpus.size());
        idx.forward_.resize(corpus.size());
        idx.doc_lengths_.resize(corpus.size());
        for (std::uint32_t d = 0; d < corpus.size(); ++d) {
            const auto& doc = corpus[d];
            if (!idx.internal_.emplace(doc.id, d).second) throw IntegrityError("duplicate document id '" + doc.id + "'");
            idx.doc_ids_.push_back(doc.id);
            std::map<std::uint32_t, std::uint32_t> tfs;
            for (const auto& t : tokenize(doc.text, tok)) ++tfs[idx.intern(t)];
            std::uint32_t length = 0;
            for (const auto& [term, tf] : tfs) {
                idx.postings_[term].push_back({d, tf});
                idx.forward_[d].push_back({term, tf});
                length += tf;
            }
            idx.doc_lengths_[d] = length;
        }
        idx.finish();
        return idx;
    }

    std::size_t doc_count() const noexcept { return doc_ids_.size(); }
    double avg_doc_length() const noexcept { return avg_doc_length_; }
    std::uint32_t doc_length(std::uint32_t internal) const { return doc_lengths_.at(internal); }
    const std::vector<std::uint32_t>& doc_lengths() const noexcept { return doc_lengths_; }
    const std::string& external_id(std::uint32_t internal) const { return doc_ids_.at(internal); }
    std::size_t vocabulary_size() const noexcept { return terms_.size(); }

    std::optional<std::uint32_t> internal_id(std::string_view external) const {
        auto it = internal_.find(std::string(external));
        if (it == internal_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<std::uint32_t> term_id(std::string_view term) const {
        auto it = term_ids_.find(std::string(term));
        if (it == term_ids_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& term(std::uint32_t id) const { return terms_.at(id); }

    /// Postings sorted by internal doc id; empty for unknown terms.
    const std::vector<Posting>& postings(std::string_view term) const {
        static const std::vector<Posting> none;
        auto id = term_id(term);
        return id ? postings_[*id] : none;
    }

    std::size_t document_frequency(std::string_view term) const { return postings(term).size(); }

    /// (term id, tf) pairs of one document.
    const std::vector<Posting>& document_terms(std::uint32_t internal) const { return forward_.at(internal); }

    /// ln(1 + (N - df + 0.5) / (df + 0.5)); never negative.
    double idf(std::size_t df) const {
        const double n = static_cast<double>(doc_count());
        const double f = static_cast<double>(df);
        return std::log(1.0 + (n - f + 0.5) / (f + 0.5));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "feedrank-index";
        j["version"] = kFormatVersion;
        j["docs"] = doc_ids_;
        j["terms"] = terms_;
        auto& fwd = j["forward"] = nlohmann::json::array();
        for (const auto& doc : forward_) {
            auto row = nlohmann::json::array();
            for (const auto& p : doc) row.push_back({p.doc, p.tf});
            fwd.push_back(std::move(row));
        }
        return j;
    }

    static InvertedIndex from_json(const nlohmann::json& j) {
        if (j.value("format", "") != "feedrank-index") throw ParseError("not a feedrank index file");
        if (j.value("version", 0) != kFormatVersion)
            throw ParseError("unsupported index version " + std::to_string(j.value("version", 0)));
        InvertedIndex idx;
        idx.doc_ids_ = j.at("docs").get<std::vector<std::string>>();
        idx.terms_ = j.at("terms").get<std::vector<std::string>>();
        for (std::uint32_t t = 0; t < idx.terms_.size(); ++t)
            if (!idx.term_ids_.emplace(idx.terms_[t], t).second) throw ParseError("duplicate term in index file");
        idx.postings_.assign(idx.terms_.size(), {});
        const auto& fwd = j.at("forward");
        if (fwd.size() != idx.doc_ids_.size()) throw ParseError("forward index size mismatch");
        idx.forward_.resize(idx.doc_ids_.size());
        idx.doc_lengths_.resize(idx.doc_ids_.size());
        for (std::uint32_t d = 0; d < idx.doc_ids_.size(); ++d) {
            if (!idx.internal_.emplace(idx.doc_ids_[d], d).second) throw ParseError("duplicate document id in index file");
            std::uint32_t length = 0;
            for (const auto& pair : fwd[d]) {
                Posting p{pair.at(0).get<std::uint32_t>(), pair.at(1).get<std::uint32_t>()};
                if (p.doc >= idx.terms_.size() || p.tf == 0) throw ParseError("corrupt forward entry in index file");
                idx.forward_[d].push_back(p);
                idx.postings_[p.doc].push_back({d, p.tf});
                length += p.tf;
            }
            idx.doc_lengths_[d] = length;
        }
        idx.finish();
        return idx;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write '" + path + "'");
        out << to_json().dump() << '\n';
    }

    static InvertedIndex load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open '" + path + "'");
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid index file: ") + e.what());
        }
    }

    friend bool operator==(const InvertedIndex& a, const InvertedIndex& b) {
        return a.doc_ids_ == b.doc_ids_ && a.terms_ == b.terms_ && a.postings_ == b.postings_ &&
               a.forward_ == b.forward_ && a.doc_lengths_ == b.doc_lengths_ && a.avg_doc_length_ == b.avg_doc_length_;
    }

private:
    static constexpr int kFormatVersion = 1;

    std::uint32_t intern(const std::string& t) {
        auto [it, inserted] = term_ids_.emplace(t, static_cast<std::uint32_t>(terms_.size()));
        if (inserted) {
            terms_.push_back(t);
            postings_.emplace_back();
        }
        return it->second;
    }

    void finish() {
        // Forward lists are in term-id order; postings in doc order.
        for (auto& doc : forward_)
            std::sort(doc.begin(), doc.end(), [](const Posting& a, const Posting& b) { return a.doc < b.doc; });
        double total = 0.0;
        for (auto len : doc_lengths_) total += len;
        avg_doc_length_ = doc_lengths_.empty() ? 0.0 : total / static_cast<double>(doc_lengths_.size());
    }

    std::vector<std::string> doc_ids_;
    std::unordered_map<std::string, std::uint32_t> internal_;
    std::vector<std::string> terms_;
    std::unordered_map<std::string, std::uint32_t> term_ids_;
    std::vector<std::vector<Posting>> postings_;
    // forward_[d] reuses Posting as (term id, tf).
    std::vector<std::vector<Posting>> forward_;
    std::vector<std::uint32_t> doc_lengths_;
    double avg_doc_length_ = 0.0;
};

// --- Weighted queries -----------------------------------------------------------

enum class TermOrigin { original, expansion };

struct WeightedTerm {
    std::string term;
    double weight = 1.0;
    TermOrigin origin = TermOrigin::original;

    friend bool operator==(const WeightedTerm&, const WeightedTerm&) = default;
};

struct WeightedQuery {
    std::vector<WeightedTerm> terms;

    /// Term weights summed across occurrences and origins.
    std::map<std::string, double> merged() const {
        std::map<std::string, double> m;
        for (const auto& t : terms) m[t.term] += t.weight;
        return m;
    }

    std::size_t count(TermOrigin origin) const {
        return static_cast<std::size_t>(
            std::count_if(terms.begin(), terms.end(), [&](const WeightedTerm& t) { return t.origin == origin; }));
    }

    static WeightedQuery from_text(std::string_view text, const TokenizerOptions& tok = {}) {
        WeightedQuery q;
        for (auto& t : tokenize(text, tok)) q.terms.push_back({std::move(t), 1.0, TermOrigin::original});
        return q;
    }

    friend bool operator==(const WeightedQuery&, const WeightedQuery&) = default;
};

inline nlohmann::json weighted_query_json(const WeightedQuery& q) {
    auto terms = nlohmann::json::array();
    for (const auto& t : q.terms)
        terms.push_back({{"term", t.term}, {"weight", t.weight},
                         {"origin", t.origin == TermOrigin::original ? "original" : "expansion"}});
    auto merged = nlohmann::json::object();
    for (const auto& [term, w] : q.merged()) merged[term] = w;
    return {{"terms", terms}, {"merged", merged}};
}

// --- BM25 -------------------------------------------------------------------------

/// Weighted BM25 over the index. Documents matching no query term are left
/// out; at most `top_n` items are returned.
inline Ranking bm25_search(const InvertedIndex& index, const WeightedQuery& wq, std::size_t top_n,
                           const Bm25Params& params = {}, std::string query_id = {}) {
    if (top_n == 0) throw PreconditionError("top_n must be at least 1");
    std::vector<double> acc(index.doc_count(), 0.0);
    std::vector<char> touched(index.doc_count(), 0);
    std::vector<std::uint32_t> hits;
    const double avglen = index.avg_doc_length();
    for (const auto& [term, weight] : wq.merged()) {
        if (weight <= 0.0) continue;
        const auto& plist = index.postings(term);
        if (plist.empty()) continue;
        const double idf = index.idf(plist.size());
        for (const auto& p : plist) {
            const double tf = p.tf;
            const double len = index.doc_length(p.doc);
            const double norm = avglen > 0.0 ? len / avglen : 0.0;
            acc[p.doc] += weight * idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm));
            if (!touched[p.doc]) {
                touched[p.doc] = 1;
                hits.push_back(p.doc);
            }
        }
    }
    std::vector<ScoredDoc> items;
    items.reserve(hits.size());
    for (auto d : hits) items.push_back({index.external_id(d), acc[d]});
    const std::size_t n = std::min(top_n, items.size());
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n), items.end(), ranks_before);
    items.resize(n);
    return Ranking::from_ordered(std::move(query_id), std::move(items));
}

// --- Term extraction and expansion ----------------------------------------------

/// Number of expansion terms per document; `std::nullopt` means all terms.
using ExpansionCount = std::optional<std::size_t>;

inline ExpansionCount parse_expansion_count(std::string_view s) {
    if (s == "all") return std::nullopt;
    std::size_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v == 0)
        throw PreconditionError("expansion count must be a positive integer or 'all', got '" + std::string(s) + "'");
    return v;
}

inline std::string to_string(const ExpansionCount& e) { return e ? std::to_string(*e) : "all"; }

struct ExtractOptions {
    std::uint32_t min_tf = 1;
    std::size_t min_df = 1;
};

struct TermScore {
    std::string term;
    double score = 0.0;

    friend bool operator==(const TermScore&, const TermScore&) = default;
};

/// Top-`e` terms of a document by tf * idf; ties broken lexicographically.
inline std::vector<TermScore> extract_terms(const InvertedIndex& index, std::string_view doc_id, ExpansionCount e,
                                            const ExtractOptions& opts = {}) {
    auto internal = index.internal_id(doc_id);
    if (!internal) throw PreconditionError("unknown document id '" + std::string(doc_id) + "'");
    std::vector<TermScore> scored;
    for (const auto& p : index.document_terms(*internal)) {
        const auto& term = index.term(p.doc);
        const auto df = index.document_frequency(term);
        if (p.tf < opts.min_tf || df < opts.min_df) continue;
        scored.push_back({term, static_cast<double>(p.tf) * index.idf(df)});
    }
    std::sort(scored.begin(), scored.end(), [](const TermScore& a, const TermScore& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.term < b.term;
    });
    if (e && scored.size() > *e) scored.resize(*e);
    return scored;
}

/// Original query terms at weight 1 each, plus weight 1 per extracted term
/// per relevant document (repeats across documents accumulate).
inline WeightedQuery expand_query(const InvertedIndex& index, std::string_view query_text,
                                  const std::vector<std::string>& relevant_docs, ExpansionCount e,
                                  const ExtractOptions& opts = {}, const TokenizerOptions& tok = {}) {
    WeightedQuery q = WeightedQuery::from_text(query_text, tok);
    for (const auto& doc : relevant_docs)
        for (auto& ts : extract_terms(index, doc, e, opts)) q.terms.push_back({std::move(ts.term), 1.0, TermOrigin::expansion});
    return q;
}

}  // namespace feedrank::lexical
