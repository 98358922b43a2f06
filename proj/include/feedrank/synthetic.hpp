#pragma once

// Seeded synthetic retrieval collections with planted relevance structure.
//
// Each query owns a topic: a few core words (the query text) and several
// subtopics with their own vocabulary. Relevant documents mix background
// words with one subtopic's vocabulary and usually, but not always, a core
// word; grade-2 documents are more on-topic than grade-1 ones. Judged
// non-relevant "distractors" repeat the core words of two queries but talk
// about unrelated material. Embeddings mirror the same structure: relevant
// documents sit at the topic centroid plus one of the topic's facets (shared
// directions), distractors lean towards the centroid but along other facets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "feedrank/corpus_io.hpp"
#include "feedrank/embedder.hpp"
#include "feedrank/error.hpp"

namespace feedrank::synthetic {

struct SyntheticSpec {
    std::size_t num_docs = 2000;
    std::size_t num_queries = 30;
    std::size_t relevant_per_query = 45;
    std::size_t subtopics = 4;
    std::size_t core_words = 3;
    std::size_t subtopic_words = 12;
    std::size_t background_words = 600;
    std::size_t dim = 32;
    /// Shared embedding directions; each topic's subtopics use `facets_per_topic` of them.
    std::size_t facets = 8;
    std::size_t facets_per_topic = 2;
    /// Weight of the topic centroid in distractor embeddings (0: unrelated, 1: fully on-topic).
    double distractor_topicality = 0.7;
    double core_mention_prob = 0.9;
    double subtopic_share = 0.22;
    double embedding_noise = 0.9;
    std::uint64_t seed = 0;
};

struct SyntheticDataset {
    std::vector<Document> docs;
    std::vector<Query> queries;
    JudgmentSet qrels;
    EmbeddingStore store;
};

namespace detail {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }
    bool chance(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    /// Zipf-like draw over [0, n): rank r has weight 1/(r+1).
    std::size_t zipf(const std::vector<double>& cdf) {
        const double u = uniform() * cdf.back();
        return static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline std::string word(std::size_t id) {
    // Consonant-vowel syllables; distinct ids give distinct words, none a stopword.
    static const char* cons = "bcdfghjklmnprstvz";
    static const char* vow = "aeiou";
    std::string w;
    std::size_t x = id;
    do {
        w.push_back(cons[x % 17]);
        x /= 17;
        w.push_back(vow[x % 5]);
        x /= 5;
    } while (x > 0);
    w.push_back('x');
    return w;
}

inline Vector random_unit(Rng& rng, std::size_t dim) {
    Vector v(dim);
    for (auto& x : v) x = rng.normal();
    l2_normalize(v);
    return v;
}

}  // namespace detail

inline SyntheticDataset generate(const SyntheticSpec& spec) {
    const std::size_t q = spec.num_queries;
    const std::size_t relevant_total = q * spec.relevant_per_query;
    if (q < 5 || spec.subtopics == 0 || spec.core_words == 0 || spec.dim < 8)
        throw PreconditionError("synthetic spec too small");
    if (spec.facets_per_topic == 0 || spec.facets_per_topic >= spec.facets)
        throw PreconditionError("facets_per_topic must be in [1, facets)");
    if (relevant_total >= spec.num_docs) throw PreconditionError("synthetic spec: relevant documents exceed corpus size");
    const std::size_t spare = spec.num_docs - relevant_total;
    const std::size_t distractors = spare - spare / 12;

    detail::Rng rng(spec.seed);
    std::size_t next_word = 0;
    auto fresh = [&](std::size_t n) {
        std::vector<std::string> ws;
        for (std::size_t i = 0; i < n; ++i) ws.push_back(detail::word(next_word++));
        return ws;
    };

    const auto background = fresh(spec.background_words);
    std::vector<double> bg_cdf(background.size());
    for (std::size_t i = 0; i < bg_cdf.size(); ++i) bg_cdf[i] = (i ? bg_cdf[i - 1] : 0.0) + 1.0 / static_cast<double>(i + 1);
    const auto misc = fresh(300);

    struct Topic {
        std::vector<std::string> core;
        std::vector<std::vector<std::string>> sub;
        Vector centroid;
        std::vector<std::size_t> facets;
    };
    std::vector<Vector> facets;
    for (std::size_t f = 0; f < spec.facets; ++f) facets.push_back(detail::random_unit(rng, spec.dim));
    std::vector<Topic> topics(q);
    for (auto& t : topics) {
        t.core = fresh(spec.core_words);
        for (std::size_t s = 0; s < spec.subtopics; ++s) t.sub.push_back(fresh(spec.subtopic_words));
        t.centroid = detail::random_unit(rng, spec.dim);
        std::vector<std::size_t> all(spec.facets);
        for (std::size_t f = 0; f < all.size(); ++f) all[f] = f;
        for (std::size_t f = 0; f < spec.facets_per_topic; ++f) {
            std::swap(all[f], all[f + rng.below(all.size() - f)]);
            t.facets.push_back(all[f]);
        }
    }
    auto other_facet = [&](const Topic& t) {
        while (true) {
            const std::size_t f = rng.below(spec.facets);
            if (std::find(t.facets.begin(), t.facets.end(), f) == t.facets.end()) return f;
        }
    };
    std::vector<Vector> unrelated;
    for (std::size_t i = 0; i < 20; ++i) unrelated.push_back(detail::random_unit(rng, spec.dim));

    SyntheticDataset ds{{}, {}, {}, EmbeddingStore(spec.dim)};
    auto doc_id = [](std::size_t i) {
        std::string s = std::to_string(i);
        return "D" + std::string(5 - std::min<std::size_t>(5, s.size()), '0') + s;
    };
    auto query_id = [](std::size_t i) { return "Q" + std::string(i < 10 ? "0" : "") + std::to_string(i); };
    auto embed = [&](const Vector& base, double noise) {
        Vector v = base;
        for (auto& x : v) x += noise * rng.normal() / std::sqrt(static_cast<double>(spec.dim));
        l2_normalize(v);
        return v;
    };
    auto mix = [](const Vector& a, double wa, const Vector& b, double wb) {
        Vector v(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) v[i] = wa * a[i] + wb * b[i];
        return v;
    };
    auto bg_words = [&](std::string& text, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) text += background[rng.zipf(bg_cdf)] + ' ';
    };

    for (std::size_t t = 0; t < q; ++t) {
        std::string text;
        for (std::size_t c = 0; c < spec.core_words; ++c) text += (c ? " " : "") + topics[t].core[c];
        ds.queries.push_back({query_id(t), text});
        ds.store.put(query_id(t), embed(topics[t].centroid, 0.5 * spec.embedding_noise));
    }

    std::size_t next_doc = 0;
    for (std::size_t t = 0; t < q; ++t) {
        const auto& topic = topics[t];
        for (std::size_t r = 0; r < spec.relevant_per_query; ++r) {
            const std::size_t s = r % spec.subtopics;
            const bool strong = rng.chance(0.5);
            const std::size_t length = 40 + rng.below(40);
            const double share = spec.subtopic_share * (strong ? 1.3 : 0.8);
            std::string text;
            for (std::size_t i = 0; i < length; ++i) {
                if (rng.chance(share))
                    text += topic.sub[s][rng.below(topic.sub[s].size())] + ' ';
                else
                    bg_words(text, 1);
            }
            if (rng.chance(spec.core_mention_prob)) {
                const std::size_t mentions = 1 + rng.below(strong ? 3 : 2);
                for (std::size_t m = 0; m < mentions; ++m) text += topic.core[rng.below(topic.core.size())] + ' ';
            }
            const std::string id = doc_id(next_doc++);
            text.pop_back();
            ds.docs.push_back({id, text});
            const Vector base = mix(topic.centroid, 1.0, facets[topic.facets[s % topic.facets.size()]], 0.8);
            ds.store.put(id, embed(base, spec.embedding_noise * (strong ? 0.8 : 1.2)));
            ds.qrels.insert(query_id(t), id, strong ? 2 : 1);
        }
    }

    // Distractors: each mentions the core words of two topics, judged 0 for both.
    for (std::size_t i = 0; i < distractors; ++i) {
        const std::size_t t1 = i % q;
        const std::size_t t2 = (t1 + 1 + (i / q) % (q - 1)) % q;
        std::string text;
        const std::size_t length = 40 + rng.below(40);
        for (std::size_t w = 0; w < length; ++w) {
            if (rng.chance(0.2))
                text += misc[rng.below(misc.size())] + ' ';
            else
                bg_words(text, 1);
        }
        for (std::size_t t : {t1, t2}) {
            const std::size_t mentions = 1 + rng.below(3);
            for (std::size_t m = 0; m < mentions; ++m) text += topics[t].core[rng.below(topics[t].core.size())] + ' ';
        }
        text.pop_back();
        const std::string id = doc_id(next_doc++);
        ds.docs.push_back({id, text});
        const double w = spec.distractor_topicality;
        const Vector near = mix(topics[t1].centroid, w, unrelated[rng.below(unrelated.size())], 1.0 - w);
        const Vector base = mix(near, 1.0, facets[other_facet(topics[t1])], 0.8);
        ds.store.put(id, embed(base, spec.embedding_noise));
        ds.qrels.insert(query_id(t1), id, 0);
        ds.qrels.insert(query_id(t2), id, 0);
    }

    while (next_doc < spec.num_docs) {
        std::string text;
        const std::size_t length = 40 + rng.below(40);
        for (std::size_t w = 0; w < length; ++w) {
            if (rng.chance(0.2))
                text += misc[rng.below(misc.size())] + ' ';
            else
                bg_words(text, 1);
        }
        text.pop_back();
        const std::string id = doc_id(next_doc++);
        ds.docs.push_back({id, text});
        ds.store.put(id, detail::random_unit(rng, spec.dim));
    }
    return ds;
}

/// Writes corpus.jsonl, queries.jsonl, qrels.txt and embeddings.tsv into `dir`.
inline void write_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw Error("cannot write '" + (dir / name).string() + "'");
        return out;
    };
    {
        auto out = open("corpus.jsonl");
        write_corpus_jsonl(out, ds.docs);
    }
    {
        auto out = open("queries.jsonl");
        write_queries_jsonl(out, ds.queries);
    }
    {
        auto out = open("qrels.txt");
        write_qrels(out, ds.qrels);
    }
    {
        auto out = open("embeddings.tsv");
        ds.store.write(out);
    }
}

}  // namespace feedrank::synthetic
