#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "feedrank/lexical.hpp"

using namespace feedrank;
using namespace feedrank::lexical;

namespace {

InvertedIndex toy_index() {
    return InvertedIndex::build({{"d0", "apple banana apple"}, {"d1", "banana cherry"}, {"d2", "cherry cherry cherry durian"}});
}

double idf_oracle(double n, double df) { return std::log(1.0 + (n - df + 0.5) / (df + 0.5)); }

double bm25_oracle(double tf, double df, double n, double len, double avg, double k1 = 1.2, double b = 0.75) {
    return idf_oracle(n, df) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
}

}  // namespace

TEST(Tokenize, DropsStopwordsAndShortTokens) {
    EXPECT_EQ(tokenize("The Origin of COVID-19"), (std::vector<std::string>{"origin", "covid", "19"}));
    EXPECT_EQ(tokenize("state-of-the-art"), (std::vector<std::string>{"state", "art"}));
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_TRUE(tokenize("a I . !").empty());
}

TEST(Tokenize, UnicodeLettersAndCaseFolding) {
    EXPECT_EQ(tokenize("Caf\xC3\xA9 \xC3\x9C" "BER na\xC3\xAFve"), (std::vector<std::string>{"caf\xC3\xA9", "\xC3\xBC" "ber", "na\xC3\xAFve"}));
}

TEST(Tokenize, StemmerHook) {
    TokenizerOptions opts;
    opts.stemmer = [](std::string_view t) { return std::string(t.substr(0, 3)); };
    EXPECT_EQ(tokenize("running runner", opts), (std::vector<std::string>{"run", "run"}));
}

TEST(Index, PostingsAndLengths) {
    const auto idx = InvertedIndex::build({{"d0", "aa bb aa"}});
    EXPECT_EQ(idx.postings("aa"), (std::vector<Posting>{{0, 2}}));
    EXPECT_EQ(idx.postings("bb"), (std::vector<Posting>{{0, 1}}));
    EXPECT_EQ(idx.doc_length(0), 3u);
    EXPECT_TRUE(idx.postings("zz").empty());
}

TEST(Index, AverageLengthIsArithmeticMean) {
    const auto idx = toy_index();
    EXPECT_DOUBLE_EQ(idx.avg_doc_length(), (3.0 + 2.0 + 4.0) / 3.0);
}

TEST(Index, RebuildIsIdenticalAndJsonRoundTrips) {
    const auto a = toy_index();
    const auto b = toy_index();
    EXPECT_EQ(a.to_json(), b.to_json());
    const auto c = InvertedIndex::from_json(a.to_json());
    EXPECT_EQ(c.to_json(), a.to_json());
    EXPECT_EQ(c.doc_count(), 3u);
}

TEST(Bm25, SingleTermClosedForm) {
    const auto idx = toy_index();
    const auto r = bm25_search(idx, WeightedQuery::from_text("durian"), 10, {}, "q");
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].doc_id, "d2");
    EXPECT_NEAR(r[0].score, bm25_oracle(1, 1, 3, 4, 3.0), 1e-12);
}

TEST(Bm25, MultiTermSumsPerTermScores) {
    const auto idx = toy_index();
    const auto r = bm25_search(idx, WeightedQuery::from_text("banana cherry"), 10, {}, "q");
    const double avg = 3.0;
    std::map<std::string, double> expect = {
        {"d0", bm25_oracle(1, 2, 3, 3, avg)},
        {"d1", bm25_oracle(1, 2, 3, 2, avg) + bm25_oracle(1, 2, 3, 2, avg)},
        {"d2", bm25_oracle(3, 2, 3, 4, avg)},
    };
    ASSERT_EQ(r.size(), 3u);
    for (const auto& item : r) EXPECT_NEAR(item.score, expect.at(item.doc_id), 1e-12) << item.doc_id;
    EXPECT_EQ(r[0].doc_id, "d1");
}

TEST(Bm25, CustomParameters) {
    const auto idx = toy_index();
    const auto r = bm25_search(idx, WeightedQuery::from_text("cherry"), 10, {2.0, 0.3}, "q");
    for (const auto& item : r) {
        const double tf = item.doc_id == "d2" ? 3 : 1;
        const double len = item.doc_id == "d2" ? 4 : 2;
        EXPECT_NEAR(item.score, bm25_oracle(tf, 2, 3, len, 3.0, 2.0, 0.3), 1e-12);
    }
}

TEST(Bm25, NoMatchingTermsGivesEmptyRanking) {
    EXPECT_TRUE(bm25_search(toy_index(), WeightedQuery::from_text("zebra"), 10, {}, "q").empty());
}

TEST(Bm25, DoublingWeightsDoublesScores) {
    const auto idx = toy_index();
    auto q = WeightedQuery::from_text("banana cherry durian");
    const auto a = bm25_search(idx, q, 10, {}, "q");
    for (auto& t : q.terms) t.weight *= 2.0;
    const auto b = bm25_search(idx, q, 10, {}, "q");
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].doc_id, b[i].doc_id);
        EXPECT_NEAR(b[i].score, 2.0 * a[i].score, 1e-12);
    }
}

TEST(Bm25, ScoresPositiveForMatchingTerms) {
    std::vector<Document> docs;
    for (int i = 0; i < 50; ++i) docs.push_back({"d" + std::to_string(i), i % 3 ? "common words here" : "common rare"});
    const auto idx = InvertedIndex::build(docs);
    for (const auto& item : bm25_search(idx, WeightedQuery::from_text("common rare"), 100, {}, "q"))
        EXPECT_GT(item.score, 0.0);
}

TEST(Bm25, TopNTruncatesAndTiesBreakById) {
    const auto idx = InvertedIndex::build({{"b", "xx"}, {"a", "xx"}, {"c", "xx"}});
    const auto r = bm25_search(idx, WeightedQuery::from_text("xx"), 2, {}, "q");
    EXPECT_EQ(r.doc_ids(), (std::vector<std::string>{"a", "b"}));
}

TEST(ExtractTerms, BruteForceTfIdf) {
    std::vector<Document> docs = {{"t", "xx xx yy zz"}};
    for (int i = 0; i < 9; ++i) docs.push_back({"o" + std::to_string(i), "yy filler" + std::to_string(i % 3)});
    const auto idx = InvertedIndex::build(docs);
    // Brute force: tf * ln(1 + (N - df + 0.5) / (df + 0.5)) for every term of "t".
    const double n = 10;
    std::vector<std::pair<std::string, double>> expect = {
        {"xx", 2 * idf_oracle(n, 1)}, {"zz", 1 * idf_oracle(n, 1)}, {"yy", 1 * idf_oracle(n, 10)}};
    const auto all = extract_terms(idx, "t", std::nullopt);
    ASSERT_EQ(all.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(all[i].term, expect[i].first);
        EXPECT_NEAR(all[i].score, expect[i].second, 1e-12);
    }
    const auto one = extract_terms(idx, "t", 1);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].term, "xx");
}

TEST(ExtractTerms, AllAndOversizedE) {
    const auto idx = InvertedIndex::build({{"d", "aa bb cc dd ee aa"}, {"x", "zz"}});
    EXPECT_EQ(extract_terms(idx, "d", std::nullopt).size(), 5u);
    EXPECT_EQ(extract_terms(idx, "d", 64).size(), 5u);
    EXPECT_THROW(extract_terms(idx, "nope", 4), PreconditionError);
}

TEST(ExtractTerms, SmallerEIsPrefix) {
    std::vector<Document> docs;
    for (int i = 0; i < 30; ++i) {
        std::string t;
        for (int j = 0; j <= i % 7; ++j) t += "w" + std::to_string((i * 7 + j * 3) % 40) + " ";
        t += "w" + std::to_string(i % 5);
        docs.push_back({"d" + std::to_string(i), t});
    }
    const auto idx = InvertedIndex::build(docs);
    for (const auto& d : docs) {
        const auto big = extract_terms(idx, d.id, 64);
        for (std::size_t e : {1u, 2u, 4u, 8u}) {
            const auto small = extract_terms(idx, d.id, e);
            ASSERT_LE(small.size(), big.size());
            for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i], big[i]);
        }
    }
}

TEST(ExtractTerms, FrequencyFloors) {
    const auto idx = InvertedIndex::build({{"d", "aa aa bb"}, {"x", "aa"}});
    const auto out = extract_terms(idx, "d", std::nullopt, {2, 2});
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].term, "aa");
}

TEST(ExpandQuery, NoFeedbackEqualsTokenizedQuery) {
    const auto idx = toy_index();
    EXPECT_EQ(expand_query(idx, "apple pie", {}, 16), WeightedQuery::from_text("apple pie"));
}

TEST(ExpandQuery, RepeatedTermsAccumulate) {
    const auto idx = InvertedIndex::build({{"a", "kiwi mango"}, {"b", "kiwi papaya"}, {"c", "other stuff"}});
    const auto q = expand_query(idx, "fruit", {"a", "b"}, std::nullopt);
    const auto m = q.merged();
    EXPECT_DOUBLE_EQ(m.at("kiwi"), 2.0);
    EXPECT_DOUBLE_EQ(m.at("mango"), 1.0);
    EXPECT_DOUBLE_EQ(m.at("fruit"), 1.0);
    EXPECT_EQ(q.count(TermOrigin::original), 1u);
    EXPECT_EQ(q.count(TermOrigin::expansion), 4u);
    // Accumulated weight doubles kiwi's contribution: equal to searching with kiwi listed twice.
    WeightedQuery manual = WeightedQuery::from_text("fruit kiwi kiwi mango papaya");
    const auto r1 = bm25_search(idx, q, 10, {}, "q");
    const auto r2 = bm25_search(idx, manual, 10, {}, "q");
    ASSERT_EQ(r1.size(), r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) {
        EXPECT_EQ(r1[i].doc_id, r2[i].doc_id);
        EXPECT_NEAR(r1[i].score, r2[i].score, 1e-12);
    }
}

TEST(ExpansionCount, ParseAndFormat) {
    EXPECT_EQ(parse_expansion_count("16"), ExpansionCount(16));
    EXPECT_EQ(parse_expansion_count("all"), std::nullopt);
    EXPECT_EQ(to_string(ExpansionCount{}), "all");
    EXPECT_EQ(to_string(ExpansionCount(8)), "8");
    EXPECT_THROW(parse_expansion_count("x"), PreconditionError);
}
