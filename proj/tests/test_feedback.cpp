#include <gtest/gtest.h>

#include "feedrank/feedback.hpp"
#include "feedrank/fusion_eval.hpp"
#include "feedrank/log.hpp"
#include "support.hpp"

using namespace feedrank;
using feedrank::test_support::ranked;

namespace {

JudgmentSet qrels_of(const std::vector<std::pair<std::string, int>>& grades) {
    JudgmentSet q;
    for (const auto& [d, g] : grades) q.insert("q", d, g);
    return q;
}

}  // namespace

TEST(SelectFeedback, TwoKDocuments) {
    const auto r = ranked("q", {"a", "b", "c", "d", "e", "f", "g"});
    const auto qrels = qrels_of({{"a", 1}, {"b", 0}, {"c", 2}, {"d", 0}, {"e", 1}, {"f", 0}});
    const auto fb = select_feedback(r, qrels, 2);
    EXPECT_EQ(fb.relevant.size() + fb.nonrelevant.size(), 4u);
    EXPECT_EQ(fb.k, 2u);
    EXPECT_EQ(fb.query_id, "q");
}

TEST(SelectFeedback, TopJudgedInRankOrder) {
    const auto r = ranked("q", {"r1", "r2", "n1", "n2", "r3", "n3"});
    const auto qrels = qrels_of({{"r1", 1}, {"r2", 1}, {"n1", 0}, {"n2", 0}, {"r3", 1}, {"n3", 0}});
    const auto fb = select_feedback(r, qrels, 2);
    EXPECT_EQ(fb.relevant, (std::vector<std::string>{"r1", "r2"}));
    EXPECT_EQ(fb.nonrelevant, (std::vector<std::string>{"n1", "n2"}));
}

TEST(SelectFeedback, UnjudgedDocumentsAreSkipped) {
    const auto r = ranked("q", {"u1", "r1", "u2", "n1"});
    const auto fb = select_feedback(r, qrels_of({{"r1", 1}, {"n1", 0}}), 1);
    EXPECT_EQ(fb.relevant, (std::vector<std::string>{"r1"}));
    EXPECT_EQ(fb.nonrelevant, (std::vector<std::string>{"n1"}));
}

TEST(SelectFeedback, PartiallyRelevantSkippedButKeptForEvaluation) {
    const auto r = ranked("q", {"p", "r1", "n1", "r2"});
    const auto qrels = qrels_of({{"p", 1}, {"r1", 2}, {"n1", 0}, {"r2", 2}});
    const auto fb = select_feedback(r, qrels, 1, GradePolicy::partial_excluded());
    EXPECT_EQ(fb.relevant, (std::vector<std::string>{"r1"}));
    EXPECT_EQ(fb.nonrelevant, (std::vector<std::string>{"n1"}));
    const auto res = residualize(qrels, r, fb);
    EXPECT_EQ(res.qrels.grade("q", "p"), 1);
    EXPECT_TRUE(res.ranking.contains("p"));
}

TEST(SelectFeedback, TooFewIsInfeasible) {
    const auto r = ranked("q", {"r1", "n1"});
    EXPECT_THROW(select_feedback(r, qrels_of({{"r1", 1}, {"n1", 0}}), 2), InfeasibleQueryError);
    EXPECT_THROW(select_feedback(r, {}, 0), PreconditionError);
}

TEST(SelectFeedback, OutOfCorpusDocumentsSkippedWithWarning) {
    log::ScopedCapture cap;
    const auto r = ranked("q", {"ghost", "r1", "n1"});
    FeedbackOptions opts;
    opts.in_corpus = [](std::string_view id) { return id != "ghost"; };
    const auto fb = select_feedback(r, qrels_of({{"ghost", 1}, {"r1", 1}, {"n1", 0}}), 1, {}, opts);
    EXPECT_EQ(fb.relevant, (std::vector<std::string>{"r1"}));
    EXPECT_EQ(cap.messages().size(), 1u);
}

TEST(Residualize, RemovesFeedbackKeepsOrder) {
    const auto r = ranked("q", {"a", "b", "c", "d", "e"});
    const auto qrels = qrels_of({{"a", 1}, {"b", 0}, {"c", 1}, {"e", 0}});
    FeedbackSet fb{"q", {"a"}, {"b"}, 1};
    const auto res = residualize(qrels, r, fb);
    EXPECT_EQ(res.ranking.doc_ids(), (std::vector<std::string>{"c", "d", "e"}));
    EXPECT_FALSE(res.qrels.is_judged("q", "a"));
    EXPECT_FALSE(res.qrels.is_judged("q", "b"));
    EXPECT_EQ(res.qrels.grade("q", "c"), 1);
}

TEST(Residualize, EmptyFeedbackIsIdentity) {
    const auto r = ranked("q", {"a", "b"});
    const auto qrels = qrels_of({{"a", 1}});
    const auto res = residualize(qrels, r, FeedbackSet{"q", {}, {}, 0});
    EXPECT_EQ(res.ranking, r);
    EXPECT_EQ(res.qrels, qrels);
}

TEST(Residualize, ChangesNdcgWhenFeedbackWasInTop20) {
    const auto r = ranked("q", {"a", "b", "c", "d"});
    const auto qrels = qrels_of({{"a", 2}, {"b", 0}, {"c", 1}, {"d", 1}});
    FeedbackSet fb{"q", {"a"}, {"b"}, 1};
    const auto res = residualize(qrels, r, fb);
    const double before = eval::ndcg_at_k(r, qrels);
    const double after = eval::ndcg_at_k(res.ranking, res.qrels);
    EXPECT_NE(before, after);
    EXPECT_DOUBLE_EQ(after, 1.0);
}

TEST(DropDuplicateTexts, KeepsFirstOccurrence) {
    const auto r = ranked("q", {"a", "b", "c"});
    const std::unordered_map<std::string, std::string> texts = {{"a", "same"}, {"b", "same"}, {"c", "other"}};
    EXPECT_EQ(drop_duplicate_texts(r, texts).doc_ids(), (std::vector<std::string>{"a", "c"}));
}

TEST(FeedbackSet, JsonRoundTrip) {
    const FeedbackSet fb{"q7", {"a", "b"}, {"c", "d"}, 2};
    EXPECT_EQ(nlohmann::json(fb).get<FeedbackSet>(), fb);
}
