#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "feedrank/experiment.hpp"
#include "feedrank/log.hpp"

using namespace feedrank;
using namespace feedrank::experiment;

namespace {

/// One pipeline over the default synthetic collection, shared by all tests.
const Pipeline& shared_pipeline() {
    static const Pipeline p = [] {
        log::ScopedCapture quiet;
        return Pipeline(load_dataset(DatasetConfig{}), PipelineOptions{});
    }();
    return p;
}

ExperimentConfig config(Method m, std::size_t k = 4) {
    ExperimentConfig c;
    c.method = m;
    c.k = k;
    c.seeds = {0};
    return c;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Config, JsonRoundTrip) {
    ExperimentConfig c;
    c.method = Method::fusion_ce_bm25qe;
    c.k = 2;
    c.e = std::nullopt;
    c.seeds = {4, 5};
    c.scorer.full_finetune = true;
    c.scorer.pretrain = Pretrain::supervised;
    c.scorer.finetune_lrs = {0.1};
    c.knn_query_only = true;
    c.pipeline.policy = GradePolicy::partial_excluded();
    c.dataset.synthetic->num_docs = 1234;
    const auto j = to_json(c);
    EXPECT_EQ(to_json(config_from_json(j)), j);
}

TEST(Config, ValidationRejectsOutOfDomainValues) {
    auto c = config(Method::bm25qe);
    c.k = 3;
    EXPECT_THROW(c.validate(), PreconditionError);
    c = config(Method::bm25qe);
    c.e = 10;
    EXPECT_THROW(c.validate(), PreconditionError);
    c = config(Method::bm25qe);
    c.seeds.clear();
    EXPECT_THROW(c.validate(), PreconditionError);
    EXPECT_THROW(parse_method("bm25_magic"), PreconditionError);
    EXPECT_THROW(config_from_json({{"method", "nope"}}), PreconditionError);
}

TEST(Config, MethodNamesRoundTrip) {
    for (auto m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_EQ(all_methods().size(), 8u);
}

TEST(Experiment, Bm25qeReportHasPerQueryNdcg) {
    log::ScopedCapture quiet;
    auto c = config(Method::bm25qe, 8);
    c.e = 16;
    const auto res = run_experiment(shared_pipeline(), c);
    ASSERT_EQ(res.seeds.size(), 1u);
    const auto j = res.to_json();
    const auto& pq = j["seeds"][0]["per_query"];
    EXPECT_EQ(pq.size(), res.seeds[0].split.test.size() - res.seeds[0].skipped.size());
    for (const auto& [qid, m] : pq.items()) {
        EXPECT_TRUE(m.contains("ndcg@20"));
        EXPECT_GE(m["ndcg@20"].get<double>(), 0.0);
        EXPECT_LE(m["ndcg@20"].get<double>(), 1.0);
    }
}

TEST(Experiment, FusedRunIsRrfOfEmittedComponentRuns) {
    log::ScopedCapture quiet;
    const auto dir = std::filesystem::temp_directory_path() / "feedrank_fusion_recompose";
    std::filesystem::remove_all(dir);
    for (auto m : {Method::fusion_knn_bm25qe, Method::fusion_ce_bm25qe}) {
        auto c = config(m);
        c.output_dir = dir.string();
        run_experiment(shared_pipeline(), c);
        const std::string neural = m == Method::fusion_knn_bm25qe ? "knn" : "ce_maml_queryft";
        std::ifstream fused_in(dir / (to_string(m) + ".seed0.run"));
        std::ifstream a_in(dir / (neural + ".seed0.run"));
        std::ifstream b_in(dir / "bm25qe.seed0.run");
        const auto fused = read_run(fused_in), a = read_run(a_in), b = read_run(b_in);
        ASSERT_FALSE(fused.empty());
        for (const auto& [qid, r] : fused) {
            const auto re = eval::rrf({a.at(qid), b.at(qid)}, 60.0);
            EXPECT_EQ(re.doc_ids(), r.doc_ids()) << qid;
            for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(re[i].score, r[i].score, 1e-15);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST(Experiment, ResidualInvariantHoldsForEveryMethod) {
    log::ScopedCapture quiet;
    for (auto m : all_methods()) {
        const auto res = run_experiment(shared_pipeline(), config(m, 2));
        for (const auto& s : res.seeds)
            for (const auto& o : s.outcomes) {
                EXPECT_NO_THROW(check_residual(o));
                for (const auto& id : o.feedback.all_ids()) {
                    EXPECT_FALSE(o.ranking.contains(id));
                    EXPECT_FALSE(o.grades.contains(id));
                }
                EXPECT_EQ(o.feedback.relevant.size(), 2u);
                EXPECT_EQ(o.feedback.nonrelevant.size(), 2u);
            }
    }
}

TEST(Experiment, CheckResidualDetectsLeak) {
    QueryOutcome o;
    o.query_id = "q";
    o.feedback = {"q", {"a"}, {"b"}, 1};
    o.ranking = Ranking::from_scores("q", {{"a", 1.0}});
    EXPECT_THROW(check_residual(o), IntegrityError);
    o.ranking = Ranking::from_scores("q", {{"c", 1.0}});
    o.grades = {{"b", 0}};
    EXPECT_THROW(check_residual(o), IntegrityError);
}

TEST(Experiment, AllMethodsRerankTheSameCandidates) {
    log::ScopedCapture quiet;
    std::map<std::string, std::vector<std::string>> reference;
    for (auto m : {Method::bm25qe, Method::knn, Method::ce_zeroshot, Method::fusion_knn_bm25qe}) {
        const auto res = run_experiment(shared_pipeline(), config(m));
        for (const auto& o : res.seeds[0].outcomes) {
            auto ids = o.ranking.doc_ids();
            std::sort(ids.begin(), ids.end());
            auto [it, inserted] = reference.emplace(o.query_id, ids);
            if (!inserted) EXPECT_EQ(it->second, ids) << to_string(m) << " " << o.query_id;
        }
    }
}

TEST(Experiment, DeterministicRunFilesAcrossThreadCounts) {
    log::ScopedCapture quiet;
    auto c = config(Method::ce_maml_queryft);
    c.threads = 1;
    const auto a = run_experiment(shared_pipeline(), c);
    c.threads = 4;
    const auto b = run_experiment(shared_pipeline(), c);
    EXPECT_EQ(a.seeds[0].run_file("x"), b.seeds[0].run_file("x"));
    EXPECT_EQ(a.seeds[0].finetune->lr, b.seeds[0].finetune->lr);
}

TEST(Experiment, OutputDirectoryLayout) {
    log::ScopedCapture quiet;
    const auto dir = std::filesystem::temp_directory_path() / "feedrank_layout";
    std::filesystem::remove_all(dir);
    auto c = config(Method::knn);
    c.seeds = {0, 1};
    c.output_dir = dir.string();
    const auto res = run_experiment(shared_pipeline(), c);
    for (const char* f : {"report.json", "knn.seed0.run", "knn.seed1.run", "feedback.seed0.json", "feedback.seed1.json"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    const auto report = nlohmann::json::parse(read_file(dir / "report.json"));
    EXPECT_EQ(report["seeds"].size(), 2u);
    EXPECT_NEAR(report["aggregate"]["ndcg@20"].get<double>(), res.aggregate().ndcg_20, 1e-15);
    for (const char* key : {"retrieval", "expansion", "finetune", "rerank"}) EXPECT_TRUE(report["timing"].contains(key));
    std::filesystem::remove_all(dir);
}

TEST(Experiment, MacroAverageOverSeeds) {
    log::ScopedCapture quiet;
    auto c = config(Method::bm25qe);
    c.seeds = {0, 1, 2};
    const auto res = run_experiment(shared_pipeline(), c);
    double sum = 0.0;
    for (const auto& s : res.seeds) sum += s.report.aggregate().ndcg_20;
    EXPECT_NEAR(res.aggregate().ndcg_20, sum / 3.0, 1e-15);
}

TEST(Experiment, PipelineMismatchIsRejected) {
    auto c = config(Method::bm25qe);
    c.pipeline.min_judged = 5;
    EXPECT_THROW(run_experiment(shared_pipeline(), c), PreconditionError);
}

TEST(Experiment, FeedbackFreeBaselineIgnoresExpansion) {
    log::ScopedCapture quiet;
    const auto res = run_experiment(shared_pipeline(), config(Method::bm25));
    const auto& p = shared_pipeline();
    for (const auto& o : res.seeds[0].outcomes) {
        const auto expect = p.first_stage(o.query_id).without(o.feedback.all_ids()).top(1000);
        EXPECT_EQ(o.ranking, expect);
    }
}

TEST(Sweep, GridShapeAndExpansionTermCounts) {
    log::ScopedCapture quiet;
    auto c = config(Method::bm25qe);
    const auto cells = sweep_expansion(shared_pipeline(), c, {4, 8}, {2});
    ASSERT_EQ(cells.size(), 2u);
    EXPECT_EQ(cells[0].e, lexical::ExpansionCount(4));
    EXPECT_EQ(cells[1].e, lexical::ExpansionCount(8));
    const auto more = sweep_expansion(shared_pipeline(), c, {4, std::nullopt}, {2});
    EXPECT_GE(more[1].mean_expansion_terms, more[0].mean_expansion_terms);
    EXPECT_LE(more[0].mean_expansion_terms, 8.0);
    const auto csv = sweep_csv(cells);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Report, CsvExportOneRowPerReport) {
    log::ScopedCapture quiet;
    const auto a = run_experiment(shared_pipeline(), config(Method::bm25qe)).to_json();
    const auto b = run_experiment(shared_pipeline(), config(Method::knn)).to_json();
    const auto csv = reports_csv({a, b});
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "dataset,method,k,e,ndcg@20,recall@100,recall@1000");
    EXPECT_NE(csv.find("synthetic,knn,4,16,"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Pipeline, InfeasibleQueriesAreFilteredWithWarning) {
    log::ScopedCapture cap;
    PipelineOptions opts;
    opts.min_judged = 40;
    synthetic::SyntheticSpec spec;
    spec.num_docs = 800;
    spec.num_queries = 10;
    spec.relevant_per_query = 35;
    const Pipeline p(from_synthetic(synthetic::generate(spec)), opts);
    EXPECT_TRUE(p.eligible_queries().empty());
    EXPECT_FALSE(cap.messages().empty());
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
    std::vector<int> hit(100, 0);
    parallel_for(hit.size(), 8, [&](std::size_t i) { hit[i]++; });
    for (int h : hit) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) { if (i == 7) throw IntegrityError("boom"); }), IntegrityError);
}

TEST(Pipeline, ModelCacheSeparatesLexicalFeatureVariants) {
    log::ScopedCapture quiet;
    const auto& p = shared_pipeline();
    auto c = config(Method::ce_zeroshot);
    const auto split = make_splits(p.eligible_queries(), 0);
    const auto a = base_scorer(p, c, split);
    c.original_query_lexical_feature = true;
    EXPECT_NE(base_scorer(p, c, split), a);
    c.original_query_lexical_feature = false;
    EXPECT_EQ(base_scorer(p, c, split), a);
}
