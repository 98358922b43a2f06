#pragma once

// Batch experiments: first-stage retrieval, simulated feedback, expansion and
// second retrieval, optional scorer fine-tuning, re-ranking and residual
// evaluation, repeated over shuffled query splits.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedrank/corpus_io.hpp"
#include "feedrank/embedder.hpp"
#include "feedrank/error.hpp"
#include "feedrank/feedback.hpp"
#include "feedrank/fusion_eval.hpp"
#include "feedrank/knn_reranker.hpp"
#include "feedrank/lexical.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"
#include "feedrank/scorer/features.hpp"
#include "feedrank/scorer/maml.hpp"
#include "feedrank/scorer/mlp.hpp"
#include "feedrank/scorer/training.hpp"
#include "feedrank/synthetic.hpp"

namespace feedrank::experiment {

// --- Methods ------------------------------------------------------------------

enum class Method { bm25, bm25qe, knn, ce_zeroshot, ce_queryft, ce_maml_queryft, fusion_knn_bm25qe, fusion_ce_bm25qe };

inline constexpr std::array<std::pair<Method, std::string_view>, 8> kMethodNames = {{
    {Method::bm25, "bm25"},
    {Method::bm25qe, "bm25qe"},
    {Method::knn, "knn"},
    {Method::ce_zeroshot, "ce_zeroshot"},
    {Method::ce_queryft, "ce_queryft"},
    {Method::ce_maml_queryft, "ce_maml_queryft"},
    {Method::fusion_knn_bm25qe, "fusion_knn_bm25qe"},
    {Method::fusion_ce_bm25qe, "fusion_ce_bm25qe"},
}};

inline Method parse_method(std::string_view s) {
    for (const auto& [m, name] : kMethodNames)
        if (name == s) return m;
    throw PreconditionError("unknown method '" + std::string(s) + "'");
}

inline std::string to_string(Method m) {
    for (const auto& [mm, name] : kMethodNames)
        if (mm == m) return std::string(name);
    return "?";
}

inline std::vector<Method> all_methods() {
    std::vector<Method> out;
    for (const auto& [m, _] : kMethodNames) out.push_back(m);
    return out;
}

inline bool uses_scorer(Method m) {
    return m == Method::ce_zeroshot || m == Method::ce_queryft || m == Method::ce_maml_queryft ||
           m == Method::fusion_ce_bm25qe;
}

inline bool uses_finetune(Method m) {
    return m == Method::ce_queryft || m == Method::ce_maml_queryft || m == Method::fusion_ce_bm25qe;
}

enum class Pretrain { maml, supervised };

inline Pretrain parse_pretrain(std::string_view s) {
    if (s == "maml") return Pretrain::maml;
    if (s == "supervised") return Pretrain::supervised;
    throw PreconditionError("unknown pretraining mode '" + std::string(s) + "'");
}

inline std::string to_string(Pretrain p) { return p == Pretrain::maml ? "maml" : "supervised"; }

// --- Configuration ------------------------------------------------------------

struct ScorerConfig {
    std::size_t hidden_dim = 16;
    std::uint64_t init_seed = 0;
    /// Generic relevance training that produces the zero-shot scorer.
    double base_lr = 0.5;
    std::size_t base_epochs = 10;
    /// Per-query fine-tuning grid; the validation split picks (lr, steps).
    std::vector<double> finetune_lrs = {2e-3, 2e-4, 2e-5};
    std::size_t max_finetune_steps = 8;
    bool full_finetune = false;
    Pretrain pretrain = Pretrain::maml;
    scorer::MamlOptions maml{};
    scorer::SupervisedOptions supervised{};

    scorer::TrainableMask finetune_mask() const {
        return full_finetune ? scorer::TrainableMask::all() : scorer::TrainableMask::bias_only();
    }
};

/// Where the data comes from: files on disk or the synthetic generator.
struct DatasetConfig {
    std::string name = "synthetic";
    std::string corpus;
    std::string queries;
    std::string qrels;
    std::string embeddings;
    CorpusFormat format = CorpusFormat::jsonl;
    std::string query_field = "text";
    /// Used when `embeddings` is empty: hashed bag-of-words vectors.
    std::size_t hash_dim = 256;
    std::uint64_t hash_seed = 0;
    std::optional<synthetic::SyntheticSpec> synthetic = synthetic::SyntheticSpec{};
};

/// Settings that shape the shared first-stage state.
struct PipelineOptions {
    GradePolicy policy{};
    lexical::Bm25Params bm25{};
    std::size_t first_stage_depth = 1000;
    std::size_t min_judged = 32;
    bool dedup_feedback = false;
    /// Grade-0 judgments added per query below `augment_rank_threshold`; 0 disables.
    std::size_t augment_negatives = 0;
    std::size_t augment_rank_threshold = 100;

    friend bool operator==(const PipelineOptions&, const PipelineOptions&) = default;
};

struct ExperimentConfig {
    DatasetConfig dataset{};
    PipelineOptions pipeline{};
    Method method = Method::bm25qe;
    std::size_t k = 8;
    lexical::ExpansionCount e = 16;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    lexical::ExtractOptions extract{};
    std::size_t candidate_depth = 1000;
    /// Scorer's lexical feature: the candidates' second-stage (expanded query)
    /// BM25 score, or with this set, their BM25 score for the original query.
    bool original_query_lexical_feature = false;
    bool knn_query_only = false;
    ScorerConfig scorer{};
    double rrf_c = eval::kDefaultRrfConstant;
    std::string output_dir;
    std::size_t threads = 0;

    void validate() const {
        if (k != 2 && k != 4 && k != 8) throw PreconditionError("k must be 2, 4 or 8, got " + std::to_string(k));
        if (e && *e != 4 && *e != 8 && *e != 16 && *e != 32 && *e != 64)
            throw PreconditionError("e must be 4, 8, 16, 32, 64 or all, got " + std::to_string(*e));
        if (seeds.empty()) throw PreconditionError("at least one seed is required");
        if (candidate_depth == 0 || pipeline.first_stage_depth == 0) throw PreconditionError("depths must be positive");
        if (!(rrf_c > 0.0)) throw PreconditionError("rrf constant must be positive");
        if (scorer.hidden_dim == 0) throw PreconditionError("hidden_dim must be positive");
        if (uses_finetune(method) && (scorer.finetune_lrs.empty() || scorer.max_finetune_steps == 0))
            throw PreconditionError("fine-tuning grid is empty");
    }
};

// JSON keys mirror the CLI flag names.

inline nlohmann::json to_json(const synthetic::SyntheticSpec& s) {
    return {{"num_docs", s.num_docs},
            {"num_queries", s.num_queries},
            {"relevant_per_query", s.relevant_per_query},
            {"subtopics", s.subtopics},
            {"core_words", s.core_words},
            {"subtopic_words", s.subtopic_words},
            {"background_words", s.background_words},
            {"dim", s.dim},
            {"distractor_topicality", s.distractor_topicality},
            {"facets_per_topic", s.facets_per_topic},
            {"facets", s.facets},
            {"core_mention_prob", s.core_mention_prob},
            {"subtopic_share", s.subtopic_share},
            {"embedding_noise", s.embedding_noise},
            {"seed", s.seed}};
}

inline synthetic::SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    synthetic::SyntheticSpec s;
    s.num_docs = j.value("num_docs", s.num_docs);
    s.num_queries = j.value("num_queries", s.num_queries);
    s.relevant_per_query = j.value("relevant_per_query", s.relevant_per_query);
    s.subtopics = j.value("subtopics", s.subtopics);
    s.core_words = j.value("core_words", s.core_words);
    s.subtopic_words = j.value("subtopic_words", s.subtopic_words);
    s.background_words = j.value("background_words", s.background_words);
    s.dim = j.value("dim", s.dim);
    s.distractor_topicality = j.value("distractor_topicality", s.distractor_topicality);
    s.facets_per_topic = j.value("facets_per_topic", s.facets_per_topic);
    s.facets = j.value("facets", s.facets);
    s.core_mention_prob = j.value("core_mention_prob", s.core_mention_prob);
    s.subtopic_share = j.value("subtopic_share", s.subtopic_share);
    s.embedding_noise = j.value("embedding_noise", s.embedding_noise);
    s.seed = j.value("seed", s.seed);
    return s;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json ds = {{"name", c.dataset.name},
                         {"corpus", c.dataset.corpus},
                         {"queries", c.dataset.queries},
                         {"qrels", c.dataset.qrels},
                         {"embeddings", c.dataset.embeddings},
                         {"format", c.dataset.format == CorpusFormat::jsonl ? "jsonl" : "trec"},
                         {"query_field", c.dataset.query_field},
                         {"hash_dim", c.dataset.hash_dim},
                         {"hash_seed", c.dataset.hash_seed}};
    ds["synthetic"] = c.dataset.synthetic ? to_json(*c.dataset.synthetic) : nlohmann::json(nullptr);
    const auto& s = c.scorer;
    nlohmann::json sc = {{"hidden_dim", s.hidden_dim},
                         {"init_seed", s.init_seed},
                         {"base_lr", s.base_lr},
                         {"base_epochs", s.base_epochs},
                         {"finetune_lrs", s.finetune_lrs},
                         {"max_finetune_steps", s.max_finetune_steps},
                         {"full_finetune", s.full_finetune},
                         {"pretrain", to_string(s.pretrain)},
                         {"maml",
                          {{"inner_lr", s.maml.inner_lr},
                           {"outer_lr", s.maml.outer_lr},
                           {"inner_steps", s.maml.inner_steps},
                           {"epochs", s.maml.epochs},
                           {"order", s.maml.order == scorer::MamlOrder::second_order ? "second_order" : "first_order"},
                           {"seed", s.maml.seed}}},
                         {"supervised",
                          {{"lr", s.supervised.lr},
                           {"epochs", s.supervised.epochs},
                           {"seed", s.supervised.seed},
                           {"batch_size", s.supervised.batch_size}}}};
    const auto& p = c.pipeline;
    return {{"dataset", ds},
            {"grade_policy", p.policy},
            {"k1", p.bm25.k1},
            {"b", p.bm25.b},
            {"first_stage_depth", p.first_stage_depth},
            {"min_judged", p.min_judged},
            {"dedup_feedback", p.dedup_feedback},
            {"augment_negatives", p.augment_negatives},
            {"augment_rank_threshold", p.augment_rank_threshold},
            {"method", to_string(c.method)},
            {"k", c.k},
            {"e", lexical::to_string(c.e)},
            {"seeds", c.seeds},
            {"min_tf", c.extract.min_tf},
            {"min_df", c.extract.min_df},
            {"candidate_depth", c.candidate_depth},
            {"original_query_lexical_feature", c.original_query_lexical_feature},
            {"knn_query_only", c.knn_query_only},
            {"scorer", sc},
            {"rrf_c", c.rrf_c},
            {"output_dir", c.output_dir},
            {"threads", c.threads}};
}

/// Missing keys keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        auto& ds = c.dataset;
        ds.name = d.value("name", ds.name);
        ds.corpus = d.value("corpus", ds.corpus);
        ds.queries = d.value("queries", ds.queries);
        ds.qrels = d.value("qrels", ds.qrels);
        ds.embeddings = d.value("embeddings", ds.embeddings);
        if (d.contains("format")) ds.format = parse_corpus_format(d.at("format").get<std::string>());
        ds.query_field = d.value("query_field", ds.query_field);
        ds.hash_dim = d.value("hash_dim", ds.hash_dim);
        ds.hash_seed = d.value("hash_seed", ds.hash_seed);
        if (d.contains("synthetic"))
            ds.synthetic = d.at("synthetic").is_null() ? std::nullopt
                                                       : std::optional(synthetic_spec_from_json(d.at("synthetic")));
        else if (!ds.corpus.empty())
            ds.synthetic.reset();
    }
    auto& p = c.pipeline;
    if (j.contains("grade_policy")) p.policy = j.at("grade_policy").get<GradePolicy>();
    p.bm25.k1 = j.value("k1", p.bm25.k1);
    p.bm25.b = j.value("b", p.bm25.b);
    p.first_stage_depth = j.value("first_stage_depth", p.first_stage_depth);
    p.min_judged = j.value("min_judged", p.min_judged);
    p.dedup_feedback = j.value("dedup_feedback", p.dedup_feedback);
    p.augment_negatives = j.value("augment_negatives", p.augment_negatives);
    p.augment_rank_threshold = j.value("augment_rank_threshold", p.augment_rank_threshold);
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    c.k = j.value("k", c.k);
    if (j.contains("e")) {
        const auto& e = j.at("e");
        c.e = e.is_string() ? lexical::parse_expansion_count(e.get<std::string>()) : lexical::ExpansionCount(e.get<std::size_t>());
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.extract.min_tf = j.value("min_tf", c.extract.min_tf);
    c.extract.min_df = j.value("min_df", c.extract.min_df);
    c.candidate_depth = j.value("candidate_depth", c.candidate_depth);
    c.original_query_lexical_feature = j.value("original_query_lexical_feature", c.original_query_lexical_feature);
    c.knn_query_only = j.value("knn_query_only", c.knn_query_only);
    if (j.contains("scorer")) {
        const auto& s = j.at("scorer");
        auto& sc = c.scorer;
        sc.hidden_dim = s.value("hidden_dim", sc.hidden_dim);
        sc.init_seed = s.value("init_seed", sc.init_seed);
        sc.base_lr = s.value("base_lr", sc.base_lr);
        sc.base_epochs = s.value("base_epochs", sc.base_epochs);
        if (s.contains("finetune_lrs")) sc.finetune_lrs = s.at("finetune_lrs").get<std::vector<double>>();
        sc.max_finetune_steps = s.value("max_finetune_steps", sc.max_finetune_steps);
        sc.full_finetune = s.value("full_finetune", sc.full_finetune);
        if (s.contains("pretrain")) sc.pretrain = parse_pretrain(s.at("pretrain").get<std::string>());
        if (s.contains("maml")) {
            const auto& m = s.at("maml");
            sc.maml.inner_lr = m.value("inner_lr", sc.maml.inner_lr);
            sc.maml.outer_lr = m.value("outer_lr", sc.maml.outer_lr);
            sc.maml.inner_steps = m.value("inner_steps", sc.maml.inner_steps);
            sc.maml.epochs = m.value("epochs", sc.maml.epochs);
            if (m.contains("order")) sc.maml.order = scorer::parse_maml_order(m.at("order").get<std::string>());
            sc.maml.seed = m.value("seed", sc.maml.seed);
            if (m.contains("outer_optimizer") && m.at("outer_optimizer") != "sgd")
                throw PreconditionError("only the sgd outer optimizer is supported");
        }
        if (s.contains("supervised")) {
            const auto& m = s.at("supervised");
            sc.supervised.lr = m.value("lr", sc.supervised.lr);
            sc.supervised.epochs = m.value("epochs", sc.supervised.epochs);
            sc.supervised.seed = m.value("seed", sc.supervised.seed);
            sc.supervised.batch_size = m.value("batch_size", sc.supervised.batch_size);
        }
    }
    c.rrf_c = j.value("rrf_c", c.rrf_c);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.threads = j.value("threads", c.threads);
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open config '" + path + "'");
    try {
        return config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("config '") + path + "': " + ex.what(), 0);
    }
}

// --- Data -----------------------------------------------------------------------

struct Dataset {
    std::vector<Document> docs;
    std::vector<Query> queries;
    JudgmentSet qrels;
    EmbeddingStore store{8};
};

inline Dataset from_synthetic(synthetic::SyntheticDataset s) {
    return {std::move(s.docs), std::move(s.queries), std::move(s.qrels), std::move(s.store)};
}

inline Dataset load_dataset(const DatasetConfig& cfg) {
    if (cfg.corpus.empty()) {
        if (!cfg.synthetic) throw PreconditionError("dataset needs a corpus path or a synthetic spec");
        return from_synthetic(synthetic::generate(*cfg.synthetic));
    }
    Dataset d;
    d.docs = load_corpus(cfg.corpus, cfg.format);
    d.queries = load_queries(cfg.queries, cfg.query_field);
    d.qrels = load_qrels(cfg.qrels);
    if (!cfg.embeddings.empty()) {
        d.store = load_embeddings(cfg.embeddings);
    } else {
        log::warn("no embeddings given; using hashed bag-of-words vectors (dim " + std::to_string(cfg.hash_dim) + ")");
        d.store = hash_embedding_store(d.docs, d.queries, cfg.hash_dim, cfg.hash_seed);
    }
    std::unordered_set<std::string> ids;
    for (const auto& doc : d.docs) ids.insert(doc.id);
    warn_dangling_judgments(d.qrels, ids);
    return d;
}

// --- Parallelism ------------------------------------------------------------------

/// Calls fn(i) for i in [0, n) on up to `threads` workers (0: hardware
/// concurrency). Results must go to per-index slots; order of execution is
/// unspecified. The first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mu);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// --- Pipeline ---------------------------------------------------------------------

/// Shared read-only state: index, judgments (augmented), first-stage rankings
/// and the queries that pass the judged-document filter. Trained base scorers
/// are cached per configuration.
class Pipeline {
public:
    Pipeline(Dataset data, PipelineOptions opts, std::size_t threads = 0)
        : data_(std::move(data)), opts_(opts), index_(lexical::InvertedIndex::build(data_.docs)) {
        for (const auto& d : data_.docs) text_.emplace(d.id, d.text);
        for (const auto& q : data_.queries) query_by_id_.emplace(q.id, q);
        std::vector<std::string> qids;
        for (const auto& q : data_.queries) qids.push_back(q.id);
        std::vector<Ranking> rankings(qids.size());
        std::vector<double> ms(qids.size());
        parallel_for(qids.size(), threads, [&](std::size_t i) {
            eval::StageTimings scratch;
            auto [r, t] = eval::time_stage(scratch, eval::stage::retrieval, [&] {
                return lexical::bm25_search(index_, lexical::WeightedQuery::from_text(data_.queries[i].text),
                                            opts_.first_stage_depth, opts_.bm25, qids[i]);
            });
            rankings[i] = std::move(r);
            ms[i] = t;
        });
        qrels_ = data_.qrels;
        for (std::size_t i = 0; i < qids.size(); ++i) {
            if (opts_.augment_negatives > 0)
                qrels_ = augment_negatives(qrels_, rankings[i], opts_.augment_negatives, opts_.augment_rank_threshold);
            first_stage_ms_.emplace(qids[i], ms[i]);
            first_stage_.emplace(qids[i], std::move(rankings[i]));
        }
        eligible_ = filter_queries(qids, qrels_, first_stage_, opts_.min_judged, opts_.policy);
        if (eligible_.size() < qids.size())
            log::warn(std::to_string(qids.size() - eligible_.size()) + " of " + std::to_string(qids.size()) +
                      " queries have fewer than " + std::to_string(opts_.min_judged) +
                      " judged relevant and non-relevant documents in the first stage; excluded");
    }

    const Dataset& data() const noexcept { return data_; }
    const PipelineOptions& options() const noexcept { return opts_; }
    const lexical::InvertedIndex& index() const noexcept { return index_; }
    const EmbeddingStore& store() const noexcept { return data_.store; }
    const JudgmentSet& qrels() const noexcept { return qrels_; }
    const std::vector<std::string>& eligible_queries() const noexcept { return eligible_; }
    const std::unordered_map<std::string, std::string>& texts() const noexcept { return text_; }

    const Query& query(const std::string& id) const {
        auto it = query_by_id_.find(id);
        if (it == query_by_id_.end()) throw PreconditionError("unknown query '" + id + "'");
        return it->second;
    }
    const Ranking& first_stage(const std::string& id) const { return first_stage_.at(id); }
    double first_stage_ms(const std::string& id) const { return first_stage_ms_.at(id); }

    /// Builds `make()` once per key; concurrent callers for the same key wait.
    scorer::ScorerParams cached_model(const std::string& key, const std::function<scorer::ScorerParams()>& make) const {
        std::lock_guard lock(cache_mu_);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        return cache_.emplace(key, make()).first->second;
    }

private:
    Dataset data_;
    PipelineOptions opts_;
    lexical::InvertedIndex index_;
    JudgmentSet qrels_;
    std::unordered_map<std::string, std::string> text_;
    std::unordered_map<std::string, Query> query_by_id_;
    std::map<std::string, Ranking> first_stage_;
    std::map<std::string, double> first_stage_ms_;
    std::vector<std::string> eligible_;
    mutable std::mutex cache_mu_;
    mutable std::map<std::string, scorer::ScorerParams> cache_;
};

// --- Per-query preparation ----------------------------------------------------------

/// Everything a method needs for one query after feedback and expansion.
struct QueryContext {
    const Query* query = nullptr;
    FeedbackSet feedback;
    lexical::WeightedQuery expanded;
    Ranking second_stage;
    ResidualCollection residual;
    /// Second-stage documents scored for the scorer's lexical feature.
    Ranking lexical_reference;
    double expansion_ms = 0.0;

    scorer::FeatureBuilder features(const EmbeddingStore& store) const {
        return scorer::FeatureBuilder(store, *query, lexical_reference);
    }
};

/// `candidates` rescored with BM25 for the unexpanded query (0 when no term matches).
inline Ranking rescore_original(const lexical::InvertedIndex& index, std::string_view query_text, const Ranking& candidates,
                                const lexical::Bm25Params& params) {
    const auto original = lexical::bm25_search(index, lexical::WeightedQuery::from_text(query_text), index.doc_count(),
                                               params, candidates.query_id());
    std::unordered_map<std::string_view, double> score;
    for (const auto& item : original) score.emplace(item.doc_id, item.score);
    std::vector<ScoredDoc> items;
    items.reserve(candidates.size());
    for (const auto& item : candidates) {
        auto it = score.find(item.doc_id);
        items.push_back({item.doc_id, it == score.end() ? 0.0 : it->second});
    }
    return Ranking::from_scores(candidates.query_id(), std::move(items));
}

/// Selects feedback from the first stage, expands, retrieves again and
/// residualizes. Throws InfeasibleQueryError when feedback cannot be filled.
inline QueryContext prepare_query(const Pipeline& p, const std::string& qid, const ExperimentConfig& cfg) {
    QueryContext ctx;
    ctx.query = &p.query(qid);
    Ranking source = p.first_stage(qid);
    if (p.options().dedup_feedback) source = drop_duplicate_texts(source, p.texts());
    FeedbackOptions fopts;
    fopts.in_corpus = [&p](std::string_view d) { return p.index().internal_id(d).has_value(); };
    ctx.feedback = select_feedback(source, p.qrels(), cfg.k, p.options().policy, fopts);
    eval::StageTimings scratch;
    auto [second, ms] = eval::time_stage(scratch, eval::stage::expansion, [&] {
        ctx.expanded = lexical::expand_query(p.index(), ctx.query->text, ctx.feedback.relevant, cfg.e, cfg.extract);
        return lexical::bm25_search(p.index(), ctx.expanded, cfg.candidate_depth + ctx.feedback.size(), p.options().bm25, qid);
    });
    ctx.expansion_ms = ms;
    ctx.residual = residualize(p.qrels(), second, ctx.feedback);
    ctx.residual.ranking = ctx.residual.ranking.top(cfg.candidate_depth);
    ctx.second_stage = std::move(second);
    ctx.lexical_reference = cfg.original_query_lexical_feature
                                ? rescore_original(p.index(), ctx.query->text, ctx.second_stage, p.options().bm25)
                                : ctx.second_stage;
    return ctx;
}

// --- Scorer models ------------------------------------------------------------------

namespace detail {

inline std::string scorer_key(const ExperimentConfig& cfg, std::uint64_t seed, std::string_view kind) {
    nlohmann::json j = to_json(cfg)["scorer"];
    j["seed"] = seed;
    j["kind"] = kind;
    j["k"] = cfg.k;
    j["e"] = lexical::to_string(cfg.e);
    j["candidate_depth"] = cfg.candidate_depth;
    j["original_query_lexical_feature"] = cfg.original_query_lexical_feature;
    j["min_tf"] = cfg.extract.min_tf;
    j["min_df"] = cfg.extract.min_df;
    return j.dump();
}

}  // namespace detail

/// All judged documents among a query's second-stage candidates as one
/// labelled task, with the same features the re-ranker sees at test time.
inline std::optional<scorer::TrainTask> judged_task(const Pipeline& p, const ExperimentConfig& cfg, const std::string& qid) {
    QueryContext ctx;
    try {
        ctx = prepare_query(p, qid, cfg);
    } catch (const InfeasibleQueryError& ex) {
        log::warn(std::string("base training: ") + ex.what());
        return std::nullopt;
    }
    const auto fb = ctx.features(p.store());
    scorer::TrainTask t{qid, {}};
    const auto& judged = p.qrels().for_query(qid);
    for (const auto& item : ctx.second_stage.top(cfg.candidate_depth)) {
        auto g = judged.find(item.doc_id);
        if (g == judged.end()) continue;
        t.examples.push_back({fb(item.doc_id), p.options().policy.is_relevant(g->second) ? 1.0 : 0.0});
    }
    return t;
}

/// Zero-shot scorer: seeded init, then full-parameter training on every
/// judged second-stage candidate of the train split. Never sees test queries.
inline scorer::ScorerParams base_scorer(const Pipeline& p, const ExperimentConfig& cfg, const SplitAssignment& split) {
    return p.cached_model(detail::scorer_key(cfg, split.shuffle_seed, "base"), [&] {
        const scorer::ScorerShape shape{scorer::feature_dim(p.store().dim()), cfg.scorer.hidden_dim};
        auto params = scorer::ScorerParams::init(shape, cfg.scorer.init_seed);
        std::vector<scorer::TrainTask> tasks;
        for (const auto& qid : split.train)
            if (auto t = judged_task(p, cfg, qid)) tasks.push_back(std::move(*t));
        if (tasks.empty()) throw PreconditionError("no usable train queries");
        params = scorer::train_supervised(params, tasks, {cfg.scorer.base_lr, cfg.scorer.base_epochs, split.shuffle_seed, 32},
                                          scorer::TrainableMask::all());
        params.set_mask(cfg.scorer.finetune_mask());
        return params;
    });
}

/// Feedback tasks (second-stage features) for the given queries; infeasible
/// queries are skipped.
inline std::vector<scorer::TrainTask> feedback_tasks(const Pipeline& p, const ExperimentConfig& cfg,
                                                     const std::vector<std::string>& qids) {
    std::vector<scorer::TrainTask> tasks;
    for (const auto& qid : qids) {
        try {
            const auto ctx = prepare_query(p, qid, cfg);
            const auto fb = ctx.features(p.store());
            tasks.push_back(scorer::make_task(ctx.feedback, fb));
        } catch (const InfeasibleQueryError& ex) {
            log::warn(std::string("meta-training: ") + ex.what());
        }
    }
    return tasks;
}

/// Base scorer further pre-trained on train-split feedback tasks with MAML
/// (or plain supervised steps), using the fine-tuning mask.
inline scorer::ScorerParams meta_scorer(const Pipeline& p, const ExperimentConfig& cfg, const SplitAssignment& split) {
    const auto base = base_scorer(p, cfg, split);
    return p.cached_model(detail::scorer_key(cfg, split.shuffle_seed, "meta"), [&] {
        const auto tasks = feedback_tasks(p, cfg, split.train);
        const auto mask = cfg.scorer.finetune_mask();
        scorer::ScorerParams out;
        if (cfg.scorer.pretrain == Pretrain::maml) {
            auto opts = cfg.scorer.maml;
            opts.seed ^= split.shuffle_seed;
            out = scorer::maml_train(base, tasks, opts, mask);
        } else {
            auto opts = cfg.scorer.supervised;
            opts.seed ^= split.shuffle_seed;
            out = scorer::train_supervised(base, tasks, opts, mask);
        }
        out.set_mask(mask);
        return out;
    });
}

/// Feature rows for a fixed candidate list, computed once and scored many times.
struct CandidateFeatures {
    Ranking candidates;
    std::vector<std::vector<double>> rows;

    CandidateFeatures(const Ranking& c, const scorer::FeatureBuilder& fb) : candidates(c) {
        rows.reserve(c.size());
        for (const auto& item : c) rows.push_back(fb(item.doc_id));
    }

    Ranking score(const scorer::ScorerParams& params) const {
        std::vector<ScoredDoc> items;
        items.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) items.push_back({candidates[i].doc_id, scorer::forward(params, rows[i])});
        return Ranking::from_scores(candidates.query_id(), std::move(items));
    }
};

struct FinetuneChoice {
    double lr = 0.0;
    std::size_t steps = 0;
    double validation_ndcg = 0.0;
};

inline nlohmann::json to_json(const FinetuneChoice& c) {
    return {{"lr", c.lr}, {"steps", c.steps}, {"validation_ndcg@20", c.validation_ndcg}};
}

/// Grid search over (lr, steps) on the validation split: each query is
/// fine-tuned from `init` and its residual nDCG@20 recorded after every step.
/// The highest mean wins; ties keep the earlier lr and fewer steps.
inline FinetuneChoice select_finetune(const Pipeline& p, const ExperimentConfig& cfg, const SplitAssignment& split,
                                      const scorer::ScorerParams& init) {
    const auto& lrs = cfg.scorer.finetune_lrs;
    const std::size_t max_steps = cfg.scorer.max_finetune_steps;
    const auto mask = cfg.scorer.finetune_mask();
    std::vector<std::vector<double>> per_query(split.valid.size());
    std::vector<char> ok(split.valid.size(), 0);
    parallel_for(split.valid.size(), cfg.threads, [&](std::size_t qi) {
        QueryContext ctx;
        try {
            ctx = prepare_query(p, split.valid[qi], cfg);
        } catch (const InfeasibleQueryError& ex) {
            log::warn(std::string("validation: ") + ex.what());
            return;
        }
        const auto fb = ctx.features(p.store());
        const auto task = scorer::make_task(ctx.feedback, fb);
        const CandidateFeatures cf(ctx.residual.ranking, fb);
        const auto& grades = ctx.residual.qrels.for_query(ctx.query->id);
        auto& scores = per_query[qi];
        scores.assign(lrs.size() * max_steps, 0.0);
        for (std::size_t li = 0; li < lrs.size(); ++li) {
            auto params = init;
            for (std::size_t s = 0; s < max_steps; ++s) {
                params = scorer::query_finetune(params, task, lrs[li], 1, mask);
                scores[li * max_steps + s] = eval::ndcg_at_k(cf.score(params), grades, 20);
            }
        }
        ok[qi] = 1;
    });
    std::vector<double> mean(lrs.size() * max_steps, 0.0);
    std::size_t n = 0;
    for (std::size_t qi = 0; qi < per_query.size(); ++qi) {
        if (!ok[qi]) continue;
        ++n;
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += per_query[qi][i];
    }
    if (n == 0) {
        log::warn("no usable validation queries; fine-tuning with lr " + format_double(lrs.front()) + " for 1 step");
        return {lrs.front(), 1, 0.0};
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < mean.size(); ++i)
        if (mean[i] > mean[best]) best = i;
    return {lrs[best / max_steps], best % max_steps + 1, mean[best] / static_cast<double>(n)};
}

// --- Results ------------------------------------------------------------------------

struct QueryOutcome {
    std::string query_id;
    FeedbackSet feedback;
    /// The evaluated ranking and, for fusion, its two components.
    Ranking ranking;
    std::map<std::string, Ranking> components;
    JudgmentSet::DocGrades grades;
    std::size_t expansion_terms = 0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    SplitAssignment split;
    std::optional<FinetuneChoice> finetune;
    eval::MetricReport report;
    std::vector<QueryOutcome> outcomes;
    std::vector<std::string> skipped;

    /// TREC run text of the evaluated rankings, queries in id order.
    std::string run_file(std::string_view tag) const {
        std::ostringstream os;
        for (const auto& o : outcomes) write_run(os, o.ranking, tag);
        return os.str();
    }

    std::string component_run_file(const std::string& component) const {
        std::ostringstream os;
        for (const auto& o : outcomes) write_run(os, o.components.at(component), component);
        return os.str();
    }
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<SeedResult> seeds;

    /// Mean over seeds of the per-seed query means.
    eval::QueryMetrics aggregate() const {
        eval::QueryMetrics m;
        if (seeds.empty()) return m;
        for (const auto& s : seeds) {
            const auto a = s.report.aggregate();
            m.ndcg_20 += a.ndcg_20;
            m.recall_100 += a.recall_100;
            m.recall_1000 += a.recall_1000;
        }
        const double n = static_cast<double>(seeds.size());
        m.ndcg_20 /= n;
        m.recall_100 /= n;
        m.recall_1000 /= n;
        return m;
    }

    eval::StageTimings timing() const {
        eval::StageTimings t;
        for (const auto& s : seeds) t.merge(s.report.timing);
        return t;
    }

    nlohmann::json to_json() const {
        nlohmann::json per_seed = nlohmann::json::array();
        for (const auto& s : seeds) {
            nlohmann::json js = s.report.to_json();
            js["seed"] = s.seed;
            js["split"] = s.split;
            js["skipped"] = s.skipped;
            if (s.finetune) js["finetune"] = experiment::to_json(*s.finetune);
            per_seed.push_back(std::move(js));
        }
        return {{"config", experiment::to_json(config)},
                {"aggregate", eval::MetricReport::metrics_json(aggregate())},
                {"timing", timing().to_json()},
                {"seeds", per_seed}};
    }

    /// Writes report.json plus, per seed, the run file, component run files
    /// and feedback sets under `dir`.
    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        auto put = [&](const std::filesystem::path& path, const std::string& content) {
            std::ofstream out(path, std::ios::binary);
            if (!out) throw Error("cannot write '" + path.string() + "'");
            out << content;
        };
        put(dir / "report.json", to_json().dump(2) + "\n");
        const std::string tag = to_string(config.method);
        for (const auto& s : seeds) {
            const std::string suffix = "seed" + std::to_string(s.seed);
            put(dir / (tag + "." + suffix + ".run"), s.run_file(tag));
            if (!s.outcomes.empty())
                for (const auto& [name, _] : s.outcomes.front().components)
                    put(dir / (name + "." + suffix + ".run"), s.component_run_file(name));
            nlohmann::json fb = nlohmann::json::array();
            for (const auto& o : s.outcomes) fb.push_back(o.feedback);
            put(dir / ("feedback." + suffix + ".json"), fb.dump(2) + "\n");
        }
    }
};

// --- Running ----------------------------------------------------------------------

/// Feedback ids must be absent from both the evaluated ranking and its grades.
inline void check_residual(const QueryOutcome& o) {
    for (const auto& id : o.feedback.all_ids()) {
        if (o.ranking.contains(id) || o.grades.contains(id))
            throw IntegrityError("query '" + o.query_id + "': feedback document '" + id + "' leaked into evaluation");
        for (const auto& [_, r] : o.components)
            if (r.contains(id))
                throw IntegrityError("query '" + o.query_id + "': feedback document '" + id + "' leaked into a component run");
    }
}

inline SeedResult run_seed(const Pipeline& p, const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedResult res;
    res.seed = seed;
    res.split = make_splits(p.eligible_queries(), seed);
    if (res.split.test.empty()) throw PreconditionError("empty test split");

    std::optional<scorer::ScorerParams> model;
    if (uses_scorer(cfg.method)) {
        model = cfg.method == Method::ce_maml_queryft || cfg.method == Method::fusion_ce_bm25qe
                    ? meta_scorer(p, cfg, res.split)
                    : base_scorer(p, cfg, res.split);
        if (uses_finetune(cfg.method)) res.finetune = select_finetune(p, cfg, res.split, *model);
    }

    const auto& test = res.split.test;
    std::vector<std::optional<QueryOutcome>> outcomes(test.size());
    std::vector<eval::StageTimings> timings(test.size());
    std::vector<std::string> skip_reason(test.size());
    parallel_for(test.size(), cfg.threads, [&](std::size_t i) {
        const auto& qid = test[i];
        auto& t = timings[i];
        QueryContext ctx;
        try {
            ctx = prepare_query(p, qid, cfg);
        } catch (const InfeasibleQueryError& ex) {
            skip_reason[i] = ex.what();
            return;
        }
        t.record(eval::stage::retrieval, p.first_stage_ms(qid));
        t.record(eval::stage::expansion, ctx.expansion_ms);

        QueryOutcome o;
        o.query_id = qid;
        o.feedback = ctx.feedback;
        o.grades = ctx.residual.qrels.for_query(qid);
        o.expansion_terms = ctx.expanded.count(lexical::TermOrigin::expansion);
        const Ranking& candidates = ctx.residual.ranking;
        const auto fb_ids = ctx.feedback.all_ids();

        auto ce = [&] {
            const auto fb = ctx.features(p.store());
            scorer::ScorerParams params = *model;
            if (uses_finetune(cfg.method)) {
                const auto task = scorer::make_task(ctx.feedback, fb);
                params = eval::time_stage(t, eval::stage::finetune, [&] {
                             return scorer::query_finetune(params, task, res.finetune->lr, res.finetune->steps,
                                                           cfg.scorer.finetune_mask());
                         }).first;
            }
            return scorer::ce_rerank(params, candidates, fb);
        };
        auto knn = [&] {
            return knn::knn_rerank(candidates, *ctx.query, ctx.feedback, p.store(), {cfg.knn_query_only});
        };

        switch (cfg.method) {
            case Method::bm25:
                o.ranking = p.first_stage(qid).without(fb_ids).top(cfg.candidate_depth);
                break;
            case Method::bm25qe:
                o.ranking = candidates;
                break;
            case Method::knn:
                o.ranking = eval::time_stage(t, eval::stage::rerank, knn).first;
                break;
            case Method::ce_zeroshot:
            case Method::ce_queryft:
            case Method::ce_maml_queryft:
                o.ranking = eval::time_stage(t, eval::stage::rerank, ce).first;
                break;
            case Method::fusion_knn_bm25qe:
            case Method::fusion_ce_bm25qe: {
                const bool use_knn = cfg.method == Method::fusion_knn_bm25qe;
                Ranking neural = use_knn ? eval::time_stage(t, eval::stage::rerank, knn).first
                                         : eval::time_stage(t, eval::stage::rerank, ce).first;
                o.ranking = eval::rrf({neural, candidates}, cfg.rrf_c);
                o.components.emplace(use_knn ? "knn" : "ce_maml_queryft", std::move(neural));
                o.components.emplace("bm25qe", candidates);
                break;
            }
        }
        check_residual(o);
        outcomes[i] = std::move(o);
    });

    for (std::size_t i = 0; i < test.size(); ++i) {
        if (!outcomes[i]) {
            log::warn("skipping " + skip_reason[i]);
            res.skipped.push_back(test[i]);
            continue;
        }
        res.report.timing.merge(timings[i]);
        res.report.add(test[i], outcomes[i]->ranking, outcomes[i]->grades, p.options().policy.relevant_threshold);
        res.outcomes.push_back(std::move(*outcomes[i]));
    }
    if (res.outcomes.empty()) throw PreconditionError("no feasible test queries for seed " + std::to_string(seed));
    return res;
}

inline ExperimentResult run_experiment(const Pipeline& p, const ExperimentConfig& cfg) {
    cfg.validate();
    if (!(p.options() == cfg.pipeline)) throw PreconditionError("pipeline was built with different first-stage options");
    ExperimentResult out{cfg, {}};
    for (auto seed : cfg.seeds) out.seeds.push_back(run_seed(p, cfg, seed));
    if (!cfg.output_dir.empty()) out.write(cfg.output_dir);
    return out;
}

/// Loads the configured dataset, builds the pipeline and runs.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Pipeline p(load_dataset(cfg.dataset), cfg.pipeline, cfg.threads);
    return run_experiment(p, cfg);
}

// --- Grids --------------------------------------------------------------------------

struct SweepCell {
    lexical::ExpansionCount e;
    std::size_t k = 0;
    double recall_1000 = 0.0;
    double mean_expansion_terms = 0.0;
};

/// Mean recall@1000 of BM25 with expansion for every (e, k) pair.
inline std::vector<SweepCell> sweep_expansion(const Pipeline& p, ExperimentConfig cfg,
                                              const std::vector<lexical::ExpansionCount>& es,
                                              const std::vector<std::size_t>& ks) {
    cfg.method = Method::bm25qe;
    cfg.output_dir.clear();
    std::vector<SweepCell> cells;
    for (const auto& e : es) {
        for (auto k : ks) {
            cfg.e = e;
            cfg.k = k;
            const auto r = run_experiment(p, cfg);
            double terms = 0.0;
            std::size_t n = 0;
            for (const auto& s : r.seeds)
                for (const auto& o : s.outcomes) {
                    terms += static_cast<double>(o.expansion_terms);
                    ++n;
                }
            cells.push_back({e, k, r.aggregate().recall_1000, n ? terms / static_cast<double>(n) : 0.0});
        }
    }
    return cells;
}

inline std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::string out = "e,k,recall@1000,expansion_terms\n";
    for (const auto& c : cells)
        out += lexical::to_string(c.e) + "," + std::to_string(c.k) + "," + format_double(c.recall_1000) + "," +
               format_double(c.mean_expansion_terms) + "\n";
    return out;
}

/// One row per report: dataset, method, k, e and aggregate metrics.
inline std::string reports_csv(const std::vector<nlohmann::json>& reports) {
    std::string out = "dataset,method,k,e,ndcg@20,recall@100,recall@1000\n";
    for (const auto& r : reports) {
        const auto& c = r.at("config");
        const auto& a = r.at("aggregate");
        out += c.at("dataset").at("name").get<std::string>() + "," + c.at("method").get<std::string>() + "," +
               std::to_string(c.at("k").get<std::size_t>()) + "," + c.at("e").get<std::string>() + "," +
               format_double(a.at("ndcg@20").get<double>()) + "," + format_double(a.at("recall@100").get<double>()) +
               "," + format_double(a.at("recall@1000").get<double>()) + "\n";
    }
    return out;
}

}  // namespace feedrank::experiment
