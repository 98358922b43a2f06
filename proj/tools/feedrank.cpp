// feedrank command-line driver.
//
//   feedrank synth --out DIR
//   feedrank experiment run --config cfg.json --method knn --k 4 --out results/
//   feedrank serve --config cfg.json --port 8080

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "feedrank/corpus_io.hpp"
#include "feedrank/embedder.hpp"
#include "feedrank/experiment.hpp"
#include "feedrank/feedback.hpp"
#include "feedrank/knn_reranker.hpp"
#include "feedrank/lexical.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"
#include "feedrank/scorer/mlp.hpp"
#include "feedrank/scorer/training.hpp"
#include "feedrank/service.hpp"
#include "feedrank/synthetic.hpp"

using namespace feedrank;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    out << content;
}

std::string read_text(const std::string& path) {
    auto in = detail::open_input(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<FeedbackSet> read_feedback(const std::string& path) {
    const auto j = json::parse(read_text(path));
    if (j.is_array()) return j.get<std::vector<FeedbackSet>>();
    return {j.get<FeedbackSet>()};
}

/// Flags shared by every command that needs an experiment configuration.
struct ConfigFlags {
    std::string config;
    std::string corpus, queries, qrels, embeddings, format;
    std::string method, e, pretrain, out;
    std::size_t k = 0;
    std::vector<std::uint64_t> seeds;
    std::size_t candidate_depth = 0;
    std::size_t threads = 0;
    bool knn_query_only = false;
    bool full_finetune = false;
    bool original_query_feature = false;

    void add_data(CLI::App* app) {
        app->add_option("--config", config, "JSON experiment configuration");
        app->add_option("--corpus", corpus, "Corpus file (overrides the config)");
        app->add_option("--queries", queries, "Queries JSONL");
        app->add_option("--qrels", qrels, "TREC qrels");
        app->add_option("--embeddings", embeddings, "Embedding TSV; hashed vectors when omitted");
        app->add_option("--format", format, "Corpus format: jsonl or trec");
        app->add_option("--threads", threads, "Worker threads (0: all cores)");
    }

    void add_experiment(CLI::App* app) {
        add_data(app);
        app->add_option("--method", method, "Re-ranking method");
        app->add_option("--k", k, "Feedback documents per label (2, 4 or 8)");
        app->add_option("--e", e, "Expansion terms per document (4..64 or all)");
        app->add_option("--seeds", seeds, "Split seeds");
        app->add_option("--candidate-depth", candidate_depth, "Documents re-ranked per query");
        app->add_option("--pretrain", pretrain, "Meta-model pre-training: maml or supervised");
        app->add_flag("--knn-query-only", knn_query_only, "Drop the feedback term from the kNN score");
        app->add_flag("--full-finetune", full_finetune, "Fine-tune all scorer parameters instead of biases only");
        app->add_flag("--original-query-feature", original_query_feature,
                      "Scorer lexical feature from the unexpanded query");
    }

    experiment::ExperimentConfig build() const {
        experiment::ExperimentConfig cfg = config.empty() ? experiment::ExperimentConfig{} : experiment::load_config(config);
        auto& d = cfg.dataset;
        if (!corpus.empty()) {
            d.corpus = corpus;
            d.synthetic.reset();
            if (d.name == "synthetic") d.name = "custom";
        }
        if (!queries.empty()) d.queries = queries;
        if (!qrels.empty()) d.qrels = qrels;
        if (!embeddings.empty()) d.embeddings = embeddings;
        if (!format.empty()) d.format = parse_corpus_format(format);
        if (!method.empty()) cfg.method = experiment::parse_method(method);
        if (k) cfg.k = k;
        if (!e.empty()) cfg.e = lexical::parse_expansion_count(e);
        if (!seeds.empty()) cfg.seeds = seeds;
        if (candidate_depth) cfg.candidate_depth = candidate_depth;
        if (!pretrain.empty()) cfg.scorer.pretrain = experiment::parse_pretrain(pretrain);
        if (knn_query_only) cfg.knn_query_only = true;
        if (full_finetune) cfg.scorer.full_finetune = true;
        if (original_query_feature) cfg.original_query_lexical_feature = true;
        if (threads) cfg.threads = threads;
        cfg.validate();
        return cfg;
    }
};

experiment::Pipeline make_pipeline(const experiment::ExperimentConfig& cfg) {
    return experiment::Pipeline(experiment::load_dataset(cfg.dataset), cfg.pipeline, cfg.threads);
}

std::string qrels_summary(const JudgmentSet& qrels) {
    std::size_t rel = 0, non = 0;
    for (const auto& q : qrels.query_ids())
        for (const auto& [_, g] : qrels.for_query(q)) (g > 0 ? rel : non)++;
    return std::to_string(qrels.query_ids().size()) + " queries, " + std::to_string(rel) + " relevant and " +
           std::to_string(non) + " non-relevant judgments";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot retrieve and re-rank with relevance feedback"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate a collection and write it in canonical form");
    std::string in_corpus, in_queries, in_qrels, in_format = "jsonl", in_field = "text", in_out;
    ingest->add_option("--corpus", in_corpus, "Corpus (JSONL or TREC text)")->required();
    ingest->add_option("--queries", in_queries, "Queries JSONL")->required();
    ingest->add_option("--qrels", in_qrels, "TREC qrels")->required();
    ingest->add_option("--format", in_format, "jsonl or trec");
    ingest->add_option("--query-field", in_field, "Query text field (dotted path)");
    ingest->add_option("--out", in_out, "Output directory")->required();

    // synth
    auto* synth = app.add_subcommand("synth", "Write a seeded synthetic collection");
    synthetic::SyntheticSpec spec;
    std::string synth_out;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--seed", spec.seed, "Generator seed");
    synth->add_option("--docs", spec.num_docs, "Number of documents");
    synth->add_option("--num-queries", spec.num_queries, "Number of queries");
    synth->add_option("--dim", spec.dim, "Embedding dimension");

    // index
    auto* index = app.add_subcommand("index", "Build or query a BM25 index");
    index->require_subcommand(1);
    auto* index_build = index->add_subcommand("build", "Index a corpus");
    std::string ib_corpus, ib_format = "jsonl", ib_out;
    index_build->add_option("--corpus", ib_corpus, "Corpus file")->required();
    index_build->add_option("--format", ib_format, "jsonl or trec");
    index_build->add_option("--out", ib_out, "Index file")->required();
    auto* index_search = index->add_subcommand("search", "Search an index; writes a TREC run");
    std::string is_index, is_query, is_queries, is_out, is_field = "text";
    std::size_t is_top = 1000;
    lexical::Bm25Params bm25;
    index_search->add_option("--index", is_index, "Index file")->required();
    auto* q_opt = index_search->add_option("--query", is_query, "Single query text");
    index_search->add_option("--queries", is_queries, "Queries JSONL")->excludes(q_opt);
    index_search->add_option("--query-field", is_field, "Query text field");
    index_search->add_option("--top-n", is_top, "Results per query");
    index_search->add_option("--k1", bm25.k1, "BM25 k1");
    index_search->add_option("--b", bm25.b, "BM25 b");
    index_search->add_option("--out", is_out, "Run file (default stdout)");

    // expand
    auto* expand = app.add_subcommand("expand", "Expand a query with terms from relevant documents");
    std::string ex_index, ex_query, ex_e = "16";
    std::vector<std::string> ex_docs;
    expand->add_option("--index", ex_index, "Index file")->required();
    expand->add_option("--query", ex_query, "Query text")->required();
    expand->add_option("--docs", ex_docs, "Relevant document ids")->required();
    expand->add_option("--e", ex_e, "Terms per document (or all)");

    // rerank knn
    auto* rerank = app.add_subcommand("rerank", "Re-rank a run");
    rerank->require_subcommand(1);
    auto* rerank_knn = rerank->add_subcommand("knn", "Nearest-neighbour re-ranking with relevant feedback");
    std::string rk_run, rk_feedback, rk_embeddings, rk_out;
    bool rk_query_only = false;
    rerank_knn->add_option("--run", rk_run, "First-stage run file")->required();
    rerank_knn->add_option("--feedback", rk_feedback, "Feedback JSON (object or array)")->required();
    rerank_knn->add_option("--embeddings", rk_embeddings, "Embedding TSV with query and document vectors")->required();
    rerank_knn->add_flag("--query-only", rk_query_only, "Ignore feedback vectors");
    rerank_knn->add_option("--out", rk_out, "Run file (default stdout)");

    // scorer
    auto* scorer_cmd = app.add_subcommand("scorer", "Train, fine-tune and apply the neural scorer");
    scorer_cmd->require_subcommand(1);
    ConfigFlags sc_flags;
    std::uint64_t sc_split_seed = 0;
    std::string sc_out, sc_params, sc_query;
    double sc_lr = 2e-3;
    std::size_t sc_steps = 8;
    bool sc_bias_only = false;
    auto* train_maml = scorer_cmd->add_subcommand("train-maml", "Base training then MAML on train-split feedback tasks");
    auto* train_sup = scorer_cmd->add_subcommand("train-supervised", "Generic relevance training on the train split");
    for (auto* c : {train_maml, train_sup}) {
        sc_flags.add_experiment(c);
        c->add_option("--split-seed", sc_split_seed, "Split seed");
        c->add_option("--out", sc_out, "Parameter file")->required();
    }
    auto* finetune = scorer_cmd->add_subcommand("finetune", "Fine-tune on one query's feedback");
    auto* scorer_rerank = scorer_cmd->add_subcommand("rerank", "Re-rank one query's candidates");
    for (auto* c : {finetune, scorer_rerank}) {
        sc_flags.add_experiment(c);
        c->add_option("--params", sc_params, "Parameter file")->required();
        c->add_option("--query-id", sc_query, "Query id")->required();
        c->add_option("--out", sc_out, c == finetune ? "Parameter file" : "Run file (default stdout)");
    }
    finetune->add_option("--lr", sc_lr, "Learning rate");
    finetune->add_option("--steps", sc_steps, "Gradient steps");
    finetune->add_flag("--bias-only", sc_bias_only, "Train biases only (default unless --full-finetune)");
    finetune->get_option("--out")->required();

    // experiment
    auto* exp = app.add_subcommand("experiment", "Batch experiments");
    exp->require_subcommand(1);
    ConfigFlags ex_flags;
    auto* exp_run = exp->add_subcommand("run", "Run one method over all seeds");
    ex_flags.add_experiment(exp_run);
    exp_run->add_option("--out", ex_flags.out, "Output directory for report and run files");
    auto* exp_sweep = exp->add_subcommand("sweep-e", "recall@1000 of BM25 with expansion over e x k");
    ex_flags.add_experiment(exp_sweep);
    std::vector<std::string> sweep_es = {"4", "8", "16", "32", "64", "all"};
    std::vector<std::size_t> sweep_ks = {2, 4, 8};
    exp_sweep->add_option("--es", sweep_es, "Expansion counts");
    exp_sweep->add_option("--ks", sweep_ks, "Feedback sizes");
    exp_sweep->add_option("--out", ex_flags.out, "CSV file (default stdout)");

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP service for interactive feedback sessions");
    ConfigFlags sv_flags;
    sv_flags.add_experiment(serve);
    std::string sv_host = "127.0.0.1", sv_snapshot, sv_params, sv_meta;
    int sv_port = 8080;
    bool sv_no_scorer = false;
    service::ServiceOptions sv_opts;
    serve->add_option("--host", sv_host, "Bind address");
    serve->add_option("--port", sv_port, "Port (0: any free port)");
    serve->add_option("--snapshot", sv_snapshot, "Session snapshot file (restored at start, rewritten on change)");
    serve->add_option("--params", sv_params, "Zero-shot scorer parameters (trained from the config when omitted)");
    serve->add_option("--meta-params", sv_meta, "Meta-trained scorer parameters");
    serve->add_option("--finetune-lr", sv_opts.finetune_lr, "Per-session fine-tuning learning rate");
    serve->add_option("--finetune-steps", sv_opts.finetune_steps, "Per-session fine-tuning steps");
    serve->add_option("--top-n", sv_opts.default_top_n, "Default result count");
    serve->add_flag("--no-scorer", sv_no_scorer, "Serve without the neural scorer");

    // report
    auto* report = app.add_subcommand("report", "Summaries of experiment reports");
    report->require_subcommand(1);
    auto* export_csv = report->add_subcommand("export-csv", "One CSV row per report.json");
    std::vector<std::string> rep_inputs;
    std::string rep_out;
    export_csv->add_option("reports", rep_inputs, "report.json files")->required();
    export_csv->add_option("--out", rep_out, "CSV file (default stdout)");

    // splits
    auto* splits = app.add_subcommand("splits", "Print the train/valid/test assignment for a seed");
    ConfigFlags sp_flags;
    sp_flags.add_data(splits);
    std::uint64_t sp_seed = 0;
    splits->add_option("--seed", sp_seed, "Split seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            const auto docs = load_corpus(in_corpus, parse_corpus_format(in_format));
            const auto queries = load_queries(in_queries, in_field);
            const auto qrels = load_qrels(in_qrels);
            std::unordered_set<std::string> ids;
            for (const auto& d : docs) ids.insert(d.id);
            const auto dangling = warn_dangling_judgments(qrels, ids);
            std::filesystem::create_directories(in_out);
            const std::filesystem::path dir(in_out);
            {
                std::ofstream out(dir / "corpus.jsonl", std::ios::binary);
                write_corpus_jsonl(out, docs);
            }
            {
                std::ofstream out(dir / "queries.jsonl", std::ios::binary);
                write_queries_jsonl(out, queries);
            }
            {
                std::ofstream out(dir / "qrels.txt", std::ios::binary);
                write_qrels(out, qrels);
            }
            std::cout << docs.size() << " documents, " << queries.size() << " queries, " << qrels_summary(qrels) << ", "
                      << dangling << " judgments for unknown documents\n";
        } else if (*synth) {
            const auto ds = synthetic::generate(spec);
            synthetic::write_dataset(ds, synth_out);
            std::cout << ds.docs.size() << " documents, " << ds.queries.size() << " queries written to " << synth_out
                      << "\n";
        } else if (*index_build) {
            const auto idx = lexical::InvertedIndex::build(load_corpus(ib_corpus, parse_corpus_format(ib_format)));
            idx.save(ib_out);
            std::cout << idx.doc_count() << " documents, " << idx.vocabulary_size() << " terms\n";
        } else if (*index_search) {
            const auto idx = lexical::InvertedIndex::load(is_index);
            std::vector<Query> qs;
            if (!is_queries.empty())
                qs = load_queries(is_queries, is_field);
            else if (!is_query.empty())
                qs.push_back({"q", is_query});
            else
                throw PreconditionError("give --query or --queries");
            std::ostringstream os;
            for (const auto& q : qs)
                write_run(os, lexical::bm25_search(idx, lexical::WeightedQuery::from_text(q.text), is_top, bm25, q.id),
                          "bm25");
            write_text(is_out, os.str());
        } else if (*expand) {
            const auto idx = lexical::InvertedIndex::load(ex_index);
            const auto q = lexical::expand_query(idx, ex_query, ex_docs, lexical::parse_expansion_count(ex_e));
            std::cout << lexical::weighted_query_json(q).dump(2) << "\n";
        } else if (*rerank_knn) {
            auto run_in = detail::open_input(rk_run);
            const auto run = read_run(run_in);
            const auto store = load_embeddings(rk_embeddings);
            std::ostringstream os;
            for (const auto& fb : read_feedback(rk_feedback)) {
                auto it = run.find(fb.query_id);
                if (it == run.end()) {
                    log::warn("no run for query '" + fb.query_id + "'");
                    continue;
                }
                const Ranking candidates = it->second.without(fb.all_ids());
                write_run(os, knn::knn_rerank(candidates, store.get_or_zero(fb.query_id), fb, store, {rk_query_only}),
                          "knn");
            }
            write_text(rk_out, os.str());
        } else if (*train_maml || *train_sup) {
            auto cfg = sc_flags.build();
            if (*train_sup) cfg.scorer.pretrain = experiment::Pretrain::supervised;
            const auto p = make_pipeline(cfg);
            const auto split = make_splits(p.eligible_queries(), sc_split_seed);
            const auto params = *train_maml ? experiment::meta_scorer(p, cfg, split) : experiment::base_scorer(p, cfg, split);
            params.save(sc_out);
            std::cout << params.shape().param_count() << " parameters written to " << sc_out << "\n";
        } else if (*finetune || *scorer_rerank) {
            const auto cfg = sc_flags.build();
            const auto p = make_pipeline(cfg);
            auto params = scorer::ScorerParams::load(sc_params);
            const auto ctx = experiment::prepare_query(p, sc_query, cfg);
            const auto features = ctx.features(p.store());
            if (*finetune) {
                const auto mask = sc_bias_only || !cfg.scorer.full_finetune ? scorer::TrainableMask::bias_only()
                                                                            : scorer::TrainableMask::all();
                params = scorer::query_finetune(params, scorer::make_task(ctx.feedback, features), sc_lr, sc_steps, mask);
                params.save(sc_out);
                std::cout << "fine-tuned on " << ctx.feedback.size() << " feedback documents ("
                          << 100.0 * mask.trainable_fraction(params.shape()) << "% of parameters trainable)\n";
            } else {
                std::ostringstream os;
                write_run(os, scorer::ce_rerank(params, ctx.residual.ranking, features), "scorer");
                write_text(sc_out, os.str());
            }
        } else if (*exp_run) {
            auto cfg = ex_flags.build();
            if (!ex_flags.out.empty()) cfg.output_dir = ex_flags.out;
            const auto res = experiment::run_experiment(cfg);
            const auto a = res.aggregate();
            std::cout << experiment::to_string(cfg.method) << " k=" << cfg.k << " e=" << lexical::to_string(cfg.e)
                      << " ndcg@20=" << format_double(a.ndcg_20) << " recall@100=" << format_double(a.recall_100)
                      << " recall@1000=" << format_double(a.recall_1000) << "\n";
        } else if (*exp_sweep) {
            const auto cfg = ex_flags.build();
            const auto p = make_pipeline(cfg);
            std::vector<lexical::ExpansionCount> es;
            for (const auto& e : sweep_es) es.push_back(lexical::parse_expansion_count(e));
            write_text(ex_flags.out, experiment::sweep_csv(experiment::sweep_expansion(p, cfg, es, sweep_ks)));
        } else if (*serve) {
            const auto cfg = sv_flags.build();
            const auto p = make_pipeline(cfg);
            service::ServiceModels models;
            if (!sv_no_scorer) {
                if (!sv_params.empty()) {
                    models.base = scorer::ScorerParams::load(sv_params);
                    if (!sv_meta.empty()) models.meta = scorer::ScorerParams::load(sv_meta);
                } else {
                    const auto split = make_splits(p.eligible_queries(), cfg.seeds.front());
                    models.base = experiment::base_scorer(p, cfg, split);
                    models.meta = experiment::meta_scorer(p, cfg, split);
                }
            }
            sv_opts.e = cfg.e;
            sv_opts.bm25 = cfg.pipeline.bm25;
            sv_opts.extract = cfg.extract;
            sv_opts.first_stage_depth = cfg.pipeline.first_stage_depth;
            sv_opts.candidate_depth = cfg.candidate_depth;
            sv_opts.original_query_lexical_feature = cfg.original_query_lexical_feature;
            sv_opts.knn_query_only = cfg.knn_query_only;
            sv_opts.rrf_c = cfg.rrf_c;
            sv_opts.finetune_mask = cfg.scorer.finetune_mask();
            service::QueryEncoder encoder;
            if (!cfg.dataset.corpus.empty() && cfg.dataset.embeddings.empty()) {
                const auto dim = cfg.dataset.hash_dim;
                const auto seed = cfg.dataset.hash_seed;
                encoder = [dim, seed](std::string_view text) { return hash_embed(text, dim, seed); };
            }
            service::Service svc(p.index(), p.store(), p.texts(), sv_opts, models, encoder);
            if (!sv_snapshot.empty() && std::filesystem::exists(sv_snapshot))
                svc.restore(json::parse(read_text(sv_snapshot)));
            httplib::Server server;
            svc.mount(server, sv_snapshot);
            const int port = sv_port == 0 ? server.bind_to_any_port(sv_host) : (server.bind_to_port(sv_host, sv_port) ? sv_port : -1);
            if (port < 0) throw Error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
            std::cout << "listening on http://" << sv_host << ":" << port << std::endl;
            server.listen_after_bind();
        } else if (*export_csv) {
            std::vector<json> reports;
            for (const auto& path : rep_inputs) reports.push_back(json::parse(read_text(path)));
            write_text(rep_out, experiment::reports_csv(reports));
        } else if (*splits) {
            const auto cfg = sp_flags.build();
            const auto p = make_pipeline(cfg);
            std::cout << json(make_splits(p.eligible_queries(), sp_seed)).dump(2) << "\n";
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
