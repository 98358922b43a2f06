#pragma once

// Interactive feedback sessions over HTTP/JSON.
//
//   POST /sessions                  {query, query_id?, top_n?}
//   GET  /sessions/{id}
//   POST /sessions/{id}/feedback    {doc_id, relevant: true | false | null}
//   POST /sessions/{id}/rerank      {method, top_n?}
//   GET  /sessions/{id}/timings
//   GET  /healthz
//
// Each session is guarded by its own mutex; the index, embeddings and base
// scorers are shared read-only.

#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "feedrank/embedder.hpp"
#include "feedrank/error.hpp"
#include "feedrank/experiment.hpp"
#include "feedrank/feedback.hpp"
#include "feedrank/fusion_eval.hpp"
#include "feedrank/knn_reranker.hpp"
#include "feedrank/lexical.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"
#include "feedrank/scorer/features.hpp"
#include "feedrank/scorer/training.hpp"

namespace feedrank::service {

/// Carries an HTTP status out of request handling.
class HttpError : public Error {
public:
    HttpError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

struct ServiceOptions {
    std::size_t default_top_n = 20;
    std::size_t max_top_n = 1000;
    std::size_t first_stage_depth = 1000;
    std::size_t candidate_depth = 1000;
    lexical::ExpansionCount e = 16;
    lexical::Bm25Params bm25{};
    lexical::ExtractOptions extract{};
    bool original_query_lexical_feature = false;
    bool knn_query_only = false;
    double rrf_c = eval::kDefaultRrfConstant;
    double finetune_lr = 2e-3;
    std::size_t finetune_steps = 8;
    scorer::TrainableMask finetune_mask = scorer::TrainableMask::bias_only();
    std::size_t snippet_bytes = 200;
};

/// Scorers sessions start from. `meta` falls back to `base` when absent.
struct ServiceModels {
    std::optional<scorer::ScorerParams> base;
    std::optional<scorer::ScorerParams> meta;
};

/// Maps free query text to a vector; used when the request names no known query.
using QueryEncoder = std::function<Vector(std::string_view)>;

class Service {
public:
    Service(const lexical::InvertedIndex& index, const EmbeddingStore& store,
            const std::unordered_map<std::string, std::string>& texts, ServiceOptions opts = {},
            ServiceModels models = {}, QueryEncoder encoder = {})
        : index_(index), store_(store), texts_(texts), opts_(std::move(opts)), models_(std::move(models)),
          encoder_(std::move(encoder)) {
        if (models_.base && models_.base->shape().input_dim != scorer::feature_dim(store_.dim()))
            throw ShapeError("base scorer input width does not match the embedding dimension");
        if (!models_.meta) models_.meta = models_.base;
    }

    // --- Operations (JSON in, JSON out; throw HttpError) ----------------------------

    nlohmann::json create_session(const nlohmann::json& body) {
        const std::string text = require_string(body, "query");
        const std::size_t top_n = top_n_of(body);
        auto s = std::make_shared<Session>();
        {
            std::lock_guard lock(sessions_mu_);
            s->id = "s" + std::to_string(++next_id_);
        }
        s->query_text = text;
        s->query_vec = query_vector(body, text);
        s->created = s->updated = now();
        s->first_stage = eval::time_stage(s->timings, eval::stage::retrieval, [&] {
                             return lexical::bm25_search(index_, lexical::WeightedQuery::from_text(text),
                                                         opts_.first_stage_depth, opts_.bm25, s->id);
                         }).first;
        {
            std::unique_lock lock(sessions_mu_);
            sessions_.emplace(s->id, s);
        }
        return {{"session_id", s->id}, {"query", text}, {"results", results_json(s->first_stage, top_n)}};
    }

    nlohmann::json get_session(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mu);
        return state_json(*s);
    }

    nlohmann::json submit_feedback(const std::string& id, const nlohmann::json& body) {
        auto s = find(id);
        const std::string doc = require_string(body, "doc_id");
        if (!body.contains("relevant")) throw HttpError(400, "missing field 'relevant'");
        const auto& rel = body.at("relevant");
        if (!rel.is_boolean() && !rel.is_null()) throw HttpError(400, "'relevant' must be true, false or null");
        std::lock_guard lock(s->mu);
        if (!s->first_stage.contains(doc))
            throw HttpError(400, "document '" + doc + "' is not in the session's first-stage results");
        std::erase(s->relevant, doc);
        std::erase(s->nonrelevant, doc);
        if (rel.is_boolean()) (rel.get<bool>() ? s->relevant : s->nonrelevant).push_back(doc);
        s->updated = now();
        refresh(*s);
        return state_json(*s);
    }

    nlohmann::json rerank(const std::string& id, const nlohmann::json& body) {
        auto s = find(id);
        experiment::Method method;
        try {
            method = experiment::parse_method(require_string(body, "method"));
        } catch (const PreconditionError& ex) {
            throw HttpError(400, ex.what());
        }
        const std::size_t top_n = top_n_of(body);
        std::lock_guard lock(s->mu);
        if (!s->phase2) refresh(*s);
        const auto& p2 = *s->phase2;
        const auto fb = feedback_of(*s);
        const Ranking& candidates = p2.candidates;

        auto ce = [&](bool tuned, bool meta) {
            if (!models_.base) throw HttpError(409, "no scorer loaded");
            if (tuned && !(meta ? s->tuned_meta : s->tuned_base))
                throw HttpError(409, "fine-tuning needs at least one relevant and one non-relevant document");
            const auto& params = tuned ? *(meta ? s->tuned_meta : s->tuned_base) : *models_.base;
            const scorer::FeatureBuilder features(store_, s->query_vec, p2.lexical_reference);
            return eval::time_stage(s->timings, eval::stage::rerank,
                                    [&] { return scorer::ce_rerank(params, candidates, features); })
                .first;
        };
        auto knn = [&] {
            return eval::time_stage(s->timings, eval::stage::rerank, [&] {
                       return knn::knn_rerank(candidates, s->query_vec, fb, store_, {opts_.knn_query_only});
                   }).first;
        };

        Ranking out;
        switch (method) {
            case experiment::Method::bm25:
                out = s->first_stage.without(fb.all_ids()).top(opts_.candidate_depth);
                break;
            case experiment::Method::bm25qe:
                out = candidates;
                break;
            case experiment::Method::knn:
                out = knn();
                break;
            case experiment::Method::ce_zeroshot:
                out = ce(false, false);
                break;
            case experiment::Method::ce_queryft:
                out = ce(true, false);
                break;
            case experiment::Method::ce_maml_queryft:
                out = ce(true, true);
                break;
            case experiment::Method::fusion_knn_bm25qe:
                out = eval::rrf({knn(), candidates}, opts_.rrf_c);
                break;
            case experiment::Method::fusion_ce_bm25qe:
                out = eval::rrf({ce(true, true), candidates}, opts_.rrf_c);
                break;
        }
        s->reranked = out;
        s->reranked_method = experiment::to_string(method);
        s->updated = now();
        return {{"session_id", s->id},
                {"method", s->reranked_method},
                {"k", fb.relevant.size()},
                {"results", results_json(out, top_n)},
                {"overlap_at_20", eval::overlap_at_k(out, candidates, 20)},
                {"excluded", fb.size()}};
    }

    nlohmann::json timings(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mu);
        return {{"session_id", s->id}, {"timings", s->timings.to_json()}};
    }

    nlohmann::json health() const {
        std::shared_lock lock(sessions_mu_);
        return {{"status", "ok"},
                {"documents", index_.doc_count()},
                {"sessions", sessions_.size()},
                {"scorer", models_.base.has_value()}};
    }

    // --- Snapshots ---------------------------------------------------------------

    /// Queries and feedback of every session; rankings are recomputed on restore.
    nlohmann::json snapshot() const {
        std::vector<std::shared_ptr<Session>> all;
        {
            std::shared_lock lock(sessions_mu_);
            for (const auto& [_, s] : sessions_) all.push_back(s);
        }
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : all) {
            std::lock_guard lock(s->mu);
            out.push_back({{"session_id", s->id},
                           {"query", s->query_text},
                           {"query_vec", s->query_vec},
                           {"relevant", s->relevant},
                           {"nonrelevant", s->nonrelevant}});
        }
        return {{"format", "feedrank-sessions"}, {"version", 1}, {"sessions", out}};
    }

    void restore(const nlohmann::json& j) {
        if (j.value("format", "") != "feedrank-sessions") throw ParseError("not a session snapshot", 0);
        for (const auto& rec : j.at("sessions")) {
            auto s = std::make_shared<Session>();
            s->id = rec.at("session_id").get<std::string>();
            s->query_text = rec.at("query").get<std::string>();
            s->query_vec = rec.at("query_vec").get<Vector>();
            if (s->query_vec.size() != store_.dim()) throw ShapeError("snapshot query vector has the wrong dimension");
            s->relevant = rec.at("relevant").get<std::vector<std::string>>();
            s->nonrelevant = rec.at("nonrelevant").get<std::vector<std::string>>();
            s->created = s->updated = now();
            s->first_stage = lexical::bm25_search(index_, lexical::WeightedQuery::from_text(s->query_text),
                                                  opts_.first_stage_depth, opts_.bm25, s->id);
            refresh(*s);
            std::unique_lock lock(sessions_mu_);
            if (s->id.size() > 1 && s->id[0] == 's') {
                std::size_t n = 0;
                if (std::from_chars(s->id.data() + 1, s->id.data() + s->id.size(), n).ec == std::errc())
                    next_id_ = std::max(next_id_, n);
            }
            sessions_[s->id] = s;
        }
    }

    // --- HTTP ----------------------------------------------------------------------

    /// Registers the routes on `server`. When `snapshot_path` is set, every
    /// mutating request rewrites the snapshot file.
    void mount(httplib::Server& server, std::string snapshot_path = {}) {
        snapshot_path_ = std::move(snapshot_path);
        server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) { reply(res, [&] { return health(); }); });
        server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] { return persist(create_session(parse_body(req))); });
        });
        server.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] { return get_session(req.matches[1]); });
        });
        server.Post(R"(/sessions/([^/]+)/feedback)", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] { return persist(submit_feedback(req.matches[1], parse_body(req))); });
        });
        server.Post(R"(/sessions/([^/]+)/rerank)", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] { return rerank(req.matches[1], parse_body(req)); });
        });
        server.Get(R"(/sessions/([^/]+)/timings)", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] { return timings(req.matches[1]); });
        });
    }

private:
    using Clock = std::chrono::system_clock;

    struct Phase2 {
        Ranking candidates;
        Ranking lexical_reference;
    };

    struct Session {
        std::mutex mu;
        std::string id;
        std::string query_text;
        Vector query_vec;
        Ranking first_stage;
        std::vector<std::string> relevant;
        std::vector<std::string> nonrelevant;
        std::optional<Phase2> phase2;
        std::optional<scorer::ScorerParams> tuned_base;
        std::optional<scorer::ScorerParams> tuned_meta;
        std::optional<Ranking> reranked;
        std::string reranked_method;
        eval::StageTimings timings;
        Clock::time_point created;
        Clock::time_point updated;
    };

    static Clock::time_point now() { return Clock::now(); }

    static std::string iso_time(Clock::time_point t) {
        const auto secs = std::chrono::time_point_cast<std::chrono::seconds>(t);
        const std::time_t tt = Clock::to_time_t(secs);
        std::tm tm{};
        gmtime_r(&tt, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    static std::string require_string(const nlohmann::json& body, const char* field) {
        if (!body.is_object() || !body.contains(field) || !body.at(field).is_string())
            throw HttpError(400, std::string("field '") + field + "' must be a string");
        return body.at(field).get<std::string>();
    }

    std::size_t top_n_of(const nlohmann::json& body) const {
        if (!body.contains("top_n")) return opts_.default_top_n;
        const auto& v = body.at("top_n");
        if (!v.is_number_integer() || v.get<long long>() < 1) throw HttpError(400, "'top_n' must be a positive integer");
        return std::min<std::size_t>(v.get<std::size_t>(), opts_.max_top_n);
    }

    Vector query_vector(const nlohmann::json& body, const std::string& text) const {
        if (body.contains("query_id")) {
            if (!body.at("query_id").is_string()) throw HttpError(400, "'query_id' must be a string");
            const auto qid = body.at("query_id").get<std::string>();
            if (const Vector* v = store_.find(qid)) return *v;
            throw HttpError(400, "no embedding for query '" + qid + "'");
        }
        if (encoder_) return encoder_(text);
        log::warn("no query encoder configured; session query uses a zero vector");
        return Vector(store_.dim(), 0.0);
    }

    std::shared_ptr<Session> find(const std::string& id) const {
        std::shared_lock lock(sessions_mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw HttpError(404, "unknown session '" + id + "'");
        return it->second;
    }

    FeedbackSet feedback_of(const Session& s) const {
        FeedbackSet fb;
        fb.query_id = s.id;
        fb.relevant = s.relevant;
        fb.nonrelevant = s.nonrelevant;
        fb.k = s.relevant.size();
        return fb;
    }

    /// Re-expands, retrieves again and (with both labels present) fine-tunes.
    /// Caller holds the session lock.
    void refresh(Session& s) {
        const auto fb = feedback_of(s);
        auto [second, _] = eval::time_stage(s.timings, eval::stage::expansion, [&] {
            const auto q = lexical::expand_query(index_, s.query_text, fb.relevant, opts_.e, opts_.extract);
            return lexical::bm25_search(index_, q, opts_.candidate_depth + fb.size(), opts_.bm25, s.id);
        });
        Phase2 p2;
        p2.candidates = second.without(fb.all_ids()).top(opts_.candidate_depth);
        p2.lexical_reference = opts_.original_query_lexical_feature
                                   ? experiment::rescore_original(index_, s.query_text, second, opts_.bm25)
                                   : second;
        s.tuned_base.reset();
        s.tuned_meta.reset();
        if (models_.base && !fb.relevant.empty() && !fb.nonrelevant.empty()) {
            const scorer::FeatureBuilder features(store_, s.query_vec, p2.lexical_reference);
            const auto task = scorer::make_task(fb, features);
            eval::time_stage(s.timings, eval::stage::finetune, [&] {
                s.tuned_base = scorer::query_finetune(*models_.base, task, opts_.finetune_lr, opts_.finetune_steps,
                                                      opts_.finetune_mask);
                s.tuned_meta = scorer::query_finetune(*models_.meta, task, opts_.finetune_lr, opts_.finetune_steps,
                                                      opts_.finetune_mask);
            });
        }
        s.phase2 = std::move(p2);
        s.reranked.reset();
    }

    std::string snippet(const std::string& doc_id) const {
        auto it = texts_.find(doc_id);
        if (it == texts_.end()) return {};
        const std::string& t = it->second;
        if (t.size() <= opts_.snippet_bytes) return t;
        std::size_t cut = opts_.snippet_bytes;
        while (cut > 0 && (static_cast<unsigned char>(t[cut]) & 0xC0) == 0x80) --cut;
        return t.substr(0, cut) + "...";
    }

    nlohmann::json results_json(const Ranking& r, std::size_t top_n) const {
        nlohmann::json out = nlohmann::json::array();
        for (std::size_t i = 0; i < std::min(top_n, r.size()); ++i)
            out.push_back({{"doc_id", r[i].doc_id}, {"rank", i + 1}, {"score", r[i].score}, {"snippet", snippet(r[i].doc_id)}});
        return out;
    }

    nlohmann::json state_json(const Session& s) const {
        nlohmann::json j = {{"session_id", s.id},
                            {"query", s.query_text},
                            {"created", iso_time(s.created)},
                            {"updated", iso_time(s.updated)},
                            {"k", s.relevant.size()},
                            {"feedback", {{"relevant", s.relevant}, {"nonrelevant", s.nonrelevant}}},
                            {"finetuned", s.tuned_base.has_value()},
                            {"results", results_json(s.first_stage, opts_.default_top_n)}};
        if (s.reranked) j["reranked"] = {{"method", s.reranked_method}, {"results", results_json(*s.reranked, opts_.default_top_n)}};
        return j;
    }

    static nlohmann::json parse_body(const httplib::Request& req) {
        if (req.body.empty()) return nlohmann::json::object();
        try {
            auto j = nlohmann::json::parse(req.body);
            if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
            return j;
        } catch (const nlohmann::json::parse_error& ex) {
            throw HttpError(400, std::string("malformed JSON: ") + ex.what());
        }
    }

    nlohmann::json persist(nlohmann::json result) {
        if (snapshot_path_.empty()) return result;
        const auto snap = snapshot().dump();
        std::lock_guard lock(snapshot_mu_);
        const auto tmp = snapshot_path_ + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            out << snap;
        }
        std::filesystem::rename(tmp, snapshot_path_);
        return result;
    }

    template <class F>
    static void reply(httplib::Response& res, F&& op) {
        auto send = [&](int status, const nlohmann::json& j) {
            res.status = status;
            res.set_content(j.dump(), "application/json");
        };
        try {
            send(200, op());
        } catch (const HttpError& ex) {
            send(ex.status(), {{"error", ex.what()}});
        } catch (const PreconditionError& ex) {
            send(400, {{"error", ex.what()}});
        } catch (const std::exception& ex) {
            send(500, {{"error", ex.what()}});
        }
    }

    const lexical::InvertedIndex& index_;
    const EmbeddingStore& store_;
    const std::unordered_map<std::string, std::string>& texts_;
    ServiceOptions opts_;
    ServiceModels models_;
    QueryEncoder encoder_;
    mutable std::shared_mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::size_t next_id_ = 0;
    std::mutex snapshot_mu_;
    std::string snapshot_path_;
};

}  // namespace feedrank::service
