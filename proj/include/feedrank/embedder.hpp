#pragma once

// Dense text vectors: a file-backed store for precomputed encoder output and
// a deterministic feature-hashing fallback.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "feedrank/error.hpp"
#include "feedrank/lexical.hpp"
#include "feedrank/log.hpp"
#include "feedrank/ranking.hpp"

namespace feedrank {

using Vector = std::vector<double>;

/// u.v / (|u| |v|), or 0 when either norm is zero.
inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw ShapeError("cosine of vectors with dims " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) return 0.0;
    const double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, -1.0, 1.0);
}

inline void l2_normalize(Vector& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    if (n == 0.0) return;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
}

namespace detail {

// FNV-1a over the token followed by a splitmix64 finalizer keyed by seed.
inline std::uint64_t token_hash(std::string_view token, std::uint64_t seed) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : token) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    return h;
}

}  // namespace detail

/// Signed feature hashing of the token bag, L2-normalized. Empty token list
/// gives the zero vector.
inline Vector hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed = 0) {
    if (dim < 8) throw PreconditionError("hash_embed needs dim >= 8");
    Vector v(dim, 0.0);
    for (const auto& tok : lexical::tokenize(text)) {
        const auto h = detail::token_hash(tok, seed);
        v[h % dim] += (h >> 63) ? -1.0 : 1.0;
    }
    l2_normalize(v);
    return v;
}

/// Fixed-dimension vectors keyed by text id (document or query id).
class EmbeddingStore {
public:
    explicit EmbeddingStore(std::size_t dim = 0) : dim_(dim) {}

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return vectors_.size(); }
    bool contains(std::string_view id) const { return vectors_.contains(std::string(id)); }

    void put(std::string id, Vector v) {
        if (v.size() != dim_)
            throw ShapeError("vector for '" + id + "' has dim " + std::to_string(v.size()) + ", store dim is " +
                             std::to_string(dim_));
        for (double x : v)
            if (!std::isfinite(x)) throw PreconditionError("non-finite component in vector for '" + id + "'");
        vectors_[std::move(id)] = std::move(v);
    }

    const Vector* find(std::string_view id) const {
        auto it = vectors_.find(std::string(id));
        return it == vectors_.end() ? nullptr : &it->second;
    }

    const Vector& at(std::string_view id) const {
        if (const auto* v = find(id)) return *v;
        throw PreconditionError("no vector for '" + std::string(id) + "'");
    }

    /// Stored vector, or the zero vector with a warning when missing.
    Vector get_or_zero(std::string_view id) const {
        if (const auto* v = find(id)) return *v;
        log::warn("no embedding for '" + std::string(id) + "'; using zero vector");
        return Vector(dim_, 0.0);
    }

    /// Ids in lexicographic order.
    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(vectors_.size());
        for (const auto& [id, _] : vectors_) out.push_back(id);
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Header `dim=<n>`, then `id<TAB>f1 f2 ... fn` per line, shortest
    /// round-trip decimals; records sorted by id.
    void write(std::ostream& os) const {
        os << "dim=" << dim_ << '\n';
        for (const auto& id : ids()) {
            os << id << '\t';
            const auto& v = vectors_.at(id);
            for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << format_double(v[i]);
            os << '\n';
        }
    }

    static EmbeddingStore read(std::istream& is) {
        std::string line;
        std::size_t lineno = 1;
        if (!std::getline(is, line)) throw ParseError("empty embedding file", 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("dim=", 0) != 0) throw ParseError("expected 'dim=<n>' header", 1);
        std::size_t dim = 0;
        {
            const std::string_view num(line.data() + 4, line.size() - 4);
            auto res = std::from_chars(num.data(), num.data() + num.size(), dim);
            if (res.ec != std::errc() || res.ptr != num.data() + num.size() || dim == 0)
                throw ParseError("bad dim header '" + line + "'", 1);
        }
        EmbeddingStore store(dim);
        while (std::getline(is, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos || tab == 0) throw ParseError("expected 'id<TAB>values'", lineno);
            std::string id = line.substr(0, tab);
            Vector v;
            v.reserve(dim);
            std::istringstream fs(line.substr(tab + 1));
            std::string tok;
            while (fs >> tok) {
                double x = 0.0;
                if (!parse_double(tok, x) || !std::isfinite(x)) throw ParseError("bad float '" + tok + "'", lineno);
                v.push_back(x);
            }
            if (v.size() != dim)
                throw ShapeError("record '" + id + "' has " + std::to_string(v.size()) + " values, header says " +
                                 std::to_string(dim) + " (line " + std::to_string(lineno) + ")");
            if (store.contains(id)) throw IntegrityError("duplicate embedding id '" + id + "'");
            store.put(std::move(id), std::move(v));
        }
        return store;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write '" + path + "'");
        write(out);
    }

    static EmbeddingStore load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open '" + path + "'");
        return read(in);
    }

    friend bool operator==(const EmbeddingStore&, const EmbeddingStore&) = default;

private:
    std::size_t dim_;
    std::unordered_map<std::string, Vector> vectors_;
};

inline EmbeddingStore load_embeddings(const std::string& path) { return EmbeddingStore::load(path); }

/// Store populated with `hash_embed` vectors for every document and query.
inline EmbeddingStore hash_embedding_store(const std::vector<Document>& docs, const std::vector<Query>& queries,
                                           std::size_t dim, std::uint64_t seed = 0) {
    EmbeddingStore store(dim);
    for (const auto& d : docs) store.put(d.id, hash_embed(d.text, dim, seed));
    for (const auto& q : queries) {
        if (store.contains(q.id)) throw IntegrityError("query id '" + q.id + "' collides with a document id");
        store.put(q.id, hash_embed(q.text, dim, seed));
    }
    return store;
}

}  // namespace feedrank
