#pragma once

#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mars/core.hpp"

namespace mars {

// All learnable state. Embedding tables are row-major N x D / M x D; the K
// projection matrices are stored back to back as K x D x D; facet weight
// logits are N x K. Under spherical geometry every embedding row stays unit
// norm; under Euclidean geometry the optimizer enforces the facet ball
// constraint by rescaling rows after each step.
struct ModelParams {
    int32_t num_users = 0;
    int32_t num_items = 0;
    int32_t dim = 0;
    int32_t num_facets = 0;
    Geometry geometry = Geometry::kEuclidean;
    Variant variant = Variant::kMar;
    uint64_t seed = 0;

    Vec user_emb;      // N x D
    Vec item_emb;      // M x D
    Vec user_proj;     // K x D x D
    Vec item_proj;     // K x D x D
    Vec facet_logits;  // N x K

    std::span<double> user_row(int32_t u) { return {user_emb.data() + static_cast<size_t>(u) * dim, static_cast<size_t>(dim)}; }
    std::span<const double> user_row(int32_t u) const { return {user_emb.data() + static_cast<size_t>(u) * dim, static_cast<size_t>(dim)}; }
    std::span<double> item_row(int32_t v) { return {item_emb.data() + static_cast<size_t>(v) * dim, static_cast<size_t>(dim)}; }
    std::span<const double> item_row(int32_t v) const { return {item_emb.data() + static_cast<size_t>(v) * dim, static_cast<size_t>(dim)}; }
    std::span<double> logit_row(int32_t u) { return {facet_logits.data() + static_cast<size_t>(u) * num_facets, static_cast<size_t>(num_facets)}; }
    std::span<const double> logit_row(int32_t u) const { return {facet_logits.data() + static_cast<size_t>(u) * num_facets, static_cast<size_t>(num_facets)}; }
};

// Facet-specific embedding of one entity: row k holds the entity's vector in
// facet space k.
struct FacetEmbedding {
    int32_t num_facets = 0;
    int32_t dim = 0;
    Vec rows;  // K x D

    std::span<double> row(int32_t k) { return {rows.data() + static_cast<size_t>(k) * dim, static_cast<size_t>(dim)}; }
    std::span<const double> row(int32_t k) const { return {rows.data() + static_cast<size_t>(k) * dim, static_cast<size_t>(dim)}; }
};

// out[k*D + j] = sum_i x[i] * proj[k*D*D + i*D + j]
inline void project_facets_into(std::span<const double> x, std::span<const double> proj,
                                int32_t num_facets, int32_t dim, std::span<double> out) {
    if (x.size() != static_cast<size_t>(dim) ||
        proj.size() != static_cast<size_t>(num_facets) * dim * dim ||
        out.size() != static_cast<size_t>(num_facets) * dim)
        throw std::invalid_argument("project_facets: dimension mismatch");
    fill_zero(out);
    for (int32_t k = 0; k < num_facets; ++k) {
        const double* mat = proj.data() + static_cast<size_t>(k) * dim * dim;
        double* dst = out.data() + static_cast<size_t>(k) * dim;
        for (int32_t i = 0; i < dim; ++i) {
            const double xi = x[i];
            const double* row = mat + static_cast<size_t>(i) * dim;
            for (int32_t j = 0; j < dim; ++j) dst[j] += xi * row[j];
        }
    }
}

inline FacetEmbedding project_facets(std::span<const double> x, std::span<const double> proj,
                                     int32_t num_facets, int32_t dim) {
    FacetEmbedding fe;
    fe.num_facets = num_facets;
    fe.dim = dim;
    fe.rows.resize(static_cast<size_t>(num_facets) * dim);
    project_facets_into(x, proj, num_facets, dim, fe.rows);
    return fe;
}

// softmax with max subtraction
inline Vec facet_weights(std::span<const double> logits) {
    Vec w(logits.size());
    double max_logit = logits[0];
    for (double l : logits) max_logit = std::max(max_logit, l);
    double total = 0.0;
    for (size_t k = 0; k < logits.size(); ++k) {
        w[k] = std::exp(logits[k] - max_logit);
        total += w[k];
    }
    for (double& x : w) x /= total;
    return w;
}

// Euclidean: negative squared distance. Spherical: cosine of the angle,
// normalizing internally so callers may pass unnormalized facet vectors.
inline double facet_similarity(std::span<const double> u_k, std::span<const double> v_k,
                               Geometry geom) {
    if (u_k.size() != v_k.size()) throw std::invalid_argument("facet_similarity: dimension mismatch");
    if (geom == Geometry::kEuclidean) return -squared_distance(u_k, v_k);
    const double nu = norm(u_k), nv = norm(v_k);
    if (nu == 0.0 || nv == 0.0)
        throw std::domain_error("facet_similarity: zero vector under spherical geometry");
    return dot(u_k, v_k) / (nu * nv);
}

// g(u, v) = sum_k theta_u^k * g^k(u^k, v^k)
inline double cross_facet_similarity(const ModelParams& params, int32_t u, int32_t v,
                                     Geometry geom) {
    const auto uf = project_facets(params.user_row(u), params.user_proj, params.num_facets, params.dim);
    const auto vf = project_facets(params.item_row(v), params.item_proj, params.num_facets, params.dim);
    const Vec theta = facet_weights(params.logit_row(u));
    double g = 0.0;
    for (int32_t k = 0; k < params.num_facets; ++k)
        g += theta[k] * facet_similarity(uf.row(k), vf.row(k), geom);
    return g;
}

// Facet embeddings of every item, entity-major, plus per-facet norms.
// Computed once per evaluation pass so candidate scoring is K dot products.
struct ItemFacetCache {
    int32_t num_facets = 0;
    int32_t dim = 0;
    Vec rows;   // M x K x D
    Vec norms;  // M x K

    std::span<const double> row(int32_t v, int32_t k) const {
        return {rows.data() + (static_cast<size_t>(v) * num_facets + k) * dim, static_cast<size_t>(dim)};
    }
};

inline ItemFacetCache build_item_facet_cache(const ModelParams& params) {
    ItemFacetCache cache;
    cache.num_facets = params.num_facets;
    cache.dim = params.dim;
    cache.rows.resize(static_cast<size_t>(params.num_items) * params.num_facets * params.dim);
    cache.norms.resize(static_cast<size_t>(params.num_items) * params.num_facets);
    for (int32_t v = 0; v < params.num_items; ++v) {
        std::span<double> dst{cache.rows.data() + static_cast<size_t>(v) * params.num_facets * params.dim,
                              static_cast<size_t>(params.num_facets) * params.dim};
        project_facets_into(params.item_row(v), params.item_proj, params.num_facets, params.dim, dst);
        for (int32_t k = 0; k < params.num_facets; ++k)
            cache.norms[static_cast<size_t>(v) * params.num_facets + k] = norm(cache.row(v, k));
    }
    return cache;
}

inline double score_item_cached(const FacetEmbedding& uf, const Vec& uf_norms, const Vec& theta,
                                const ItemFacetCache& cache, int32_t v, Geometry geom) {
    double g = 0.0;
    for (int32_t k = 0; k < cache.num_facets; ++k) {
        const auto urow = uf.row(k);
        const auto vrow = cache.row(v, k);
        double s;
        if (geom == Geometry::kEuclidean) {
            s = -squared_distance(urow, vrow);
        } else {
            const double nu = uf_norms[k];
            const double nv = cache.norms[static_cast<size_t>(v) * cache.num_facets + k];
            if (nu == 0.0 || nv == 0.0)
                throw std::domain_error("score: zero facet vector under spherical geometry");
            s = dot(urow, vrow) / (nu * nv);
        }
        g += theta[k] * s;
    }
    return g;
}

// Per-candidate cross-facet similarity; the user-side projection and facet
// weights are computed once and reused.
inline Vec score_items(const ModelParams& params, int32_t u, std::span<const int32_t> candidates,
                       Geometry geom) {
    if (candidates.empty()) throw std::invalid_argument("score_items: empty candidate list");
    const auto uf = project_facets(params.user_row(u), params.user_proj, params.num_facets, params.dim);
    Vec uf_norms(params.num_facets);
    for (int32_t k = 0; k < params.num_facets; ++k) uf_norms[k] = norm(uf.row(k));
    const Vec theta = facet_weights(params.logit_row(u));

    Vec scores;
    scores.reserve(candidates.size());
    Vec vf(static_cast<size_t>(params.num_facets) * params.dim);
    for (int32_t v : candidates) {
        project_facets_into(params.item_row(v), params.item_proj, params.num_facets, params.dim, vf);
        double g = 0.0;
        for (int32_t k = 0; k < params.num_facets; ++k) {
            std::span<const double> vrow{vf.data() + static_cast<size_t>(k) * params.dim,
                                         static_cast<size_t>(params.dim)};
            double s;
            if (geom == Geometry::kEuclidean) {
                s = -squared_distance(uf.row(k), vrow);
            } else {
                const double nv = norm(vrow);
                if (uf_norms[k] == 0.0 || nv == 0.0)
                    throw std::domain_error("score_items: zero facet vector under spherical geometry");
                s = dot(uf.row(k), vrow) / (uf_norms[k] * nv);
            }
            g += theta[k] * s;
        }
        scores.push_back(g);
    }
    return scores;
}

// Embeddings ~ N(0, 1/sqrt(D)) per coordinate (unit-normalized rows under
// spherical geometry); projections start at identity plus N(0, 0.01) noise so
// facets begin near-coincident; facet logits start at zero (uniform weights).
inline ModelParams init_params(int32_t num_users, int32_t num_items, int32_t dim,
                               int32_t num_facets, Geometry geom, uint64_t seed) {
    if (num_users < 1 || num_items < 1 || dim < 1 || num_facets < 1)
        throw std::invalid_argument("init_params: all dims must be >= 1");
    ModelParams p;
    p.num_users = num_users;
    p.num_items = num_items;
    p.dim = dim;
    p.num_facets = num_facets;
    p.geometry = geom;
    p.variant = geom == Geometry::kSpherical ? Variant::kMars : Variant::kMar;
    p.seed = seed;

    const double sigma = 1.0 / std::sqrt(static_cast<double>(dim));
    auto fill_gaussian = [](Vec& v, size_t n, double s, Rng rng) {
        v.resize(n);
        for (double& x : v) x = s * rand_normal(rng);
    };
    fill_gaussian(p.user_emb, static_cast<size_t>(num_users) * dim, sigma, make_rng(seed, "init.user_emb"));
    fill_gaussian(p.item_emb, static_cast<size_t>(num_items) * dim, sigma, make_rng(seed, "init.item_emb"));

    auto init_proj = [&](Vec& proj, Rng rng) {
        proj.assign(static_cast<size_t>(num_facets) * dim * dim, 0.0);
        for (int32_t k = 0; k < num_facets; ++k)
            for (int32_t i = 0; i < dim; ++i)
                for (int32_t j = 0; j < dim; ++j)
                    proj[(static_cast<size_t>(k) * dim + i) * dim + j] =
                        (i == j ? 1.0 : 0.0) + 0.01 * rand_normal(rng);
    };
    init_proj(p.user_proj, make_rng(seed, "init.user_proj"));
    init_proj(p.item_proj, make_rng(seed, "init.item_proj"));
    p.facet_logits.assign(static_cast<size_t>(num_users) * num_facets, 0.0);

    if (geom == Geometry::kSpherical) {
        for (int32_t u = 0; u < num_users; ++u) {
            auto row = p.user_row(u);
            scale(row, 1.0 / norm(row));
        }
        for (int32_t v = 0; v < num_items; ++v) {
            auto row = p.item_row(v);
            scale(row, 1.0 / norm(row));
        }
    } else {
        // start inside the facet ball so the constraint holds at all times
        Vec fe(static_cast<size_t>(num_facets) * dim);
        auto clamp_row = [&](std::span<double> row, const Vec& proj) {
            project_facets_into(row, proj, num_facets, dim, fe);
            double worst = 0.0;
            for (int32_t k = 0; k < num_facets; ++k)
                worst = std::max(worst, norm({fe.data() + static_cast<size_t>(k) * dim,
                                              static_cast<size_t>(dim)}));
            if (worst > 1.0) scale(row, 1.0 / worst);
        };
        for (int32_t u = 0; u < num_users; ++u) clamp_row(p.user_row(u), p.user_proj);
        for (int32_t v = 0; v < num_items; ++v) clamp_row(p.item_row(v), p.item_proj);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, bit-exact round trip.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'M', 'A', 'R', 'S', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
}

inline void write_tensor(std::ostream& out, const Vec& v) {
    write_pod(out, static_cast<uint64_t>(v.size()));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_tensor(std::istream& in, Vec& v, size_t expected) {
    uint64_t n = 0;
    read_pod(in, n);
    if (n != expected) throw std::runtime_error("checkpoint: tensor size mismatch");
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_pod(out, p.num_users);
    detail::write_pod(out, p.num_items);
    detail::write_pod(out, p.dim);
    detail::write_pod(out, p.num_facets);
    detail::write_pod(out, static_cast<uint8_t>(p.geometry));
    detail::write_pod(out, static_cast<uint8_t>(p.variant));
    detail::write_pod(out, p.seed);
    detail::write_tensor(out, p.user_emb);
    detail::write_tensor(out, p.item_emb);
    detail::write_tensor(out, p.user_proj);
    detail::write_tensor(out, p.item_proj);
    detail::write_tensor(out, p.facet_logits);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    ModelParams p;
    detail::read_pod(in, p.num_users);
    detail::read_pod(in, p.num_items);
    detail::read_pod(in, p.dim);
    detail::read_pod(in, p.num_facets);
    uint8_t geom = 0, variant = 0;
    detail::read_pod(in, geom);
    detail::read_pod(in, variant);
    detail::read_pod(in, p.seed);
    p.geometry = static_cast<Geometry>(geom);
    p.variant = static_cast<Variant>(variant);
    const size_t n = p.num_users, m = p.num_items, d = p.dim, k = p.num_facets;
    detail::read_tensor(in, p.user_emb, n * d);
    detail::read_tensor(in, p.item_emb, m * d);
    detail::read_tensor(in, p.user_proj, k * d * d);
    detail::read_tensor(in, p.item_proj, k * d * d);
    detail::read_tensor(in, p.facet_logits, n * k);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return p;
}

// Writes one file per facet with rows `u<id>` then `i<id>`, each followed by
// the D coordinates of the facet-specific embedding. %.17g keeps doubles
// exact across a round trip.
inline std::vector<std::string> export_facet_embeddings(const ModelParams& p,
                                                        const std::string& prefix) {
    std::vector<std::string> files;
    char buf[64];
    for (int32_t k = 0; k < p.num_facets; ++k) {
        const std::string path = prefix + "facet_" + std::to_string(k) + ".tsv";
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        auto emit = [&](char tag, int32_t id, std::span<const double> row) {
            out << tag << id;
            for (double x : row) {
                std::snprintf(buf, sizeof(buf), "%.17g", x);
                out << '\t' << buf;
            }
            out << '\n';
        };
        Vec fe(static_cast<size_t>(p.num_facets) * p.dim);
        for (int32_t u = 0; u < p.num_users; ++u) {
            project_facets_into(p.user_row(u), p.user_proj, p.num_facets, p.dim, fe);
            emit('u', u, {fe.data() + static_cast<size_t>(k) * p.dim, static_cast<size_t>(p.dim)});
        }
        for (int32_t v = 0; v < p.num_items; ++v) {
            project_facets_into(p.item_row(v), p.item_proj, p.num_facets, p.dim, fe);
            emit('i', v, {fe.data() + static_cast<size_t>(k) * p.dim, static_cast<size_t>(p.dim)});
        }
        files.push_back(path);
    }
    return files;
}

}  // namespace mars
