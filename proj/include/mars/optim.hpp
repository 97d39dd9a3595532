#pragma once

#include <functional>
#include <string>

#include "mars/objective.hpp"

namespace mars {

struct OptimConfig {
    double learning_rate = 0.01;
    double grad_epsilon = 1e-12;  // zero-gradient guard in the calibration multiplier
    bool calibrate = true;        // false recovers plain Riemannian SGD (retraction form)
};

// (I - x x^T) g for unit x
inline Vec tangent_project(std::span<const double> x, std::span<const double> g) {
    Vec out(g.begin(), g.end());
    const double xg = dot(x, g);
    for (size_t i = 0; i < out.size(); ++i) out[i] -= xg * x[i];
    return out;
}

// R_x(z) = (x + z) / ||x + z||; for tangent z the denominator is >= 1
inline Vec retract(std::span<const double> x, std::span<const double> z) {
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + z[i];
    const double n = norm(out);
    scale(out, 1.0 / n);
    return out;
}

// x <- R_x(-eta (1 + x.g/||g||) (I - x x^T) g). The multiplier lies in [0, 2]
// for unit x by Cauchy-Schwarz. Returns the multiplier actually applied
// (1 when the zero-gradient guard skips the update or calibration is off).
inline double calibrated_rsgd_step(std::span<double> x, std::span<const double> g,
                                   const OptimConfig& cfg) {
    double gnorm_sq = 0.0;
    for (double v : g) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite gradient");
        gnorm_sq += v * v;
    }
    const double gnorm = std::sqrt(gnorm_sq);
    if (gnorm < cfg.grad_epsilon) return 1.0;

    const double xg = dot(x, g);
    const double multiplier = cfg.calibrate ? 1.0 + xg / gnorm : 1.0;
    const double step = -cfg.learning_rate * multiplier;

    // z = step * (g - (x.g) x); x <- (x + z)/||x + z||
    double nsq = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        x[i] += step * (g[i] - xg * x[i]);
        nsq += x[i] * x[i];
    }
    const double inv = 1.0 / std::sqrt(nsq);
    for (double& v : x) v *= inv;
    return multiplier;
}

namespace detail {

// max_k || proj^k applied to row ||
inline double max_facet_norm(std::span<const double> row, const Vec& proj, int32_t K, int32_t D,
                             Vec& scratch) {
    scratch.resize(static_cast<size_t>(K) * D);
    project_facets_into(row, proj, K, D, scratch);
    double worst = 0.0;
    for (int32_t k = 0; k < K; ++k)
        worst = std::max(worst, norm({scratch.data() + static_cast<size_t>(k) * D,
                                      static_cast<size_t>(D)}));
    return worst;
}

}  // namespace detail

// Plain SGD on every parameter, then the facet ball constraint: each touched
// entity whose largest facet-embedding norm exceeds 1 has its universal row
// rescaled by 1/max_k ||e^k||, which rescales all facets linearly.
inline void projected_sgd_step(ModelParams& params, const Gradients& grads,
                               const OptimConfig& cfg) {
    const double eta = cfg.learning_rate;
    for (const auto& [u, g] : grads.user_emb) axpy(-eta, g, params.user_row(u));
    for (const auto& [v, g] : grads.item_emb) axpy(-eta, g, params.item_row(v));
    axpy(-eta, grads.user_proj, params.user_proj);
    axpy(-eta, grads.item_proj, params.item_proj);
    for (const auto& [u, g] : grads.facet_logits) axpy(-eta, g, params.logit_row(u));

    Vec scratch;
    for (const auto& [u, g] : grads.user_emb) {
        auto row = params.user_row(u);
        const double worst =
            detail::max_facet_norm(row, params.user_proj, params.num_facets, params.dim, scratch);
        if (worst > 1.0) scale(row, 1.0 / worst);
    }
    for (const auto& [v, g] : grads.item_emb) {
        auto row = params.item_row(v);
        const double worst =
            detail::max_facet_norm(row, params.item_proj, params.num_facets, params.dim, scratch);
        if (worst > 1.0) scale(row, 1.0 / worst);
    }
}

// Touched embedding rows move by calibrated Riemannian steps on the unit
// sphere; projections and facet logits take plain Euclidean steps.
inline void spherical_sgd_step(ModelParams& params, const Gradients& grads,
                               const OptimConfig& cfg) {
    for (const auto& [u, g] : grads.user_emb) calibrated_rsgd_step(params.user_row(u), g, cfg);
    for (const auto& [v, g] : grads.item_emb) calibrated_rsgd_step(params.item_row(v), g, cfg);
    const double eta = cfg.learning_rate;
    axpy(-eta, grads.user_proj, params.user_proj);
    axpy(-eta, grads.item_proj, params.item_proj);
    for (const auto& [u, g] : grads.facet_logits) axpy(-eta, g, params.logit_row(u));
}

inline void apply_step(ModelParams& params, const Gradients& grads, const OptimConfig& cfg) {
    if (params.geometry == Geometry::kSpherical)
        spherical_sgd_step(params, grads, cfg);
    else
        projected_sgd_step(params, grads, cfg);
}

// ---------------------------------------------------------------------------
// Flat coordinate view of ModelParams, shared by the finite-difference oracle
// and the gradcheck report.
// ---------------------------------------------------------------------------

enum class ParamGroup { kUserEmb, kItemEmb, kUserProj, kItemProj, kFacetLogits };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::kUserEmb: return "user_emb";
        case ParamGroup::kItemEmb: return "item_emb";
        case ParamGroup::kUserProj: return "user_proj";
        case ParamGroup::kItemProj: return "item_proj";
        default: return "facet_logits";
    }
}

inline size_t param_coordinate_count(const ModelParams& p) {
    return p.user_emb.size() + p.item_emb.size() + p.user_proj.size() + p.item_proj.size() +
           p.facet_logits.size();
}

inline double& param_coordinate(ModelParams& p, size_t idx) {
    if (idx < p.user_emb.size()) return p.user_emb[idx];
    idx -= p.user_emb.size();
    if (idx < p.item_emb.size()) return p.item_emb[idx];
    idx -= p.item_emb.size();
    if (idx < p.user_proj.size()) return p.user_proj[idx];
    idx -= p.user_proj.size();
    if (idx < p.item_proj.size()) return p.item_proj[idx];
    idx -= p.item_proj.size();
    return p.facet_logits[idx];
}

inline ParamGroup param_coordinate_group(const ModelParams& p, size_t idx) {
    if (idx < p.user_emb.size()) return ParamGroup::kUserEmb;
    idx -= p.user_emb.size();
    if (idx < p.item_emb.size()) return ParamGroup::kItemEmb;
    idx -= p.item_emb.size();
    if (idx < p.user_proj.size()) return ParamGroup::kUserProj;
    idx -= p.user_proj.size();
    if (idx < p.item_proj.size()) return ParamGroup::kItemProj;
    return ParamGroup::kFacetLogits;
}

inline std::string param_coordinate_name(const ModelParams& p, size_t idx) {
    auto entry = [&](ParamGroup g, size_t local, size_t row_len) {
        return std::string(to_string(g)) + "[" + std::to_string(local / row_len) + "][" +
               std::to_string(local % row_len) + "]";
    };
    if (idx < p.user_emb.size()) return entry(ParamGroup::kUserEmb, idx, p.dim);
    idx -= p.user_emb.size();
    if (idx < p.item_emb.size()) return entry(ParamGroup::kItemEmb, idx, p.dim);
    idx -= p.item_emb.size();
    const size_t dd = static_cast<size_t>(p.dim) * p.dim;
    if (idx < p.user_proj.size()) return entry(ParamGroup::kUserProj, idx, dd);
    idx -= p.user_proj.size();
    if (idx < p.item_proj.size()) return entry(ParamGroup::kItemProj, idx, dd);
    idx -= p.item_proj.size();
    return entry(ParamGroup::kFacetLogits, idx, p.num_facets);
}

inline Vec flatten_gradients(const Gradients& g, const ModelParams& p) {
    Vec flat(param_coordinate_count(p), 0.0);
    size_t base = 0;
    for (const auto& [u, row] : g.user_emb)
        for (int32_t i = 0; i < p.dim; ++i) flat[base + static_cast<size_t>(u) * p.dim + i] = row[i];
    base += p.user_emb.size();
    for (const auto& [v, row] : g.item_emb)
        for (int32_t i = 0; i < p.dim; ++i) flat[base + static_cast<size_t>(v) * p.dim + i] = row[i];
    base += p.item_emb.size();
    for (size_t i = 0; i < g.user_proj.size(); ++i) flat[base + i] = g.user_proj[i];
    base += p.user_proj.size();
    for (size_t i = 0; i < g.item_proj.size(); ++i) flat[base + i] = g.item_proj[i];
    base += p.item_proj.size();
    for (const auto& [u, row] : g.facet_logits)
        for (int32_t k = 0; k < p.num_facets; ++k)
            flat[base + static_cast<size_t>(u) * p.num_facets + k] = row[k];
    return flat;
}

// Central differences over every raw coordinate, with no re-normalization of
// spherical rows during perturbation: this probes the ambient Euclidean
// gradient that the calibrated update consumes.
inline Vec finite_difference_gradient(const std::function<double(const ModelParams&)>& loss_fn,
                                      const ModelParams& params, double h = 1e-5) {
    if (h <= 0.0) throw std::invalid_argument("h must be positive");
    ModelParams work = params;
    const size_t n = param_coordinate_count(work);
    Vec grad(n);
    for (size_t idx = 0; idx < n; ++idx) {
        double& coord = param_coordinate(work, idx);
        const double original = coord;
        coord = original + h;
        const double plus = loss_fn(work);
        coord = original - h;
        const double minus = loss_fn(work);
        coord = original;
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    return grad;
}

}  // namespace mars
