#pragma once

#include <unordered_map>
#include <utility>
#include <vector>

#include "mars/dataset.hpp"
#include "mars/model.hpp"

namespace mars {

struct LossConfig {
    double lambda_pull = 0.1;
    double lambda_facet = 0.01;
    double alpha = 0.1;        // facet-separating loss scale
    double fixed_margin = 1.0; // CML only
    bool facet_loss_items = true;
    // The spherical facet term is logistic in the facet cosine itself, which
    // REWARDS coincident facets; with this flag the cosine enters negated, so
    // the term penalizes alignment and actually separates facet spaces the
    // way the Euclidean distance form does.
    bool spherical_facet_separation = false;
};

struct LossBreakdown {
    double push = 0.0;
    double pull = 0.0;
    double facet = 0.0;
    double total = 0.0;
};

// Selects which terms enter `total` (and the gradients); used to check each
// loss term against the finite-difference oracle in isolation.
struct TermMask {
    bool push = true;
    bool pull = true;
    bool facet = true;
};

// Cotangent image of ModelParams for one minibatch. Embedding and logit
// gradients are keyed by entity id and only hold entities the batch touched;
// projection gradients are dense. Absent keys are exact zeros.
struct Gradients {
    int32_t dim = 0;
    int32_t num_facets = 0;
    std::unordered_map<int32_t, Vec> user_emb;
    std::unordered_map<int32_t, Vec> item_emb;
    std::unordered_map<int32_t, Vec> facet_logits;
    Vec user_proj;  // K x D x D
    Vec item_proj;

    Vec& user_row(int32_t u) {
        auto [it, inserted] = user_emb.try_emplace(u);
        if (inserted) it->second.assign(dim, 0.0);
        return it->second;
    }
    Vec& item_row(int32_t v) {
        auto [it, inserted] = item_emb.try_emplace(v);
        if (inserted) it->second.assign(dim, 0.0);
        return it->second;
    }
    Vec& logit_row(int32_t u) {
        auto [it, inserted] = facet_logits.try_emplace(u);
        if (inserted) it->second.assign(num_facets, 0.0);
        return it->second;
    }
};

namespace detail {

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// d/ds (1/a) log(1 + e^{-a s}) = -1 / (1 + e^{a s})
inline double logistic_pair_dloss(double alpha, double s) {
    return -1.0 / (1.0 + std::exp(alpha * s));
}

// Per-entity state for one batch: facet embedding, per-facet norms under
// spherical geometry, and the accumulated gradient w.r.t. each facet vector.
struct EntityState {
    FacetEmbedding fe;
    Vec norms;       // K (spherical only)
    Vec facet_grad;  // K x D, allocated only when gradients are requested
    Vec theta;       // users appearing in triplets only
    Vec theta_grad;
};

struct BatchWorkspace {
    std::unordered_map<int32_t, EntityState> users, items;

    EntityState& touch(const ModelParams& params, int32_t id, bool is_user, bool want_grads) {
        auto& map = is_user ? users : items;
        auto [it, inserted] = map.try_emplace(id);
        EntityState& st = it->second;
        if (inserted) {
            const auto row = is_user ? params.user_row(id) : params.item_row(id);
            const auto& proj = is_user ? params.user_proj : params.item_proj;
            st.fe = project_facets(row, proj, params.num_facets, params.dim);
            if (params.geometry == Geometry::kSpherical) {
                st.norms.resize(params.num_facets);
                for (int32_t k = 0; k < params.num_facets; ++k) st.norms[k] = norm(st.fe.row(k));
            }
            if (want_grads) st.facet_grad.assign(st.fe.rows.size(), 0.0);
        }
        return st;
    }
};

// Facet-space similarity of one (user, item) facet pair plus its gradient
// coefficients. With coef != 0, accumulates coef * d sim into both sides.
inline double pair_similarity_backward(Geometry geom, std::span<const double> a, double na,
                                       std::span<const double> b, double nb, double coef,
                                       std::span<double> grad_a, std::span<double> grad_b) {
    const size_t d = a.size();
    if (geom == Geometry::kEuclidean) {
        double s = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double diff = a[i] - b[i];
            s -= diff * diff;
            if (coef != 0.0) {
                grad_a[i] += coef * (-2.0 * diff);
                grad_b[i] += coef * (2.0 * diff);
            }
        }
        return s;
    }
    if (na == 0.0 || nb == 0.0)
        throw std::domain_error("zero facet vector under spherical geometry");
    const double inv = 1.0 / (na * nb);
    const double c = dot(a, b) * inv;
    if (coef != 0.0) {
        const double ca = c / (na * na), cb = c / (nb * nb);
        for (size_t i = 0; i < d; ++i) {
            grad_a[i] += coef * (b[i] * inv - ca * a[i]);
            grad_b[i] += coef * (a[i] * inv - cb * b[i]);
        }
    }
    return c;
}

// Same, for a facet pair (i, j) within one entity (cosine form).
inline void cosine_within_backward(EntityState& st, int32_t i, int32_t j, double c, double coef) {
    const auto a = st.fe.row(i);
    const auto b = st.fe.row(j);
    const double na = st.norms[i], nb = st.norms[j];
    const double inv = 1.0 / (na * nb);
    const double ca = c / (na * na), cb = c / (nb * nb);
    const size_t d = a.size();
    std::span<double> ga{st.facet_grad.data() + static_cast<size_t>(i) * d, d};
    std::span<double> gb{st.facet_grad.data() + static_cast<size_t>(j) * d, d};
    for (size_t t = 0; t < d; ++t) {
        ga[t] += coef * (b[t] * inv - ca * a[t]);
        gb[t] += coef * (a[t] * inv - cb * b[t]);
    }
}

struct FacetLossInputs {
    std::vector<int32_t> users;  // sorted distinct
    std::vector<int32_t> items;
};

// Facet-separating loss over the given entities. Euclidean form couples one
// user's and one item's facet gaps inside each exponential; entity lists are
// paired index-wise with the shorter list wrapping. Spherical form is a plain
// mean of per-entity terms (users plus, optionally, items); with
// `cos_separation` the cosine enters negated. `grad_coef` is the weight of
// this loss inside the objective; 0 skips gradient work.
inline double facet_loss_impl(const ModelParams& params, const FacetLossInputs& in, double alpha,
                              Geometry geom, bool include_items, bool cos_separation,
                              BatchWorkspace& ws, double grad_coef, bool want_grads) {
    const int32_t K = params.num_facets;
    if (K < 2) return 0.0;
    const double npairs = 0.5 * K * (K - 1);

    if (geom == Geometry::kEuclidean) {
        const bool pair_items = include_items && !in.items.empty();
        const size_t P = pair_items ? std::max(in.users.size(), in.items.size()) : in.users.size();
        if (P == 0) return 0.0;
        const double unit = 1.0 / (static_cast<double>(P) * npairs);
        double sum = 0.0;
        for (size_t z = 0; z < P; ++z) {
            EntityState& su = ws.touch(params, in.users[z % in.users.size()], true, want_grads);
            EntityState* sv = pair_items
                                  ? &ws.touch(params, in.items[z % in.items.size()], false, want_grads)
                                  : nullptr;
            for (int32_t i = 0; i < K; ++i) {
                for (int32_t j = i + 1; j < K; ++j) {
                    double s = squared_distance(su.fe.row(i), su.fe.row(j));
                    if (sv) s += squared_distance(sv->fe.row(i), sv->fe.row(j));
                    sum += softplus(-alpha * s) / alpha;
                    if (want_grads && grad_coef != 0.0) {
                        const double w = grad_coef * unit * logistic_pair_dloss(alpha, s);
                        auto add = [&](EntityState& st) {
                            const auto a = st.fe.row(i);
                            const auto b = st.fe.row(j);
                            const size_t d = a.size();
                            std::span<double> ga{st.facet_grad.data() + static_cast<size_t>(i) * d, d};
                            std::span<double> gb{st.facet_grad.data() + static_cast<size_t>(j) * d, d};
                            for (size_t t = 0; t < d; ++t) {
                                const double diff2 = 2.0 * (a[t] - b[t]);
                                ga[t] += w * diff2;
                                gb[t] -= w * diff2;
                            }
                        };
                        add(su);
                        if (sv) add(*sv);
                    }
                }
            }
        }
        return sum * unit;
    }

    // spherical: separable user and item terms
    const double cos_sign = cos_separation ? -1.0 : 1.0;
    auto side = [&](const std::vector<int32_t>& ids, bool is_user) {
        if (ids.empty()) return 0.0;
        const double unit = 1.0 / (static_cast<double>(ids.size()) * npairs);
        double sum = 0.0;
        for (int32_t id : ids) {
            EntityState& st = ws.touch(params, id, is_user, want_grads);
            for (int32_t i = 0; i < K; ++i) {
                for (int32_t j = i + 1; j < K; ++j) {
                    if (st.norms[i] == 0.0 || st.norms[j] == 0.0)
                        throw std::domain_error("zero facet vector under spherical geometry");
                    const double c = dot(st.fe.row(i), st.fe.row(j)) / (st.norms[i] * st.norms[j]);
                    sum += softplus(-alpha * cos_sign * c) / alpha;
                    if (want_grads && grad_coef != 0.0)
                        cosine_within_backward(
                            st, i, j, c,
                            grad_coef * unit * cos_sign *
                                logistic_pair_dloss(alpha, cos_sign * c));
                }
            }
        }
        return sum * unit;
    };
    double loss = side(in.users, true);
    if (include_items) loss += side(in.items, false);
    return loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Batch objective: push + lambda_pull * pull + lambda_facet * facet, with the
// margin gamma_u (or the fixed CML margin) inside the hinge. One pass
// computes losses and, when requested, exact gradients for every touched
// parameter: hinge subgradients (ties inactive), similarity gradients with
// all norm terms, the softmax Jacobian for facet logits, and projection
// gradients via outer products.
// ---------------------------------------------------------------------------

inline LossBreakdown evaluate_batch(const ModelParams& params, const std::vector<Triplet>& batch,
                                    const AdaptiveMargins& margins, const LossConfig& cfg,
                                    Geometry geom, Variant variant, TermMask mask,
                                    Gradients* grads) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    if (variant != Variant::kCml &&
        margins.gamma.size() != static_cast<size_t>(params.num_users))
        throw std::invalid_argument("margins not computed for this dataset");

    const int32_t K = params.num_facets;
    const int32_t D = params.dim;
    const bool want_grads = grads != nullptr;
    const bool spherical = geom == Geometry::kSpherical;
    const double lambda_facet = variant == Variant::kCml ? 0.0 : cfg.lambda_facet;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    if (want_grads) {
        grads->dim = D;
        grads->num_facets = K;
        grads->user_proj.assign(params.user_proj.size(), 0.0);
        grads->item_proj.assign(params.item_proj.size(), 0.0);
    }

    detail::BatchWorkspace ws;
    LossBreakdown out;

    Vec sims_p(K), sims_q(K);
    for (const Triplet& t : batch) {
        detail::EntityState& su = ws.touch(params, t.user, true, want_grads);
        detail::EntityState& sp = ws.touch(params, t.pos_item, false, want_grads);
        detail::EntityState& sq = ws.touch(params, t.neg_item, false, want_grads);
        if (su.theta.empty()) {
            su.theta = facet_weights(params.logit_row(t.user));
            if (want_grads) su.theta_grad.assign(K, 0.0);
        }

        double g_p = 0.0, g_q = 0.0;
        for (int32_t k = 0; k < K; ++k) {
            const double na = spherical ? su.norms[k] : 0.0;
            sims_p[k] = detail::pair_similarity_backward(
                geom, su.fe.row(k), na, sp.fe.row(k), spherical ? sp.norms[k] : 0.0, 0.0, {}, {});
            sims_q[k] = detail::pair_similarity_backward(
                geom, su.fe.row(k), na, sq.fe.row(k), spherical ? sq.norms[k] : 0.0, 0.0, {}, {});
            g_p += su.theta[k] * sims_p[k];
            g_q += su.theta[k] * sims_q[k];
        }

        const double margin =
            variant == Variant::kCml ? cfg.fixed_margin : margins.gamma[t.user];
        const double hinge = margin - g_p + g_q;
        if (hinge > 0.0) out.push += hinge;
        out.pull += -g_p;

        if (!want_grads) continue;
        const double push_w = (mask.push && hinge > 0.0) ? inv_batch : 0.0;
        const double pull_w = mask.pull ? cfg.lambda_pull * inv_batch : 0.0;
        const double c_p = -(push_w + pull_w);  // d total / d g_p
        const double c_q = push_w;              // d total / d g_q
        if (c_p == 0.0 && c_q == 0.0) continue;

        for (int32_t k = 0; k < K; ++k) {
            su.theta_grad[k] += c_p * sims_p[k] + c_q * sims_q[k];
            std::span<double> gu{su.facet_grad.data() + static_cast<size_t>(k) * D,
                                 static_cast<size_t>(D)};
            const double na = spherical ? su.norms[k] : 0.0;
            if (c_p != 0.0) {
                std::span<double> gp{sp.facet_grad.data() + static_cast<size_t>(k) * D,
                                     static_cast<size_t>(D)};
                detail::pair_similarity_backward(geom, su.fe.row(k), na, sp.fe.row(k),
                                                 spherical ? sp.norms[k] : 0.0,
                                                 su.theta[k] * c_p, gu, gp);
            }
            if (c_q != 0.0) {
                std::span<double> gq{sq.facet_grad.data() + static_cast<size_t>(k) * D,
                                     static_cast<size_t>(D)};
                detail::pair_similarity_backward(geom, su.fe.row(k), na, sq.fe.row(k),
                                                 spherical ? sq.norms[k] : 0.0,
                                                 su.theta[k] * c_q, gu, gq);
            }
        }
    }
    out.push *= inv_batch;
    out.pull *= inv_batch;

    // facet-separating term over the batch's distinct entities
    detail::FacetLossInputs fin;
    {
        fin.users.reserve(ws.users.size());
        fin.items.reserve(ws.items.size());
        for (const auto& [id, _] : ws.users) fin.users.push_back(id);
        for (const auto& [id, _] : ws.items) fin.items.push_back(id);
        std::sort(fin.users.begin(), fin.users.end());
        std::sort(fin.items.begin(), fin.items.end());
    }
    out.facet = detail::facet_loss_impl(params, fin, cfg.alpha, geom, cfg.facet_loss_items,
                                        cfg.spherical_facet_separation, ws,
                                        mask.facet ? lambda_facet : 0.0, want_grads);

    out.total = (mask.push ? out.push : 0.0) + (mask.pull ? cfg.lambda_pull * out.pull : 0.0) +
                (mask.facet ? lambda_facet * out.facet : 0.0);

    if (!want_grads) return out;

    // softmax Jacobian: d total / d logit_k = theta_k (tg_k - sum_j theta_j tg_j)
    for (auto& [u, st] : ws.users) {
        if (st.theta_grad.empty()) continue;
        double mean = 0.0;
        for (int32_t k = 0; k < K; ++k) mean += st.theta[k] * st.theta_grad[k];
        auto& lg = grads->logit_row(u);
        for (int32_t k = 0; k < K; ++k) lg[k] += st.theta[k] * (st.theta_grad[k] - mean);
    }

    // projection backward: d/dx_i = sum_k proj^k[i,:] . G_k, d/dproj^k[i,j] = x_i G_k[j]
    auto backward_entity = [&](int32_t id, detail::EntityState& st, bool is_user) {
        const auto x = is_user ? params.user_row(id) : params.item_row(id);
        const auto& proj = is_user ? params.user_proj : params.item_proj;
        auto& row_grad = is_user ? grads->user_row(id) : grads->item_row(id);
        auto& proj_grad = is_user ? grads->user_proj : grads->item_proj;
        for (int32_t k = 0; k < K; ++k) {
            const double* gk = st.facet_grad.data() + static_cast<size_t>(k) * D;
            const double* mat = proj.data() + static_cast<size_t>(k) * D * D;
            double* dmat = proj_grad.data() + static_cast<size_t>(k) * D * D;
            for (int32_t i = 0; i < D; ++i) {
                const double* mrow = mat + static_cast<size_t>(i) * D;
                double* drow = dmat + static_cast<size_t>(i) * D;
                double acc = 0.0;
                const double xi = x[i];
                for (int32_t j = 0; j < D; ++j) {
                    acc += mrow[j] * gk[j];
                    drow[j] += xi * gk[j];
                }
                row_grad[i] += acc;
            }
        }
    };
    for (auto& [id, st] : ws.users) backward_entity(id, st, true);
    for (auto& [id, st] : ws.items) backward_entity(id, st, false);
    return out;
}

inline double loss_push(const ModelParams& params, const std::vector<Triplet>& batch,
                        const AdaptiveMargins& margins, const LossConfig& cfg, Geometry geom,
                        Variant variant) {
    return evaluate_batch(params, batch, margins, cfg, geom, variant,
                          {.push = true, .pull = false, .facet = false}, nullptr)
        .push;
}

// mean over pairs of -g(u, v_p)
inline double loss_pull(const ModelParams& params,
                        const std::vector<std::pair<int32_t, int32_t>>& positives, Geometry geom) {
    if (positives.empty()) throw std::invalid_argument("empty positives list");
    double sum = 0.0;
    for (const auto& [u, v] : positives) sum += -cross_facet_similarity(params, u, v, geom);
    return sum / static_cast<double>(positives.size());
}

inline double loss_facet(const ModelParams& params, std::vector<int32_t> touched_users,
                         std::vector<int32_t> touched_items, double alpha, Geometry geom,
                         bool include_items = true, bool cos_separation = false) {
    std::sort(touched_users.begin(), touched_users.end());
    touched_users.erase(std::unique(touched_users.begin(), touched_users.end()), touched_users.end());
    std::sort(touched_items.begin(), touched_items.end());
    touched_items.erase(std::unique(touched_items.begin(), touched_items.end()), touched_items.end());
    detail::BatchWorkspace ws;
    return detail::facet_loss_impl(params, {std::move(touched_users), std::move(touched_items)},
                                   alpha, geom, include_items, cos_separation, ws, 0.0, false);
}

inline LossBreakdown total_loss(const ModelParams& params, const std::vector<Triplet>& batch,
                                const AdaptiveMargins& margins, const LossConfig& cfg,
                                Geometry geom, Variant variant, TermMask mask = {}) {
    return evaluate_batch(params, batch, margins, cfg, geom, variant, mask, nullptr);
}

inline std::pair<LossBreakdown, Gradients> total_loss_gradients(
    const ModelParams& params, const std::vector<Triplet>& batch, const AdaptiveMargins& margins,
    const LossConfig& cfg, Geometry geom, Variant variant, TermMask mask = {}) {
    Gradients grads;
    LossBreakdown loss = evaluate_batch(params, batch, margins, cfg, geom, variant, mask, &grads);
    return {loss, std::move(grads)};
}

}  // namespace mars
