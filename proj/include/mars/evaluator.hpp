#pragma once

#include <atomic>
#include <iostream>
#include <map>
#include <thread>

#include "mars/dataset.hpp"
#include "mars/model.hpp"

namespace mars {

struct EvalProtocol {
    int32_t n_negatives = 100;
    std::vector<int32_t> cutoffs{10, 20};
    uint64_t seed = 0;
    int workers = 1;
};

struct EvalReport {
    std::map<int32_t, double> hr;    // cutoff -> mean hit ratio
    std::map<int32_t, double> ndcg;  // cutoff -> mean nDCG
    int32_t users_evaluated = 0;
    int32_t users_short_pool = 0;  // users whose negative pool ran short
};

enum class EvalTarget { kTest, kDev };

// 1-based rank with pessimistic ties: the target ranks below every negative
// that scores greater than or equal to it.
inline int32_t rank_test_item(const ModelParams& params, int32_t u, int32_t test_item,
                              std::span<const int32_t> negatives, Geometry geom) {
    std::vector<int32_t> candidates(negatives.begin(), negatives.end());
    candidates.push_back(test_item);
    const Vec scores = score_items(params, u, candidates, geom);
    const double target = scores.back();
    int32_t rank = 1;
    for (size_t i = 0; i + 1 < scores.size(); ++i)
        if (scores[i] >= target) ++rank;
    return rank;
}

namespace detail {

struct UserEvalResult {
    int32_t rank = 0;
    bool evaluated = false;
    bool short_pool = false;
};

}  // namespace detail

// Leave-one-out protocol: for each user holding a target item, draw
// n_negatives distinct items the user never interacted with (train, dev and
// test all excluded), rank the target among them, and average HR@N and
// nDCG@N (single relevant item, so IDCG = 1 and nDCG = 1/log2(rank+1)).
// Negatives are redrawn per call from (protocol.seed, user), which keeps dev
// curves comparable across epochs. Read-only in params; parallel over users.
inline EvalReport evaluate(const ModelParams& params, const SplitDataset& split,
                           const EvalProtocol& protocol, Geometry geom,
                           EvalTarget target = EvalTarget::kTest,
                           std::vector<std::pair<int32_t, int32_t>>* rank_dump = nullptr) {
    const auto& target_items =
        target == EvalTarget::kTest ? split.test_item_of_user : split.dev_item_of_user;
    const int32_t n_users = split.train.num_users;
    const int32_t n_items = split.train.num_items;

    int32_t max_cutoff = 0;
    for (int32_t c : protocol.cutoffs) max_cutoff = std::max(max_cutoff, c);
    if (protocol.n_negatives < max_cutoff)
        std::cerr << "warning: n_negatives (" << protocol.n_negatives
                  << ") is below the largest cutoff (" << max_cutoff << ")\n";

    const ItemFacetCache cache = build_item_facet_cache(params);

    std::vector<detail::UserEvalResult> results(n_users);
    auto eval_user = [&](int32_t u) {
        const int32_t tv = target_items[u];
        if (tv < 0) return;

        std::vector<int32_t> pool;
        pool.reserve(n_items);
        for (int32_t v = 0; v < n_items; ++v) {
            if (v == split.dev_item_of_user[u] || v == split.test_item_of_user[u]) continue;
            if (split.train.user_has_item(u, v)) continue;
            pool.push_back(v);
        }
        const size_t want = static_cast<size_t>(protocol.n_negatives);
        const size_t n_neg = std::min(want, pool.size());

        Rng rng = make_rng(protocol.seed, "eval", static_cast<uint64_t>(u));
        for (size_t i = 0; i < n_neg; ++i)
            std::swap(pool[i], pool[i + rand_index(rng, pool.size() - i)]);

        const auto uf = project_facets(params.user_row(u), params.user_proj, params.num_facets,
                                       params.dim);
        Vec uf_norms(params.num_facets, 0.0);
        if (geom == Geometry::kSpherical)
            for (int32_t k = 0; k < params.num_facets; ++k) uf_norms[k] = norm(uf.row(k));
        const Vec theta = facet_weights(params.logit_row(u));

        const double target_score = score_item_cached(uf, uf_norms, theta, cache, tv, geom);
        int32_t rank = 1;
        for (size_t i = 0; i < n_neg; ++i)
            if (score_item_cached(uf, uf_norms, theta, cache, pool[i], geom) >= target_score)
                ++rank;

        results[u] = {rank, true, n_neg < want};
    };

    const int workers = std::max(1, protocol.workers);
    if (workers == 1) {
        for (int32_t u = 0; u < n_users; ++u) eval_user(u);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int32_t> next{0};
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&]() {
                for (int32_t u = next.fetch_add(1); u < n_users; u = next.fetch_add(1))
                    eval_user(u);
            });
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    std::map<int32_t, double> hr_sum, ndcg_sum;
    for (int32_t c : protocol.cutoffs) hr_sum[c] = ndcg_sum[c] = 0.0;
    for (int32_t u = 0; u < n_users; ++u) {
        const auto& r = results[u];
        if (!r.evaluated) continue;
        ++report.users_evaluated;
        if (r.short_pool) ++report.users_short_pool;
        if (rank_dump) rank_dump->emplace_back(u, r.rank);
        for (int32_t c : protocol.cutoffs) {
            if (r.rank <= c) {
                hr_sum[c] += 1.0;
                ndcg_sum[c] += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
            }
        }
    }
    for (int32_t c : protocol.cutoffs) {
        const double n = std::max(1, report.users_evaluated);
        report.hr[c] = hr_sum[c] / n;
        report.ndcg[c] = ndcg_sum[c] / n;
    }
    return report;
}

}  // namespace mars
