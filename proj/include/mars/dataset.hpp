#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mars/core.hpp"

namespace mars {

// One positive entry of the implicit feedback matrix.
struct Interaction {
    int32_t user = 0;
    int32_t item = 0;
    std::optional<int64_t> timestamp;
};

struct TextFormat {
    char delimiter = '\t';
    bool skip_header = false;
};

struct InteractionDataset {
    int32_t num_users = 0;
    int32_t num_items = 0;
    std::vector<Interaction> pairs;                   // deduplicated positives
    std::vector<std::vector<int32_t>> items_of_user;  // sorted neighbor lists
    std::vector<std::vector<int32_t>> users_of_item;
    std::vector<int32_t> freq_of_user;
    std::vector<std::string> user_raw_ids;  // dense id -> original id
    std::vector<std::string> item_raw_ids;

    bool has_timestamps() const {
        if (pairs.empty()) return false;
        for (const auto& p : pairs)
            if (!p.timestamp) return false;
        return true;
    }

    bool user_has_item(int32_t u, int32_t v) const {
        const auto& items = items_of_user[u];
        return std::binary_search(items.begin(), items.end(), v);
    }

    // Deduplicates (keeping the earliest timestamp, first-appearance order)
    // and builds the index structures. Raw id maps are left to the caller.
    static InteractionDataset build(int32_t n_users, int32_t n_items,
                                    std::vector<Interaction> raw_pairs) {
        InteractionDataset ds;
        ds.num_users = n_users;
        ds.num_items = n_items;

        std::unordered_map<int64_t, size_t> seen;
        seen.reserve(raw_pairs.size());
        ds.pairs.reserve(raw_pairs.size());
        for (const auto& p : raw_pairs) {
            if (p.user < 0 || p.user >= n_users || p.item < 0 || p.item >= n_items)
                throw std::invalid_argument("interaction id out of range");
            const int64_t key = static_cast<int64_t>(p.user) * n_items + p.item;
            auto it = seen.find(key);
            if (it == seen.end()) {
                seen.emplace(key, ds.pairs.size());
                ds.pairs.push_back(p);
            } else {
                auto& kept = ds.pairs[it->second];
                if (p.timestamp && (!kept.timestamp || *p.timestamp < *kept.timestamp))
                    kept.timestamp = p.timestamp;
            }
        }

        ds.items_of_user.assign(n_users, {});
        ds.users_of_item.assign(n_items, {});
        for (const auto& p : ds.pairs) {
            ds.items_of_user[p.user].push_back(p.item);
            ds.users_of_item[p.item].push_back(p.user);
        }
        for (auto& v : ds.items_of_user) std::sort(v.begin(), v.end());
        for (auto& v : ds.users_of_item) std::sort(v.begin(), v.end());
        ds.freq_of_user.resize(n_users);
        for (int32_t u = 0; u < n_users; ++u)
            ds.freq_of_user[u] = static_cast<int32_t>(ds.items_of_user[u].size());
        return ds;
    }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = line.find(delim, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline bool parse_int64(const std::string& s, int64_t& out) {
    if (s.empty()) return false;
    size_t idx = 0;
    try {
        out = std::stoll(s, &idx);
    } catch (...) {
        return false;
    }
    return idx == s.size();
}

}  // namespace detail

// Reads `user<delim>item[<delim>timestamp]` rows, compacting raw ids to dense
// [0,N)/[0,M) ranges in first-appearance order.
inline InteractionDataset load_interactions(const std::string& path, const TextFormat& fmt = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open interactions file: " + path);

    std::unordered_map<std::string, int32_t> user_ids, item_ids;
    std::vector<std::string> user_raw, item_raw;
    std::vector<Interaction> raw_pairs;

    auto intern = [](std::unordered_map<std::string, int32_t>& map,
                     std::vector<std::string>& names, const std::string& raw) {
        auto it = map.find(raw);
        if (it != map.end()) return it->second;
        const int32_t id = static_cast<int32_t>(names.size());
        map.emplace(raw, id);
        names.push_back(raw);
        return id;
    };

    std::string line;
    size_t line_no = 0;
    bool skipped_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (fmt.skip_header && !skipped_header) {
            skipped_header = true;
            continue;
        }
        if (line.empty()) continue;
        const auto fields = detail::split_fields(line, fmt.delimiter);
        if (fields.size() < 2 || fields.size() > 3 || fields[0].empty() || fields[1].empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed row");
        Interaction p;
        p.user = intern(user_ids, user_raw, fields[0]);
        p.item = intern(item_ids, item_raw, fields[1]);
        if (fields.size() == 3 && !fields[2].empty()) {
            int64_t ts;
            if (!detail::parse_int64(fields[2], ts))
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": bad timestamp '" + fields[2] + "'");
            p.timestamp = ts;
        }
        raw_pairs.push_back(p);
    }
    if (raw_pairs.empty()) throw std::runtime_error("empty interactions file: " + path);

    auto ds = InteractionDataset::build(static_cast<int32_t>(user_raw.size()),
                                        static_cast<int32_t>(item_raw.size()),
                                        std::move(raw_pairs));
    ds.user_raw_ids = std::move(user_raw);
    ds.item_raw_ids = std::move(item_raw);
    return ds;
}

inline void save_interactions(const std::string& path, const std::vector<Interaction>& pairs,
                              const InteractionDataset& ids) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    auto raw_user = [&](int32_t u) {
        return ids.user_raw_ids.empty() ? std::to_string(u) : ids.user_raw_ids[u];
    };
    auto raw_item = [&](int32_t v) {
        return ids.item_raw_ids.empty() ? std::to_string(v) : ids.item_raw_ids[v];
    };
    for (const auto& p : pairs) {
        out << raw_user(p.user) << '\t' << raw_item(p.item);
        if (p.timestamp) out << '\t' << *p.timestamp;
        out << '\n';
    }
}

inline void save_id_map(const std::string& path, const std::vector<std::string>& raw_ids) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (size_t i = 0; i < raw_ids.size(); ++i) out << raw_ids[i] << '\t' << i << '\n';
}

// ---------------------------------------------------------------------------
// Leave-one-out split
// ---------------------------------------------------------------------------

struct SplitDataset {
    InteractionDataset train;
    std::vector<Interaction> dev;   // one held-out pair per eligible user
    std::vector<Interaction> test;
    std::vector<int32_t> dev_item_of_user;   // -1 when the user has none
    std::vector<int32_t> test_item_of_user;
    int32_t eligible_users = 0;
    int32_t train_only_users = 0;

    void rebuild_lookup() {
        dev_item_of_user.assign(train.num_users, -1);
        test_item_of_user.assign(train.num_users, -1);
        for (const auto& p : dev) dev_item_of_user[p.user] = p.item;
        for (const auto& p : test) test_item_of_user[p.user] = p.item;
    }
};

// Users with >= 3 interactions give their latest item to test and the
// second-latest to dev; everyone else is train-only. Datasets without
// timestamps hold out two seeded uniform picks instead.
inline SplitDataset leave_one_out_split(const InteractionDataset& ds, uint64_t seed) {
    const bool by_time = ds.has_timestamps();

    // per-user indices into ds.pairs
    std::vector<std::vector<size_t>> of_user(ds.num_users);
    for (size_t i = 0; i < ds.pairs.size(); ++i) of_user[ds.pairs[i].user].push_back(i);

    std::vector<char> held(ds.pairs.size(), 0);  // 0 train, 1 dev, 2 test
    SplitDataset split;
    for (int32_t u = 0; u < ds.num_users; ++u) {
        auto& idx = of_user[u];
        if (idx.size() < 3) {
            if (!idx.empty()) ++split.train_only_users;
            continue;
        }
        ++split.eligible_users;
        size_t test_i, dev_i;
        if (by_time) {
            std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
                const auto& pa = ds.pairs[a];
                const auto& pb = ds.pairs[b];
                if (*pa.timestamp != *pb.timestamp) return *pa.timestamp < *pb.timestamp;
                return pa.item < pb.item;  // deterministic tie-break
            });
            test_i = idx[idx.size() - 1];
            dev_i = idx[idx.size() - 2];
        } else {
            Rng rng = make_rng(seed, "split", static_cast<uint64_t>(u));
            const size_t a = rand_index(rng, idx.size());
            size_t b = rand_index(rng, idx.size() - 1);
            if (b >= a) ++b;
            test_i = idx[a];
            dev_i = idx[b];
        }
        held[test_i] = 2;
        held[dev_i] = 1;
    }

    std::vector<Interaction> train_pairs;
    train_pairs.reserve(ds.pairs.size());
    for (size_t i = 0; i < ds.pairs.size(); ++i)
        if (held[i] == 0) train_pairs.push_back(ds.pairs[i]);
    split.train = InteractionDataset::build(ds.num_users, ds.num_items, std::move(train_pairs));
    split.train.user_raw_ids = ds.user_raw_ids;
    split.train.item_raw_ids = ds.item_raw_ids;

    // dev/test emitted in user order
    std::vector<Interaction> dev_by_user(ds.num_users), test_by_user(ds.num_users);
    std::vector<char> has_holdout(ds.num_users, 0);
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        if (held[i] == 1) dev_by_user[ds.pairs[i].user] = ds.pairs[i];
        if (held[i] == 2) {
            test_by_user[ds.pairs[i].user] = ds.pairs[i];
            has_holdout[ds.pairs[i].user] = 1;
        }
    }
    for (int32_t u = 0; u < ds.num_users; ++u) {
        if (!has_holdout[u]) continue;
        split.dev.push_back(dev_by_user[u]);
        split.test.push_back(test_by_user[u]);
    }
    split.rebuild_lookup();
    return split;
}

inline void save_split(const std::string& dir, const SplitDataset& split) {
    save_interactions(dir + "/train.tsv", split.train.pairs, split.train);
    save_interactions(dir + "/dev.tsv", split.dev, split.train);
    save_interactions(dir + "/test.tsv", split.test, split.train);
    save_id_map(dir + "/user_ids.tsv", split.train.user_raw_ids);
    save_id_map(dir + "/item_ids.tsv", split.train.item_raw_ids);
}

namespace detail {

inline std::vector<std::string> load_id_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open id map: " + path);
    std::vector<std::string> raw;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_fields(line, '\t');
        if (fields.size() != 2) throw std::runtime_error("bad id map row in " + path);
        if (std::stoull(fields[1]) != raw.size())
            throw std::runtime_error("non-contiguous id map: " + path);
        raw.push_back(fields[0]);
    }
    return raw;
}

inline std::vector<Interaction> load_manifest(const std::string& path,
                                              const std::unordered_map<std::string, int32_t>& users,
                                              const std::unordered_map<std::string, int32_t>& items) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<Interaction> pairs;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_fields(line, '\t');
        if (fields.size() < 2 || fields.size() > 3)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed row");
        Interaction p;
        auto uit = users.find(fields[0]);
        auto iit = items.find(fields[1]);
        if (uit == users.end() || iit == items.end())
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": id not in id map");
        p.user = uit->second;
        p.item = iit->second;
        if (fields.size() == 3 && !fields[2].empty()) {
            int64_t ts;
            if (!parse_int64(fields[2], ts))
                throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad timestamp");
            p.timestamp = ts;
        }
        pairs.push_back(p);
    }
    return pairs;
}

}  // namespace detail

// Reconstructs a split written by save_split; the id maps are authoritative
// for N and M (items may appear only in the holdouts).
inline SplitDataset load_split(const std::string& dir) {
    auto user_raw = detail::load_id_map(dir + "/user_ids.tsv");
    auto item_raw = detail::load_id_map(dir + "/item_ids.tsv");
    std::unordered_map<std::string, int32_t> users, items;
    for (size_t i = 0; i < user_raw.size(); ++i) users.emplace(user_raw[i], static_cast<int32_t>(i));
    for (size_t i = 0; i < item_raw.size(); ++i) items.emplace(item_raw[i], static_cast<int32_t>(i));

    SplitDataset split;
    split.train = InteractionDataset::build(
        static_cast<int32_t>(user_raw.size()), static_cast<int32_t>(item_raw.size()),
        detail::load_manifest(dir + "/train.tsv", users, items));
    split.train.user_raw_ids = std::move(user_raw);
    split.train.item_raw_ids = std::move(item_raw);
    split.dev = detail::load_manifest(dir + "/dev.tsv", users, items);
    split.test = detail::load_manifest(dir + "/test.tsv", users, items);
    split.eligible_users = static_cast<int32_t>(split.test.size());
    for (int32_t u = 0; u < split.train.num_users; ++u)
        if (split.train.freq_of_user[u] > 0) ++split.train_only_users;
    split.train_only_users -= split.eligible_users;
    split.rebuild_lookup();
    return split;
}

// ---------------------------------------------------------------------------
// Adaptive margins
// ---------------------------------------------------------------------------

struct AdaptiveMargins {
    Vec gamma;  // per user, in [0, 1]
};

// gamma_u = 1 - |distinct two-hop user neighbors of u| / N, computed on the
// train split. A user with any interaction is their own two-hop neighbor, so
// interacting users land in [0, 1 - 1/N]; isolated users get exactly 1.
inline AdaptiveMargins compute_adaptive_margins(const InteractionDataset& ds) {
    AdaptiveMargins m;
    m.gamma.assign(ds.num_users, 1.0);
    std::vector<int32_t> stamp(ds.num_users, -1);
    for (int32_t u = 0; u < ds.num_users; ++u) {
        if (ds.freq_of_user[u] == 0) continue;
        int32_t count = 0;
        for (int32_t v : ds.items_of_user[u]) {
            for (int32_t w : ds.users_of_item[v]) {
                if (stamp[w] != u) {
                    stamp[w] = u;
                    ++count;
                }
            }
        }
        m.gamma[u] = 1.0 - static_cast<double>(count) / ds.num_users;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Biased user sampling and triplet batches
// ---------------------------------------------------------------------------

// Pr(u) = freq(u)^beta / sum freq^beta; zero-frequency users get zero mass.
inline Vec user_sampling_distribution(const InteractionDataset& ds, double beta) {
    if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
    Vec pr(ds.num_users, 0.0);
    double total = 0.0;
    for (int32_t u = 0; u < ds.num_users; ++u) {
        if (ds.freq_of_user[u] > 0) {
            pr[u] = std::pow(static_cast<double>(ds.freq_of_user[u]), beta);
            total += pr[u];
        }
    }
    if (total <= 0.0) throw std::runtime_error("all user frequencies are zero");
    for (double& p : pr) p /= total;
    return pr;
}

struct Triplet {
    int32_t user;
    int32_t pos_item;
    int32_t neg_item;
};

// Draws batch_size positives (user ~ dist, item uniform in V_u) with n_neg
// uniform non-interacted negatives each. Negatives rejection-sample against
// V_u with a 100-attempt cap, then fall back to scanning the complement.
inline std::vector<Triplet> sample_batch(const InteractionDataset& ds, const Vec& dist,
                                         int batch_size, int n_neg, Rng& rng) {
    if (batch_size < 1 || n_neg < 1) throw std::invalid_argument("batch_size and n_neg must be >= 1");
    if (dist.size() != static_cast<size_t>(ds.num_users))
        throw std::invalid_argument("distribution size mismatch");

    Vec cumulative(ds.num_users);
    double running = 0.0;
    bool any_usable = false;
    for (int32_t u = 0; u < ds.num_users; ++u) {
        running += dist[u];
        cumulative[u] = running;
        if (dist[u] > 0.0 && ds.freq_of_user[u] < ds.num_items) any_usable = true;
    }
    if (running <= 0.0) throw std::runtime_error("sampling distribution has no mass");
    if (!any_usable) throw std::runtime_error("every sampleable user has interacted with all items");

    auto draw_user = [&]() {
        while (true) {
            const double r = rand_unit(rng) * running;
            const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
            int32_t u = static_cast<int32_t>(std::min<ptrdiff_t>(
                it - cumulative.begin(), ds.num_users - 1));
            if (ds.freq_of_user[u] == 0) continue;           // boundary artifact
            if (ds.freq_of_user[u] == ds.num_items) continue;  // saturated user
            return u;
        }
    };

    std::vector<Triplet> batch;
    batch.reserve(static_cast<size_t>(batch_size) * n_neg);
    for (int b = 0; b < batch_size; ++b) {
        const int32_t u = draw_user();
        const auto& pos = ds.items_of_user[u];
        const int32_t v_p = pos[rand_index(rng, pos.size())];
        for (int n = 0; n < n_neg; ++n) {
            int32_t v_q = -1;
            for (int attempt = 0; attempt < 100; ++attempt) {
                const int32_t cand = static_cast<int32_t>(rand_index(rng, ds.num_items));
                if (!ds.user_has_item(u, cand)) {
                    v_q = cand;
                    break;
                }
            }
            if (v_q < 0) {
                std::vector<int32_t> complement;
                complement.reserve(ds.num_items - pos.size());
                for (int32_t v = 0; v < ds.num_items; ++v)
                    if (!ds.user_has_item(u, v)) complement.push_back(v);
                v_q = complement[rand_index(rng, complement.size())];
            }
            batch.push_back({u, v_p, v_q});
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Synthetic conflict dataset
// ---------------------------------------------------------------------------

// Replicates the three-user/five-item block where A likes {1,2}, B likes
// {4,5} and C likes {2,3,4}: items 2 and 4 cannot simultaneously be close to
// and far from each other in one metric space. Blocks are id-disjoint; the
// seed only shuffles the emitted pair order.
inline InteractionDataset generate_conflict_dataset(int n_blocks, uint64_t seed) {
    if (n_blocks < 1) throw std::invalid_argument("n_blocks must be >= 1");
    std::vector<Interaction> pairs;
    pairs.reserve(static_cast<size_t>(n_blocks) * 7);
    for (int b = 0; b < n_blocks; ++b) {
        const int32_t ua = 3 * b, ub = 3 * b + 1, uc = 3 * b + 2;
        const int32_t base = 5 * b;  // items 1..5 of the block
        pairs.push_back({ua, base + 0, {}});
        pairs.push_back({ua, base + 1, {}});
        pairs.push_back({ub, base + 3, {}});
        pairs.push_back({ub, base + 4, {}});
        pairs.push_back({uc, base + 1, {}});
        pairs.push_back({uc, base + 2, {}});
        pairs.push_back({uc, base + 3, {}});
    }
    Rng rng = make_rng(seed, "conflict");
    shuffle_in_place(pairs, rng);
    auto ds = InteractionDataset::build(3 * n_blocks, 5 * n_blocks, std::move(pairs));
    ds.user_raw_ids.resize(ds.num_users);
    ds.item_raw_ids.resize(ds.num_items);
    for (int32_t u = 0; u < ds.num_users; ++u) ds.user_raw_ids[u] = std::to_string(u);
    for (int32_t v = 0; v < ds.num_items; ++v) ds.item_raw_ids[v] = std::to_string(v);
    return ds;
}

}  // namespace mars
