#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "mars/dataset.hpp"
#include "support/tmpdir.hpp"

using namespace mars;
using testsupport::TempDir;
using testsupport::read_file;
using testsupport::write_file;

TEST_CASE("load_interactions compacts ids and counts pairs", "[dataset]") {
    TempDir dir("load");
    write_file(dir.file("a.tsv"), "alice\tx\nbob\ty\nalice\ty\n");
    const auto ds = load_interactions(dir.file("a.tsv"));
    CHECK(ds.num_users == 2);
    CHECK(ds.num_items == 2);
    CHECK(ds.pairs.size() == 3);
    CHECK(ds.user_raw_ids[0] == "alice");
    CHECK(ds.item_raw_ids[1] == "y");
    CHECK(ds.freq_of_user[0] == 2);
}

TEST_CASE("load_interactions deduplicates keeping earliest timestamp", "[dataset]") {
    TempDir dir("dedup");
    write_file(dir.file("a.tsv"), "a\tx\t30\na\tx\t10\na\tx\t20\n");
    const auto ds = load_interactions(dir.file("a.tsv"));
    REQUIRE(ds.pairs.size() == 1);
    CHECK(ds.freq_of_user[0] == 1);
    CHECK(ds.pairs[0].timestamp == 10);
}

TEST_CASE("load_interactions rejects malformed input", "[dataset]") {
    TempDir dir("bad");
    write_file(dir.file("malformed.tsv"), "a\tx\nnot-a-row\n");
    CHECK_THROWS_WITH(load_interactions(dir.file("malformed.tsv")),
                      Catch::Matchers::ContainsSubstring(":2"));

    write_file(dir.file("empty.tsv"), "");
    CHECK_THROWS(load_interactions(dir.file("empty.tsv")));

    write_file(dir.file("badts.tsv"), "a\tx\tnever\n");
    CHECK_THROWS(load_interactions(dir.file("badts.tsv")));
}

TEST_CASE("load_interactions honors delimiter and header flags", "[dataset]") {
    TempDir dir("fmt");
    write_file(dir.file("a.csv"), "user,item\na,x\nb,y\n");
    const auto ds = load_interactions(dir.file("a.csv"), {',', true});
    CHECK(ds.num_users == 2);
    CHECK(ds.pairs.size() == 2);
}

TEST_CASE("leave_one_out_split follows timestamps", "[dataset]") {
    // user 0: items (0,t=1) (1,t=2) (2,t=3); user 1 has only two interactions
    auto ds = InteractionDataset::build(
        2, 4, {{0, 0, 1}, {0, 1, 2}, {0, 2, 3}, {1, 2, 5}, {1, 3, 6}});
    const auto split = leave_one_out_split(ds, 7);
    CHECK(split.eligible_users == 1);
    CHECK(split.train_only_users == 1);
    CHECK(split.test_item_of_user[0] == 2);
    CHECK(split.dev_item_of_user[0] == 1);
    REQUIRE(split.train.items_of_user[0] == std::vector<int32_t>{0});
    // the two-interaction user keeps everything and is excluded from eval
    CHECK(split.train.freq_of_user[1] == 2);
    CHECK(split.test_item_of_user[1] == -1);
}

TEST_CASE("leave_one_out_split partitions eligible users' pairs", "[dataset]") {
    Rng rng = make_rng(3, "split-partition");
    std::vector<Interaction> pairs;
    for (int32_t u = 0; u < 20; ++u)
        for (int32_t v = 0; v < 30; ++v)
            if (rand_unit(rng) < 0.25) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(20, 30, pairs);
    const auto split = leave_one_out_split(ds, 11);

    std::set<std::pair<int32_t, int32_t>> all, seen;
    for (const auto& p : ds.pairs) all.insert({p.user, p.item});
    auto insert_unique = [&](const Interaction& p) {
        const bool fresh = seen.insert({p.user, p.item}).second;
        CHECK(fresh);
    };
    for (const auto& p : split.train.pairs) insert_unique(p);
    for (const auto& p : split.dev) insert_unique(p);
    for (const auto& p : split.test) insert_unique(p);
    CHECK(seen == all);
    // held-out users always retain a training interaction
    for (const auto& p : split.test) CHECK(split.train.freq_of_user[p.user] >= 1);
}

TEST_CASE("leave_one_out_split without timestamps is seed-reproducible", "[dataset]") {
    Rng rng = make_rng(5, "split-seed");
    std::vector<Interaction> pairs;
    for (int32_t u = 0; u < 15; ++u)
        for (int32_t v = 0; v < 25; ++v)
            if (rand_unit(rng) < 0.3) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(15, 25, pairs);

    TempDir dir_a("split_a"), dir_b("split_b");
    save_split(dir_a.str(), leave_one_out_split(ds, 99));
    save_split(dir_b.str(), leave_one_out_split(ds, 99));
    for (const char* name : {"train.tsv", "dev.tsv", "test.tsv"})
        CHECK(read_file(dir_a.file(name)) == read_file(dir_b.file(name)));

    const auto other = leave_one_out_split(ds, 100);
    const auto base = leave_one_out_split(ds, 99);
    CHECK(base.test_item_of_user != other.test_item_of_user);  // seed actually matters
}

TEST_CASE("split round-trips through save and load", "[dataset]") {
    auto ds = InteractionDataset::build(
        2, 4, {{0, 0, 1}, {0, 1, 2}, {0, 2, 3}, {1, 2, 5}, {1, 3, 6}});
    ds.user_raw_ids = {"u_a", "u_b"};
    ds.item_raw_ids = {"i_a", "i_b", "i_c", "i_d"};
    const auto split = leave_one_out_split(ds, 7);
    TempDir dir("roundtrip");
    save_split(dir.str(), split);
    const auto loaded = load_split(dir.str());
    CHECK(loaded.train.num_users == split.train.num_users);
    CHECK(loaded.train.num_items == split.train.num_items);
    CHECK(loaded.train.pairs.size() == split.train.pairs.size());
    CHECK(loaded.test_item_of_user == split.test_item_of_user);
    CHECK(loaded.dev_item_of_user == split.dev_item_of_user);
    CHECK(loaded.eligible_users == split.eligible_users);
}

TEST_CASE("adaptive margins from the two-hop union", "[dataset]") {
    // N=4: V_u={a,b}, U_a={u,w}, U_b={u} -> union {u,w}, gamma = 1 - 2/4
    const auto ds = InteractionDataset::build(4, 2, {{0, 0, {}}, {1, 0, {}}, {0, 1, {}}});
    const auto m = compute_adaptive_margins(ds);
    CHECK(m.gamma[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(m.gamma[2] == 1.0);  // isolated
    CHECK(m.gamma[3] == 1.0);
}

TEST_CASE("adaptive margins edge values", "[dataset]") {
    // every user shares one item: two-hop union covers all of them
    const auto full = InteractionDataset::build(3, 1, {{0, 0, {}}, {1, 0, {}}, {2, 0, {}}});
    const auto m = compute_adaptive_margins(full);
    for (int32_t u = 0; u < 3; ++u) CHECK(m.gamma[u] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("adaptive margins stay in range on random data", "[dataset]") {
    Rng rng = make_rng(17, "margins-range");
    std::vector<Interaction> pairs;
    const int32_t n = 40;
    for (int32_t u = 0; u < n; ++u)
        for (int32_t v = 0; v < 30; ++v)
            if (rand_unit(rng) < 0.1) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(n, 30, pairs);
    const auto m = compute_adaptive_margins(ds);
    for (int32_t u = 0; u < n; ++u) {
        CHECK(m.gamma[u] >= 0.0);
        CHECK(m.gamma[u] <= 1.0);
        if (ds.freq_of_user[u] > 0) CHECK(m.gamma[u] <= 1.0 - 1.0 / n + 1e-15);
    }
}

TEST_CASE("user sampling distribution follows freq^beta", "[dataset]") {
    std::vector<Interaction> pairs;
    pairs.push_back({0, 0, {}});
    for (int32_t v = 0; v < 16; ++v) pairs.push_back({1, v, {}});
    const auto ds = InteractionDataset::build(2, 16, pairs);

    const auto pr = user_sampling_distribution(ds, 0.8);
    const double w1 = std::pow(16.0, 0.8);
    CHECK(pr[0] == Catch::Approx(1.0 / (1.0 + w1)).epsilon(1e-12));
    CHECK(pr[1] == Catch::Approx(w1 / (1.0 + w1)).epsilon(1e-12));
    CHECK(pr[0] + pr[1] == Catch::Approx(1.0).margin(1e-12));

    const auto uniform = user_sampling_distribution(ds, 0.0);
    CHECK(uniform[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(uniform[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("user sampling distribution degenerate cases", "[dataset]") {
    const auto single = InteractionDataset::build(1, 5, {{0, 0, {}}, {0, 1, {}}});
    CHECK(user_sampling_distribution(single, 0.8)[0] == 1.0);

    const auto empty = InteractionDataset::build(3, 5, {});
    CHECK_THROWS(user_sampling_distribution(empty, 0.8));

    // zero-frequency users get zero probability
    const auto mixed = InteractionDataset::build(3, 5, {{0, 0, {}}, {2, 1, {}}});
    const auto pr = user_sampling_distribution(mixed, 0.8);
    CHECK(pr[1] == 0.0);
}

TEST_CASE("user sampling distribution is invariant to frequency scaling", "[dataset]") {
    // same frequency profile scaled by 3
    std::vector<Interaction> base, scaled;
    const std::vector<int32_t> freqs{2, 5, 9, 1};
    int32_t item = 0;
    for (int32_t u = 0; u < 4; ++u)
        for (int32_t f = 0; f < freqs[u]; ++f) base.push_back({u, item++, {}});
    item = 0;
    for (int32_t u = 0; u < 4; ++u)
        for (int32_t f = 0; f < 3 * freqs[u]; ++f) scaled.push_back({u, item++, {}});

    const auto pr_base = user_sampling_distribution(InteractionDataset::build(4, 100, base), 0.8);
    const auto pr_scaled =
        user_sampling_distribution(InteractionDataset::build(4, 100, scaled), 0.8);
    for (int32_t u = 0; u < 4; ++u)
        CHECK(pr_base[u] == Catch::Approx(pr_scaled[u]).margin(1e-12));
}

TEST_CASE("sum of frequencies equals pair count", "[dataset]") {
    Rng rng = make_rng(23, "freqsum");
    std::vector<Interaction> pairs;
    for (int32_t u = 0; u < 12; ++u)
        for (int32_t v = 0; v < 18; ++v)
            if (rand_unit(rng) < 0.2) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(12, 18, pairs);
    int64_t total = 0;
    for (int32_t f : ds.freq_of_user) total += f;
    CHECK(total == static_cast<int64_t>(ds.pairs.size()));
}

TEST_CASE("sample_batch forced negative and interacted-item exclusion", "[dataset]") {
    // user 0 has 9 of 10 items; item 7 is the only possible negative
    std::vector<Interaction> pairs;
    for (int32_t v = 0; v < 10; ++v)
        if (v != 7) pairs.push_back({0, v, {}});
    const auto ds = InteractionDataset::build(1, 10, pairs);
    const auto dist = user_sampling_distribution(ds, 0.8);
    Rng rng = make_rng(1, "forced");
    for (const auto& t : sample_batch(ds, dist, 64, 1, rng)) CHECK(t.neg_item == 7);
}

TEST_CASE("sample_batch never emits an interacted negative", "[dataset]") {
    Rng data_rng = make_rng(9, "negcheck");
    std::vector<Interaction> pairs;
    for (int32_t u = 0; u < 25; ++u)
        for (int32_t v = 0; v < 25; ++v)
            if (rand_unit(data_rng) < 0.5) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(25, 25, pairs);
    const auto dist = user_sampling_distribution(ds, 0.8);
    Rng rng = make_rng(10, "negdraw");
    for (const auto& t : sample_batch(ds, dist, 4000, 2, rng)) {
        CHECK(ds.user_has_item(t.user, t.pos_item));
        CHECK(!ds.user_has_item(t.user, t.neg_item));
    }
}

TEST_CASE("sample_batch is deterministic under a fixed seed", "[dataset]") {
    Rng data_rng = make_rng(29, "det");
    std::vector<Interaction> pairs;
    for (int32_t u = 0; u < 10; ++u)
        for (int32_t v = 0; v < 20; ++v)
            if (rand_unit(data_rng) < 0.3) pairs.push_back({u, v, {}});
    const auto ds = InteractionDataset::build(10, 20, pairs);
    const auto dist = user_sampling_distribution(ds, 0.8);
    Rng a = make_rng(77, "sampling"), b = make_rng(77, "sampling");
    const auto batch_a = sample_batch(ds, dist, 100, 2, a);
    const auto batch_b = sample_batch(ds, dist, 100, 2, b);
    REQUIRE(batch_a.size() == batch_b.size());
    for (size_t i = 0; i < batch_a.size(); ++i) {
        CHECK(batch_a[i].user == batch_b[i].user);
        CHECK(batch_a[i].pos_item == batch_b[i].pos_item);
        CHECK(batch_a[i].neg_item == batch_b[i].neg_item);
    }
}

TEST_CASE("sample_batch user frequencies match the distribution", "[dataset]") {
    // 100-user long-tailed profile, 1e6 draws, 1% relative error for
    // Pr >= 0.005. Ten heavy users carry ~95% of the mass, so every checked
    // user sits at Pr ~ 0.1 where the Monte Carlo sigma is ~0.3% and the 1%
    // gate is a 3-sigma bound; tail users fall below the check threshold.
    std::vector<Interaction> pairs;
    int32_t item = 0;
    const int32_t n_items = 20000;
    for (int32_t u = 0; u < 100; ++u) {
        const int32_t freq = u < 10 ? 1100 + 60 * u : 2 + u % 3;
        for (int32_t f = 0; f < freq; ++f) pairs.push_back({u, item++, {}});
    }
    const auto ds = InteractionDataset::build(100, n_items, pairs);
    const auto dist = user_sampling_distribution(ds, 0.8);

    Rng rng = make_rng(123, "mc");
    std::vector<int64_t> counts(100, 0);
    const int64_t draws = 1000000;
    const auto batch = sample_batch(ds, dist, static_cast<int32_t>(draws), 1, rng);
    for (const auto& t : batch) ++counts[t.user];
    int checked = 0;
    for (int32_t u = 0; u < 100; ++u) {
        if (dist[u] < 0.005) continue;
        ++checked;
        const double empirical = static_cast<double>(counts[u]) / draws;
        CHECK(std::abs(empirical - dist[u]) / dist[u] < 0.01);
    }
    CHECK(checked == 10);
}

TEST_CASE("sample_batch error cases", "[dataset]") {
    // single user who has every item: no negative exists
    std::vector<Interaction> pairs;
    for (int32_t v = 0; v < 5; ++v) pairs.push_back({0, v, {}});
    const auto ds = InteractionDataset::build(1, 5, pairs);
    const auto dist = user_sampling_distribution(ds, 0.8);
    Rng rng = make_rng(2, "sat");
    CHECK_THROWS(sample_batch(ds, dist, 1, 1, rng));
}

TEST_CASE("conflict dataset replicates the block pattern", "[dataset]") {
    const auto one = generate_conflict_dataset(1, 3);
    CHECK(one.num_users == 3);
    CHECK(one.num_items == 5);
    CHECK(one.pairs.size() == 7);
    CHECK(one.items_of_user[0] == std::vector<int32_t>{0, 1});     // A: items 1,2
    CHECK(one.items_of_user[1] == std::vector<int32_t>{3, 4});     // B: items 4,5
    CHECK(one.items_of_user[2] == std::vector<int32_t>{1, 2, 3});  // C: items 2,3,4
    CHECK(one.users_of_item[1] == std::vector<int32_t>{0, 2});     // item 2: A and C
    CHECK(one.users_of_item[3] == std::vector<int32_t>{1, 2});     // item 4: B and C

    const auto many = generate_conflict_dataset(50, 3);
    CHECK(many.num_users == 150);
    CHECK(many.num_items == 250);
    CHECK(many.pairs.size() == 350);
    for (int b = 0; b < 50; ++b) {
        CHECK(many.items_of_user[3 * b + 2] ==
              std::vector<int32_t>{5 * b + 1, 5 * b + 2, 5 * b + 3});
    }
}
