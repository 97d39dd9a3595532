// Command line front end: split / train / eval / sweep / export / gradcheck /
// synth-conflict. Reports are JSON, data files are delimited text, and every
// command is deterministic under a fixed --seed with --workers 1.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mars/mars.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    bool seed_set = false;
    uint64_t seed = 42;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "flat key = value config file");
    cmd->add_option("--seed", args.seed, "root seed")->each([&](const std::string&) {
        args.seed_set = true;
    });
}

mars::TrainConfig resolve_config(const CommonArgs& common) {
    mars::TrainConfig cfg;
    if (!common.config_path.empty()) cfg = mars::parse_train_config_file(common.config_path);
    if (common.seed_set) cfg.seed = common.seed;
    return cfg;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

json config_to_json(const mars::TrainConfig& cfg) {
    return json{{"variant", mars::to_string(cfg.variant)},
                {"k", cfg.num_facets},
                {"dim", cfg.dim},
                {"epochs", cfg.epochs},
                {"batch_size", cfg.batch_size},
                {"n_neg", cfg.n_neg},
                {"learning_rate", cfg.learning_rate},
                {"lambda_pull", cfg.lambda_pull},
                {"lambda_facet", cfg.lambda_facet},
                {"alpha", cfg.alpha},
                {"beta", cfg.beta},
                {"fixed_margin", cfg.fixed_margin},
                {"seed", cfg.seed},
                {"patience", cfg.patience},
                {"eval_every", cfg.eval_every},
                {"eval_negatives", cfg.eval_negatives},
                {"calibrate", cfg.calibrate},
                {"facet_loss_items", cfg.facet_loss_items},
                {"spherical_facet_separation", cfg.spherical_facet_separation},
                {"workers", cfg.workers}};
}

json report_to_json(const mars::EvalReport& report) {
    json hr = json::object(), ndcg = json::object();
    for (const auto& [cutoff, value] : report.hr) hr[std::to_string(cutoff)] = value;
    for (const auto& [cutoff, value] : report.ndcg) ndcg[std::to_string(cutoff)] = value;
    return json{{"hr", hr},
                {"ndcg", ndcg},
                {"users_evaluated", report.users_evaluated},
                {"users_short_pool", report.users_short_pool}};
}

// ---------------------------------------------------------------------------

int cmd_split(const std::string& input, const std::string& out_dir, const CommonArgs& common,
              char delimiter, bool skip_header) {
    const auto cfg = resolve_config(common);
    const auto ds = mars::load_interactions(input, {delimiter, skip_header});
    const auto split = mars::leave_one_out_split(ds, cfg.seed);

    fs::create_directories(out_dir);
    mars::save_split(out_dir, split);
    const json summary{{"num_users", ds.num_users},
                       {"num_items", ds.num_items},
                       {"pairs_total", ds.pairs.size()},
                       {"pairs_train", split.train.pairs.size()},
                       {"pairs_dev", split.dev.size()},
                       {"pairs_test", split.test.size()},
                       {"eligible_users", split.eligible_users},
                       {"train_only_users", split.train_only_users},
                       {"has_timestamps", ds.has_timestamps()},
                       {"seed", cfg.seed}};
    write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, mars::TrainConfig cfg) {
    const auto split = mars::load_split(data_dir);
    cfg.validate();
    fs::create_directories(out_dir);
    write_text(out_dir + "/config.resolved", mars::format_train_config(cfg));

    std::ostringstream timing;
    char buf[64];
    const auto result = mars::train(
        split, cfg, [&](int32_t epoch, const mars::ModelParams& params, const mars::EpochRecord& rec) {
            std::snprintf(buf, sizeof(buf), "%s/checkpoint_epoch_%04d.bin", out_dir.c_str(), epoch);
            mars::save_checkpoint(params, buf);
            timing << "{\"epoch\":" << epoch << ",\"seconds\":" << rec.seconds << "}\n";
        });

    mars::save_checkpoint(result.params, out_dir + "/checkpoint_best.bin");
    write_text(out_dir + "/train_log.jsonl", result.log.to_jsonl());
    write_text(out_dir + "/timing.jsonl", timing.str());

    json meta = config_to_json(cfg);
    meta["best_epoch"] = result.best_epoch;
    meta["early_stopped"] = result.early_stopped;
    if (!std::isnan(result.best_dev_hr10)) meta["best_dev_hr10"] = result.best_dev_hr10;
    write_text(out_dir + "/run_meta.json", meta.dump(2) + "\n");
    std::cout << meta.dump(2) << std::endl;
    return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint,
             const std::string& out_dir, const mars::TrainConfig& cfg,
             const std::vector<int32_t>& cutoffs, int32_t n_negatives, bool on_dev,
             bool dump_ranks) {
    const auto split = mars::load_split(data_dir);
    const auto params = mars::load_checkpoint(checkpoint);
    mars::EvalProtocol protocol{n_negatives, cutoffs, mars::mix_seed(cfg.seed, "eval"),
                                cfg.workers};
    std::vector<std::pair<int32_t, int32_t>> ranks;
    const auto report =
        mars::evaluate(params, split, protocol, params.geometry,
                       on_dev ? mars::EvalTarget::kDev : mars::EvalTarget::kTest,
                       dump_ranks ? &ranks : nullptr);
    json out = report_to_json(report);
    out["checkpoint"] = checkpoint;
    out["target"] = on_dev ? "dev" : "test";
    out["seed"] = cfg.seed;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir + "/eval.json", out.dump(2) + "\n");
        if (dump_ranks) {
            std::ostringstream lines;
            for (const auto& [u, r] : ranks)
                lines << split.train.user_raw_ids[u] << '\t' << r << '\n';
            write_text(out_dir + "/ranks.tsv", lines.str());
        }
    }
    std::cout << out.dump(2) << std::endl;
    return 0;
}

int cmd_sweep(const std::string& data_dir, const std::string& out_dir, const mars::TrainConfig& base,
              const std::vector<std::string>& grid_specs) {
    std::vector<std::pair<std::string, std::vector<std::string>>> grid;
    for (const auto& spec : grid_specs) {
        const size_t eq = spec.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("bad --grid spec (want key=v1,v2,...): " + spec);
        std::vector<std::string> values;
        std::istringstream vals(spec.substr(eq + 1));
        std::string v;
        while (std::getline(vals, v, ',')) values.push_back(v);
        grid.emplace_back(spec.substr(0, eq), std::move(values));
    }
    const auto split = mars::load_split(data_dir);
    const auto cells = mars::sweep(split, base, grid);

    json out = json::array();
    for (size_t i = 0; i < cells.size(); ++i) {
        json cell{{"rank", i + 1}, {"config", config_to_json(cells[i].config)}};
        if (std::isnan(cells[i].dev_ndcg10))
            cell["dev_ndcg10"] = nullptr;
        else
            cell["dev_ndcg10"] = cells[i].dev_ndcg10;
        if (!cells[i].error.empty()) cell["error"] = cells[i].error;
        out.push_back(std::move(cell));
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir + "/sweep.json", out.dump(2) + "\n");
    }
    std::cout << out.dump(2) << std::endl;
    return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& out_dir) {
    const auto params = mars::load_checkpoint(checkpoint);
    fs::create_directories(out_dir);
    const auto files = mars::export_facet_embeddings(params, out_dir + "/");
    for (const auto& f : files) std::cout << f << '\n';
    return 0;
}

// Finite-difference check of the analytic gradients on a small random model,
// both geometries, each loss term in isolation and combined. --corrupt
// injects an error into one analytic coordinate as a negative control.
int cmd_gradcheck(uint64_t seed, double h, bool corrupt) {
    const int32_t n_users = 7, n_items = 11, dim = 5, num_facets = 3;

    std::vector<mars::Interaction> pairs;
    mars::Rng data_rng = mars::make_rng(seed, "gradcheck.data");
    for (int32_t u = 0; u < n_users; ++u)
        for (int32_t v = 0; v < n_items; ++v)
            if (mars::rand_unit(data_rng) < 0.3) pairs.push_back({u, v, {}});
    auto ds = mars::InteractionDataset::build(n_users, n_items, std::move(pairs));
    const auto margins = mars::compute_adaptive_margins(ds);
    const auto dist = mars::user_sampling_distribution(ds, 0.8);
    mars::Rng batch_rng = mars::make_rng(seed, "gradcheck.batch");
    const auto batch = mars::sample_batch(ds, dist, 8, 1, batch_rng);

    mars::LossConfig loss_cfg;
    loss_cfg.lambda_pull = 0.3;
    loss_cfg.lambda_facet = 0.2;

    bool ok = true;
    for (const auto geom : {mars::Geometry::kEuclidean, mars::Geometry::kSpherical}) {
        const auto variant =
            geom == mars::Geometry::kSpherical ? mars::Variant::kMars : mars::Variant::kMar;
        auto params = mars::init_params(n_users, n_items, dim, num_facets, geom, seed);
        // move to a generic position: near-identity projections leave some
        // facet-loss coordinates close to cancellation, where h=1e-5 central
        // differences bottom out on roundoff before the 1e-4 gate
        mars::Rng pos_rng = mars::make_rng(seed, "gradcheck.pos");
        for (double& v : params.user_proj) v += 0.3 * mars::rand_normal(pos_rng);
        for (double& v : params.item_proj) v += 0.3 * mars::rand_normal(pos_rng);
        for (double& l : params.facet_logits) l = 0.5 * mars::rand_normal(pos_rng);

        const std::vector<std::pair<std::string, mars::TermMask>> terms{
            {"push", {true, false, false}},
            {"pull", {false, true, false}},
            {"facet", {false, false, true}},
            {"total", {true, true, true}}};
        for (const auto& [term, mask] : terms) {
            auto [loss, grads] =
                mars::total_loss_gradients(params, batch, margins, loss_cfg, geom, variant, mask);
            mars::Vec analytic = mars::flatten_gradients(grads, params);
            if (corrupt && !analytic.empty()) analytic[0] += 0.5;
            const mars::Vec fd = mars::finite_difference_gradient(
                [&](const mars::ModelParams& p) {
                    return mars::total_loss(p, batch, margins, loss_cfg, geom, variant, mask).total;
                },
                params, h);

            double worst_by_group[5] = {0, 0, 0, 0, 0};
            double worst = 0.0;
            size_t worst_idx = 0;
            for (size_t i = 0; i < analytic.size(); ++i) {
                double err;
                if (std::abs(analytic[i]) < 1e-8)
                    err = std::abs(fd[i] - analytic[i]) < 1e-8
                              ? 0.0
                              : std::abs(fd[i] - analytic[i]) * 1e4;  // scaled to fail the gate
                else
                    err = std::abs(fd[i] - analytic[i]) / std::abs(analytic[i]);
                const int group = static_cast<int>(mars::param_coordinate_group(params, i));
                worst_by_group[group] = std::max(worst_by_group[group], err);
                if (err > worst) {
                    worst = err;
                    worst_idx = i;
                }
            }
            const bool pass = worst < 1e-4;
            ok = ok && pass;
            std::cout << (pass ? "[PASS] " : "[FAIL] ") << mars::to_string(geom) << "/" << term
                      << ": max rel err " << worst;
            if (!pass) std::cout << " at " << mars::param_coordinate_name(params, worst_idx);
            std::cout << '\n';
            for (int g = 0; g < 5; ++g)
                std::cout << "         " << mars::to_string(static_cast<mars::ParamGroup>(g))
                          << ": " << worst_by_group[g] << '\n';
        }
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << std::endl;
    return ok ? 0 : 1;
}

int cmd_synth_conflict(int blocks, uint64_t seed, const std::string& out_path) {
    const auto ds = mars::generate_conflict_dataset(blocks, seed);
    if (!out_path.empty()) {
        if (const auto parent = fs::path(out_path).parent_path(); !parent.empty())
            fs::create_directories(parent);
        mars::save_interactions(out_path, ds.pairs, ds);
    }
    const json summary{{"num_users", ds.num_users},
                       {"num_items", ds.num_items},
                       {"pairs", ds.pairs.size()},
                       {"blocks", blocks},
                       {"seed", seed}};
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-facet metric learning recommender"};
    app.require_subcommand(1);

    CommonArgs common;

    // split
    auto* split = app.add_subcommand("split", "leave-one-out split of an interactions file");
    std::string input, out_dir, data_dir, checkpoint;
    std::string delimiter = "\t";
    bool skip_header = false;
    split->add_option("--input", input, "interactions file")->required();
    split->add_option("--out", out_dir, "output directory")->required();
    split->add_option("--delimiter", delimiter, "field delimiter (default tab)");
    split->add_flag("--skip-header", skip_header, "skip the first line");
    add_common(split, common);

    // train (flags override --config)
    auto* train = app.add_subcommand("train", "train a model on a split directory");
    train->add_option("--data", data_dir, "split directory")->required();
    train->add_option("--out", out_dir, "output directory")->required();
    add_common(train, common);
    std::string variant_name;
    int32_t k = 0, dim = 0, epochs = -1, batch_size = 0, n_neg = 0, patience = -1, eval_every = 0,
            workers = 0;
    double lr = 0, lambda_pull = -1, lambda_facet = -1, alpha = 0, beta = -1, fixed_margin = 0;
    bool no_calibrate = false, no_facet_items = false, facet_separation = false;
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--variant", variant_name, "cml | mar | mars");
        cmd->add_option("--k", k, "number of facet spaces");
        cmd->add_option("--dim", dim, "embedding dimension");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--batch-size", batch_size, "triplets per batch");
        cmd->add_option("--n-neg", n_neg, "negatives per positive");
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--lambda-pull", lambda_pull, "pull loss weight");
        cmd->add_option("--lambda-facet", lambda_facet, "facet loss weight");
        cmd->add_option("--alpha", alpha, "facet loss scale");
        cmd->add_option("--beta", beta, "sampling bias exponent");
        cmd->add_option("--fixed-margin", fixed_margin, "CML margin");
        cmd->add_option("--patience", patience, "early stopping patience");
        cmd->add_option("--eval-every", eval_every, "epochs between dev evaluations");
        cmd->add_option("--workers", workers, "worker threads (1 = deterministic)");
        cmd->add_flag("--no-calibrate", no_calibrate, "disable the RSGD calibration multiplier");
        cmd->add_flag("--no-facet-loss-items", no_facet_items,
                      "user-only facet-separating loss");
        cmd->add_flag("--spherical-facet-separation", facet_separation,
                      "negate the cosine in the spherical facet term (repulsive form)");
    };
    add_train_flags(train);

    auto apply_train_flags = [&](CLI::App* cmd, mars::TrainConfig& cfg) {
        if (cmd->count("--variant")) cfg.variant = mars::parse_variant(variant_name);
        if (cmd->count("--k")) cfg.num_facets = k;
        if (cmd->count("--dim")) cfg.dim = dim;
        if (cmd->count("--epochs")) cfg.epochs = epochs;
        if (cmd->count("--batch-size")) cfg.batch_size = batch_size;
        if (cmd->count("--n-neg")) cfg.n_neg = n_neg;
        if (cmd->count("--lr")) cfg.learning_rate = lr;
        if (cmd->count("--lambda-pull")) cfg.lambda_pull = lambda_pull;
        if (cmd->count("--lambda-facet")) cfg.lambda_facet = lambda_facet;
        if (cmd->count("--alpha")) cfg.alpha = alpha;
        if (cmd->count("--beta")) cfg.beta = beta;
        if (cmd->count("--fixed-margin")) cfg.fixed_margin = fixed_margin;
        if (cmd->count("--patience")) cfg.patience = patience;
        if (cmd->count("--eval-every")) cfg.eval_every = eval_every;
        if (cmd->count("--workers")) cfg.workers = workers;
        if (no_calibrate) cfg.calibrate = false;
        if (no_facet_items) cfg.facet_loss_items = false;
        if (facet_separation) cfg.spherical_facet_separation = true;
        if (cfg.variant == mars::Variant::kCml && cfg.num_facets != 1) {
            std::cerr << "warning: cml uses a single metric space; forcing k = 1 (was "
                      << cfg.num_facets << ")\n";
            cfg.num_facets = 1;
        }
    };

    // eval
    auto* eval = app.add_subcommand("eval", "rank held-out items under sampled negatives");
    eval->add_option("--data", data_dir, "split directory")->required();
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("--out", out_dir, "output directory (optional)");
    std::vector<int32_t> cutoffs{10, 20};
    int32_t n_negatives = 100;
    bool on_dev = false, dump_ranks = false;
    int32_t eval_workers = 1;
    eval->add_option("--cutoffs", cutoffs, "ranking cutoffs");
    eval->add_option("--n-negatives", n_negatives, "sampled negatives per user");
    eval->add_option("--workers", eval_workers, "worker threads");
    eval->add_flag("--dev", on_dev, "evaluate dev items instead of test");
    eval->add_flag("--dump-ranks", dump_ranks, "write per-user ranks.tsv");
    add_common(eval, common);

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "grid search over config values");
    sweep_cmd->add_option("--data", data_dir, "split directory")->required();
    sweep_cmd->add_option("--out", out_dir, "output directory (optional)");
    std::vector<std::string> grid_specs;
    sweep_cmd->add_option("--grid", grid_specs, "key=v1,v2,... (repeatable)")->required();
    add_common(sweep_cmd, common);
    add_train_flags(sweep_cmd);

    // export
    auto* export_cmd = app.add_subcommand("export", "write per-facet embedding files");
    export_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    export_cmd->add_option("--out", out_dir, "output directory")->required();
    add_common(export_cmd, common);

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    double fd_h = 1e-5;
    bool corrupt = false;
    gradcheck->add_option("--fd-step", fd_h, "finite difference step");
    gradcheck->add_flag("--corrupt", corrupt, "inject an error (negative control)");
    add_common(gradcheck, common);

    // synth-conflict
    auto* synth = app.add_subcommand("synth-conflict", "generate the conflict dataset");
    int32_t blocks = 1;
    std::string synth_out;
    synth->add_option("--blocks", blocks, "number of conflict blocks")->required();
    synth->add_option("--out", synth_out, "output interactions file");
    add_common(synth, common);

    CLI11_PARSE(app, argc, argv);

    try {
        if (split->parsed()) {
            if (delimiter.size() != 1) throw std::runtime_error("--delimiter must be one character");
            return cmd_split(input, out_dir, common, delimiter[0], skip_header);
        }
        if (train->parsed()) {
            auto cfg = resolve_config(common);
            apply_train_flags(train, cfg);
            return cmd_train(data_dir, out_dir, cfg);
        }
        if (eval->parsed()) {
            auto cfg = resolve_config(common);
            if (eval->count("--workers")) cfg.workers = eval_workers;
            return cmd_eval(data_dir, checkpoint, out_dir, cfg, cutoffs, n_negatives, on_dev,
                            dump_ranks);
        }
        if (sweep_cmd->parsed()) {
            auto cfg = resolve_config(common);
            apply_train_flags(sweep_cmd, cfg);
            return cmd_sweep(data_dir, out_dir, cfg, grid_specs);
        }
        if (export_cmd->parsed()) return cmd_export(checkpoint, out_dir);
        if (gradcheck->parsed()) {
            const auto cfg = resolve_config(common);
            return cmd_gradcheck(cfg.seed, fd_h, corrupt);
        }
        if (synth->parsed()) {
            const auto cfg = resolve_config(common);
            return cmd_synth_conflict(blocks, cfg.seed, synth_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
