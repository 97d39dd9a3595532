#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "mars/evaluator.hpp"
#include "mars/optim.hpp"

namespace mars {

struct TrainConfig {
    Variant variant = Variant::kMar;
    int32_t num_facets = 2;   // K
    int32_t dim = 32;         // D
    int32_t epochs = 20;
    int32_t batch_size = 1000;
    int32_t n_neg = 1;
    double learning_rate = 0.01;
    double lambda_pull = 0.1;
    double lambda_facet = 0.01;
    double alpha = 0.1;
    double beta = 0.8;
    double fixed_margin = 1.0;  // CML
    uint64_t seed = 42;
    int32_t patience = 10;    // dev evaluations without improvement before stopping
    int32_t eval_every = 1;   // epochs between dev evaluations
    int32_t eval_negatives = 100;
    bool calibrate = true;          // MARS multiplier; false gives plain RSGD
    bool facet_loss_items = true;
    bool spherical_facet_separation = false;
    int32_t workers = 1;

    Geometry geometry() const { return geometry_of(variant); }

    LossConfig loss_config() const {
        return {lambda_pull,       lambda_facet,
                alpha,             fixed_margin,
                facet_loss_items,  spherical_facet_separation};
    }

    void validate() const {
        if (num_facets < 1 || dim < 1) throw std::invalid_argument("K and D must be >= 1");
        if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (batch_size < 1 || n_neg < 1)
            throw std::invalid_argument("batch_size and n_neg must be >= 1");
        if (learning_rate <= 0.0) throw std::invalid_argument("learning_rate must be > 0");
        if (lambda_pull < 0.0 || lambda_facet < 0.0)
            throw std::invalid_argument("lambda weights must be >= 0");
        if (alpha <= 0.0) throw std::invalid_argument("alpha must be > 0");
        if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
        if (fixed_margin <= 0.0) throw std::invalid_argument("fixed_margin must be > 0");
        if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
        if (variant == Variant::kCml && num_facets != 1)
            throw std::invalid_argument("CML requires K = 1");
    }
};

struct EpochRecord {
    int32_t epoch = 0;
    LossBreakdown loss;  // mean over the epoch's batches
    double dev_hr10 = std::numeric_limits<double>::quiet_NaN();
    double dev_ndcg10 = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;  // wall clock since training start; diagnostics only
};

struct TrainLog {
    std::vector<EpochRecord> records;

    // deterministic fields only; timing goes to a sidecar (see cmd_train)
    std::string to_jsonl() const {
        std::ostringstream out;
        char buf[64];
        auto num = [&](double x) {
            if (std::isnan(x)) return std::string("null");
            std::snprintf(buf, sizeof(buf), "%.17g", x);
            return std::string(buf);
        };
        for (const auto& r : records) {
            out << "{\"epoch\":" << r.epoch << ",\"push\":" << num(r.loss.push)
                << ",\"pull\":" << num(r.loss.pull) << ",\"facet\":" << num(r.loss.facet)
                << ",\"total\":" << num(r.loss.total) << ",\"dev_hr10\":" << num(r.dev_hr10)
                << ",\"dev_ndcg10\":" << num(r.dev_ndcg10) << "}\n";
        }
        return out.str();
    }
};

struct TrainResult {
    ModelParams params;  // best-dev checkpoint (final params when dev is empty)
    TrainLog log;
    double best_dev_hr10 = std::numeric_limits<double>::quiet_NaN();
    int32_t best_epoch = 0;
    bool early_stopped = false;
};

// Called after each dev evaluation with the current params; used by the CLI
// to write periodic checkpoints.
using EvalCallback = std::function<void(int32_t epoch, const ModelParams&, const EpochRecord&)>;

// Runs ceil(|train| / batch_size) batches per epoch: biased sampling, one
// gradient evaluation, one optimizer step by variant. Dev HR@10 is evaluated
// every eval_every epochs and the best-dev checkpoint is returned; training
// stops early after `patience` evaluations without improvement. Non-finite
// or exploding loss aborts.
inline TrainResult train(const SplitDataset& split, const TrainConfig& cfg,
                         const EvalCallback& on_eval = nullptr) {
    cfg.validate();
    const Geometry geom = cfg.geometry();
    const InteractionDataset& ds = split.train;
    if (ds.pairs.empty()) throw std::invalid_argument("empty training set");

    const AdaptiveMargins margins = compute_adaptive_margins(ds);
    const Vec dist = user_sampling_distribution(ds, cfg.beta);
    const LossConfig loss_cfg = cfg.loss_config();
    const OptimConfig optim_cfg{cfg.learning_rate, 1e-12, cfg.calibrate};

    TrainResult result;
    result.params = init_params(ds.num_users, ds.num_items, cfg.dim, cfg.num_facets, geom, cfg.seed);
    result.params.variant = cfg.variant;
    if (cfg.epochs == 0) return result;

    Rng sampling_rng = make_rng(cfg.seed, "sampling");
    EvalProtocol dev_protocol{cfg.eval_negatives, {10}, mix_seed(cfg.seed, "eval"), cfg.workers};
    const bool have_dev = !split.dev.empty();

    const int32_t batches_per_epoch = static_cast<int32_t>(
        (ds.pairs.size() + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size));

    ModelParams best = result.params;
    double best_hr = -1.0;
    int32_t best_epoch = 0;
    int32_t evals_since_best = 0;
    bool stopped = false;
    const auto t0 = std::chrono::steady_clock::now();

    for (int32_t epoch = 1; epoch <= cfg.epochs && !stopped; ++epoch) {
        LossBreakdown epoch_loss;
        for (int32_t b = 0; b < batches_per_epoch; ++b) {
            const auto batch = sample_batch(ds, dist, cfg.batch_size, cfg.n_neg, sampling_rng);
            auto [loss, grads] = total_loss_gradients(result.params, batch, margins, loss_cfg,
                                                      geom, cfg.variant);
            if (!std::isfinite(loss.total) || std::abs(loss.total) > 1e6) {
                std::ostringstream msg;
                msg << "training diverged at epoch " << epoch << " batch " << b
                    << ": total loss = " << loss.total;
                throw std::runtime_error(msg.str());
            }
            apply_step(result.params, grads, optim_cfg);
            epoch_loss.push += loss.push;
            epoch_loss.pull += loss.pull;
            epoch_loss.facet += loss.facet;
            epoch_loss.total += loss.total;
        }
        epoch_loss.push /= batches_per_epoch;
        epoch_loss.pull /= batches_per_epoch;
        epoch_loss.facet /= batches_per_epoch;
        epoch_loss.total /= batches_per_epoch;

        if (epoch % cfg.eval_every != 0) continue;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = epoch_loss;
        if (have_dev) {
            const EvalReport dev =
                evaluate(result.params, split, dev_protocol, geom, EvalTarget::kDev);
            rec.dev_hr10 = dev.hr.at(10);
            rec.dev_ndcg10 = dev.ndcg.at(10);
            if (rec.dev_hr10 > best_hr) {
                best_hr = rec.dev_hr10;
                best = result.params;
                best_epoch = epoch;
                evals_since_best = 0;
            } else if (++evals_since_best >= cfg.patience) {
                stopped = true;
            }
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.records.push_back(rec);
        if (on_eval) on_eval(epoch, result.params, rec);
    }

    if (have_dev && best_epoch > 0) {
        result.params = std::move(best);
        result.best_dev_hr10 = best_hr;
        result.best_epoch = best_epoch;
    } else {
        result.best_epoch = result.log.records.empty() ? cfg.epochs : result.log.records.back().epoch;
    }
    result.early_stopped = stopped;
    return result;
}

// ---------------------------------------------------------------------------
// Flat `key = value` config files; CLI flags override file values.
// ---------------------------------------------------------------------------

inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&] { return static_cast<int32_t>(std::stol(value)); };
    auto as_real = [&] { return std::stod(value); };
    auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw std::invalid_argument("bad boolean for " + key + ": " + value);
    };
    if (key == "variant") cfg.variant = parse_variant(value);
    else if (key == "k") cfg.num_facets = as_int();
    else if (key == "dim") cfg.dim = as_int();
    else if (key == "epochs") cfg.epochs = as_int();
    else if (key == "batch_size") cfg.batch_size = as_int();
    else if (key == "n_neg") cfg.n_neg = as_int();
    else if (key == "learning_rate") cfg.learning_rate = as_real();
    else if (key == "lambda_pull") cfg.lambda_pull = as_real();
    else if (key == "lambda_facet") cfg.lambda_facet = as_real();
    else if (key == "alpha") cfg.alpha = as_real();
    else if (key == "beta") cfg.beta = as_real();
    else if (key == "fixed_margin") cfg.fixed_margin = as_real();
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "patience") cfg.patience = as_int();
    else if (key == "eval_every") cfg.eval_every = as_int();
    else if (key == "eval_negatives") cfg.eval_negatives = as_int();
    else if (key == "calibrate") cfg.calibrate = as_bool();
    else if (key == "facet_loss_items") cfg.facet_loss_items = as_bool();
    else if (key == "spherical_facet_separation") cfg.spherical_facet_separation = as_bool();
    else if (key == "workers") cfg.workers = as_int();
    else throw std::invalid_argument("unknown config key: " + key);
}

inline std::string format_train_config(const TrainConfig& cfg) {
    std::ostringstream out;
    char buf[64];
    auto real = [&](double x) {
        std::snprintf(buf, sizeof(buf), "%.17g", x);
        return std::string(buf);
    };
    out << "variant = " << to_string(cfg.variant) << '\n'
        << "k = " << cfg.num_facets << '\n'
        << "dim = " << cfg.dim << '\n'
        << "epochs = " << cfg.epochs << '\n'
        << "batch_size = " << cfg.batch_size << '\n'
        << "n_neg = " << cfg.n_neg << '\n'
        << "learning_rate = " << real(cfg.learning_rate) << '\n'
        << "lambda_pull = " << real(cfg.lambda_pull) << '\n'
        << "lambda_facet = " << real(cfg.lambda_facet) << '\n'
        << "alpha = " << real(cfg.alpha) << '\n'
        << "beta = " << real(cfg.beta) << '\n'
        << "fixed_margin = " << real(cfg.fixed_margin) << '\n'
        << "seed = " << cfg.seed << '\n'
        << "patience = " << cfg.patience << '\n'
        << "eval_every = " << cfg.eval_every << '\n'
        << "eval_negatives = " << cfg.eval_negatives << '\n'
        << "calibrate = " << (cfg.calibrate ? "true" : "false") << '\n'
        << "facet_loss_items = " << (cfg.facet_loss_items ? "true" : "false") << '\n'
        << "spherical_facet_separation = "
        << (cfg.spherical_facet_separation ? "true" : "false") << '\n'
        << "workers = " << cfg.workers << '\n';
    return out.str();
}

inline TrainConfig parse_train_config(std::istream& in, TrainConfig base = {}) {
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        apply_config_entry(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

inline TrainConfig parse_train_config_file(const std::string& path, TrainConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    return parse_train_config(in, base);
}

// ---------------------------------------------------------------------------
// Grid sweep
// ---------------------------------------------------------------------------

struct SweepCell {
    TrainConfig config;
    double dev_ndcg10 = std::numeric_limits<double>::quiet_NaN();
    std::string error;
};

// Trains the Cartesian product of the grid (every cell shares base.seed) and
// ranks cells by dev nDCG@10 of the best-dev checkpoint, best first. A failed
// cell records NaN and the sweep continues.
inline std::vector<SweepCell> sweep(
    const SplitDataset& split, const TrainConfig& base,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& grid) {
    if (grid.empty()) throw std::invalid_argument("empty sweep grid");
    for (const auto& [key, values] : grid)
        if (values.empty()) throw std::invalid_argument("empty value list for grid key " + key);

    std::vector<SweepCell> cells;
    std::vector<size_t> cursor(grid.size(), 0);
    while (true) {
        TrainConfig cfg = base;
        for (size_t i = 0; i < grid.size(); ++i)
            apply_config_entry(cfg, grid[i].first, grid[i].second[cursor[i]]);
        SweepCell cell;
        cell.config = cfg;
        try {
            const TrainResult r = train(split, cfg);
            // dev nDCG@10 of the returned (best-dev) checkpoint
            EvalProtocol protocol{cfg.eval_negatives, {10}, mix_seed(cfg.seed, "eval"), cfg.workers};
            cell.dev_ndcg10 =
                evaluate(r.params, split, protocol, cfg.geometry(), EvalTarget::kDev).ndcg.at(10);
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        cells.push_back(std::move(cell));

        size_t i = 0;
        for (; i < grid.size(); ++i) {
            if (++cursor[i] < grid[i].second.size()) break;
            cursor[i] = 0;
        }
        if (i == grid.size()) break;
    }
    std::stable_sort(cells.begin(), cells.end(), [](const SweepCell& a, const SweepCell& b) {
        const bool a_ok = !std::isnan(a.dev_ndcg10), b_ok = !std::isnan(b.dev_ndcg10);
        if (a_ok != b_ok) return a_ok;
        return a.dev_ndcg10 > b.dev_ndcg10;
    });
    return cells;
}

}  // namespace mars
