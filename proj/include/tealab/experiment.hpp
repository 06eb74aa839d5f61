#pragma once

#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tealab/datagen.hpp"
#include "tealab/stability.hpp"
#include "tealab/trainer.hpp"

namespace tealab {

enum class LogLevel : int { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("TEA_LAB_LOG");
        if (!env) return LogLevel::Info;
        const std::string s = env;
        if (s == "error") return LogLevel::Error;
        if (s == "info") return LogLevel::Info;
        if (s == "debug") return LogLevel::Debug;
        throw ConfigError("TEA_LAB_LOG must be one of error/info/debug, got '" + s + "'");
    }();
    return level;
}

inline void log_msg(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) <= static_cast<int>(log_level())) {
        std::cerr << "[tea-lab] " << msg << "\n";
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
    enum class Kind { LatentFactor, AdversarialBlocks, StaticMultilabel, File };
    Kind kind = Kind::LatentFactor;
    LatentFactorSpec latent;
    AdversarialBlocksSpec adversarial;
    StaticMultilabelSpec multilabel;
    std::filesystem::path csv_path;
    std::filesystem::path sidecar_path;
    bool seed_given = false;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::uint64_t seed = 0;
    int runs = 10;
    int jobs = 0; // 0: hardware concurrency
    DatasetSpec dataset;
    SplitFractions split{0.5, 0.0, 0.5};
    std::vector<std::string> variants{"Reg", "TEA"};
    std::string reference_variant; // empty: first variant
    TrainConfig train;
    bool tune = false;
    struct SweepGrids {
        std::vector<double> nu{0.0, 3e-5, 3e-4, 3e-3, 3e-2};
        std::vector<double> lambda{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
        std::vector<double> n{0.1, 0.2, 0.4, 0.7, 1.0}; // training-split fractions
    } sweep;
    StabilityConfig stability;

    int effective_jobs() const {
        if (jobs > 0) return jobs;
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }

    std::string reference() const {
        return reference_variant.empty() ? variants.at(0) : reference_variant;
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError(context + ": unknown key '" + key + "'");
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for '") + key + "'");
    }
}

inline SplitFractions parse_split(const nlohmann::json& j, const std::string& ctx) {
    check_keys(j, {"train", "validation", "test"}, ctx);
    SplitFractions f;
    f.train = get_or(j, "train", 0.5);
    f.validation = get_or(j, "validation", 0.0);
    f.test = get_or(j, "test", 0.5);
    try {
        f.validate();
    } catch (const ValueError& e) {
        throw ConfigError(ctx + ": " + e.what());
    }
    return f;
}

inline DatasetSpec parse_dataset(const nlohmann::json& j) {
    check_keys(j, {"generator", "params", "file"}, "dataset");
    DatasetSpec out;
    if (j.contains("file")) {
        if (j.contains("generator")) {
            throw ConfigError("dataset: 'generator' and 'file' are mutually exclusive");
        }
        check_keys(j.at("file"), {"csv", "sidecar"}, "dataset.file");
        out.kind = DatasetSpec::Kind::File;
        out.csv_path = j.at("file").at("csv").get<std::string>();
        out.sidecar_path = j.at("file").at("sidecar").get<std::string>();
        return out;
    }
    const std::string gen = j.at("generator").get<std::string>();
    const nlohmann::json params = j.value("params", nlohmann::json::object());
    out.seed_given = params.contains("seed");
    if (gen == "latent_factor") {
        check_keys(params,
                   {"entities", "timesteps", "latent_dim", "temporal_x", "temporal_y",
                    "static_dim", "w_x", "w_y", "noise", "feature_noise", "process_noise",
                    "spectral_radius", "binary_targets", "seed"},
                   "dataset.params");
        out.kind = DatasetSpec::Kind::LatentFactor;
        LatentFactorSpec& s = out.latent;
        s.entities = get_or<std::size_t>(params, "entities", s.entities);
        s.timesteps = get_or<std::size_t>(params, "timesteps", s.timesteps);
        s.latent_dim = get_or<std::size_t>(params, "latent_dim", s.latent_dim);
        s.temporal_x = get_or<std::size_t>(params, "temporal_x", s.temporal_x);
        s.temporal_y = get_or<std::size_t>(params, "temporal_y", s.temporal_y);
        s.static_dim = get_or<std::size_t>(params, "static_dim", s.static_dim);
        s.w_x = get_or<std::size_t>(params, "w_x", s.w_x);
        s.w_y = get_or<std::size_t>(params, "w_y", s.w_y);
        s.noise = get_or(params, "noise", s.noise);
        s.feature_noise = get_or(params, "feature_noise", s.feature_noise);
        s.process_noise = get_or(params, "process_noise", s.process_noise);
        s.spectral_radius = get_or(params, "spectral_radius", s.spectral_radius);
        s.binary_targets = get_or(params, "binary_targets", s.binary_targets);
        s.seed = get_or<std::uint64_t>(params, "seed", 0);
    } else if (gen == "adversarial_blocks") {
        check_keys(params,
                   {"instances", "latent_dim", "feature_dim", "predictable_dim",
                    "unpredictable_dim", "seed"},
                   "dataset.params");
        out.kind = DatasetSpec::Kind::AdversarialBlocks;
        AdversarialBlocksSpec& s = out.adversarial;
        s.instances = get_or<std::size_t>(params, "instances", s.instances);
        s.latent_dim = get_or<std::size_t>(params, "latent_dim", s.latent_dim);
        s.feature_dim = get_or<std::size_t>(params, "feature_dim", s.feature_dim);
        s.predictable_dim = get_or<std::size_t>(params, "predictable_dim", s.predictable_dim);
        s.unpredictable_dim =
            get_or<std::size_t>(params, "unpredictable_dim", s.unpredictable_dim);
        s.seed = get_or<std::uint64_t>(params, "seed", 0);
    } else if (gen == "static_multilabel") {
        check_keys(params,
                   {"instances", "latent_dim", "feature_dim", "label_dim", "feature_noise",
                    "logit_scale", "seed"},
                   "dataset.params");
        out.kind = DatasetSpec::Kind::StaticMultilabel;
        StaticMultilabelSpec& s = out.multilabel;
        s.instances = get_or<std::size_t>(params, "instances", s.instances);
        s.latent_dim = get_or<std::size_t>(params, "latent_dim", s.latent_dim);
        s.feature_dim = get_or<std::size_t>(params, "feature_dim", s.feature_dim);
        s.label_dim = get_or<std::size_t>(params, "label_dim", s.label_dim);
        s.feature_noise = get_or(params, "feature_noise", s.feature_noise);
        s.logit_scale = get_or(params, "logit_scale", s.logit_scale);
        s.seed = get_or<std::uint64_t>(params, "seed", 0);
    } else {
        throw ConfigError("dataset: unknown generator '" + gen + "'");
    }
    return out;
}

inline TrainConfig parse_train(const nlohmann::json& j) {
    check_keys(j,
               {"model", "latent_dim", "gru_layers", "learning_rate", "minibatch",
                "max_iterations", "validation_period", "patience_checks", "lambda", "nu",
                "validation_fraction", "cv_folds", "search_iterations", "grids"},
               "train");
    TrainConfig cfg;
    const std::string model = get_or<std::string>(j, "model", "linear");
    if (model == "linear") {
        cfg.model = ModelType::Linear;
    } else if (model == "gru") {
        cfg.model = ModelType::Gru;
    } else {
        throw ConfigError("train.model must be 'linear' or 'gru'");
    }
    cfg.latent_dim = get_or<std::size_t>(j, "latent_dim", cfg.latent_dim);
    cfg.gru_layers = get_or(j, "gru_layers", cfg.gru_layers);
    cfg.learning_rate = get_or(j, "learning_rate", cfg.learning_rate);
    cfg.minibatch = get_or(j, "minibatch", cfg.minibatch);
    cfg.max_iterations = get_or(j, "max_iterations", cfg.max_iterations);
    cfg.validation_period = get_or(j, "validation_period", cfg.validation_period);
    cfg.patience_checks = get_or(j, "patience_checks", cfg.patience_checks);
    cfg.lambda = get_or(j, "lambda", cfg.lambda);
    cfg.nu = get_or(j, "nu", cfg.nu);
    cfg.validation_fraction = get_or(j, "validation_fraction", cfg.validation_fraction);
    cfg.cv_folds = get_or(j, "cv_folds", cfg.cv_folds);
    cfg.search_iterations = get_or(j, "search_iterations", cfg.search_iterations);
    if (j.contains("grids")) {
        const auto& g = j.at("grids");
        check_keys(g, {"learning_rate", "nu", "minibatch", "gru_layers"}, "train.grids");
        cfg.grids.learning_rate =
            get_or(g, "learning_rate", cfg.grids.learning_rate);
        cfg.grids.nu = get_or(g, "nu", cfg.grids.nu);
        cfg.grids.minibatch = get_or(g, "minibatch", cfg.grids.minibatch);
        cfg.grids.gru_layers = get_or(g, "gru_layers", cfg.grids.gru_layers);
    }
    cfg.validate();
    return cfg;
}

inline std::string sanitize_name(const std::string& s) {
    std::string out;
    for (char c : s) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    }
    return out;
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"schema_version", "seed", "runs", "jobs", "dataset", "split", "variants",
                        "reference_variant", "train", "tune", "sweep", "stability"},
                       "config");
    ExperimentConfig cfg;
    cfg.schema_version = detail::get_or(j, "schema_version", 1);
    if (cfg.schema_version != 1) {
        throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version));
    }
    cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
    cfg.runs = detail::get_or(j, "runs", 10);
    cfg.jobs = detail::get_or(j, "jobs", 0);
    if (cfg.runs < 1) throw ConfigError("runs must be >= 1");
    if (cfg.jobs < 0) throw ConfigError("jobs must be >= 0");
    if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
    cfg.dataset = detail::parse_dataset(j.at("dataset"));
    if (j.contains("split")) cfg.split = detail::parse_split(j.at("split"), "split");
    if (j.contains("variants")) {
        cfg.variants = j.at("variants").get<std::vector<std::string>>();
        if (cfg.variants.empty()) throw ConfigError("variants must be nonempty");
    }
    for (const std::string& v : cfg.variants) parse_variant(v); // validate early
    cfg.reference_variant = detail::get_or<std::string>(j, "reference_variant", "");
    if (!cfg.reference_variant.empty()) parse_variant(cfg.reference_variant);
    if (j.contains("train")) cfg.train = detail::parse_train(j.at("train"));
    cfg.tune = detail::get_or(j, "tune", false);
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        detail::check_keys(s, {"nu_grid", "lambda_grid", "n_grid"}, "sweep");
        cfg.sweep.nu = detail::get_or(s, "nu_grid", cfg.sweep.nu);
        cfg.sweep.lambda = detail::get_or(s, "lambda_grid", cfg.sweep.lambda);
        cfg.sweep.n = detail::get_or(s, "n_grid", cfg.sweep.n);
    }
    if (j.contains("stability")) {
        const auto& s = j.at("stability");
        detail::check_keys(s,
                           {"n_grid", "replacements", "trials_per_n", "probe_size", "a",
                            "representative_m", "c"},
                           "stability");
        cfg.stability.n_grid = detail::get_or(s, "n_grid", cfg.stability.n_grid);
        cfg.stability.replacements_per_batch =
            detail::get_or(s, "replacements", cfg.stability.replacements_per_batch);
        cfg.stability.trials_per_n = detail::get_or(s, "trials_per_n", cfg.stability.trials_per_n);
        cfg.stability.probe_size =
            detail::get_or<std::size_t>(s, "probe_size", cfg.stability.probe_size);
        cfg.stability.a_assumption2 = detail::get_or(s, "a", cfg.stability.a_assumption2);
        cfg.stability.representative_m =
            detail::get_or<std::size_t>(s, "representative_m", cfg.stability.representative_m);
        cfg.stability.c_strong_convexity =
            detail::get_or(s, "c", cfg.stability.c_strong_convexity);
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config JSON: " + std::string(e.what()));
    }
    return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------
// Dataset materialization
// ---------------------------------------------------------------------------

/// Build the dataset named by the config. Generator seeds default to a
/// child of the experiment seed so one global seed pins everything.
inline WindowedDataset materialize_dataset(const ExperimentConfig& cfg) {
    DatasetSpec ds = cfg.dataset;
    const std::uint64_t default_seed = child_seed(cfg.seed, "dataset");
    switch (ds.kind) {
        case DatasetSpec::Kind::LatentFactor: {
            if (!ds.seed_given) ds.latent.seed = default_seed;
            ds.latent.split = cfg.split;
            return gen_latent_factor_sequences(ds.latent);
        }
        case DatasetSpec::Kind::AdversarialBlocks: {
            if (!ds.seed_given) ds.adversarial.seed = default_seed;
            ds.adversarial.split = cfg.split;
            return gen_adversarial_blocks(ds.adversarial);
        }
        case DatasetSpec::Kind::StaticMultilabel: {
            if (!ds.seed_given) ds.multilabel.seed = default_seed;
            ds.multilabel.split = cfg.split;
            return gen_static_multilabel(ds.multilabel);
        }
        case DatasetSpec::Kind::File: {
            LoadedDataset loaded = load_dataset(ds.csv_path, ds.sidecar_path);
            loaded.fractions = cfg.split;
            return window_loaded(loaded, child_seed(cfg.seed, "split", 0));
        }
    }
    throw ConfigError("unreachable dataset kind");
}

// ---------------------------------------------------------------------------
// Training runs and results
// ---------------------------------------------------------------------------

namespace detail {

inline void require_fresh_path(const std::filesystem::path& p, bool force) {
    if (!force && std::filesystem::exists(p)) {
        throw IoError("output " + p.string() + " exists (pass --force to overwrite)");
    }
}

/// Run one (variant, run) cell: re-split at the entity level by the run's
/// split seed, subsample the training split if requested, then train.
inline TrainOutcome run_cell(const ExperimentConfig& cfg, const WindowedDataset& base,
                             const Variant& variant, int run, const TrainConfig& train_cfg,
                             double train_fraction = 1.0) {
    WindowedDataset ds = base;
    assign_splits(ds, cfg.split, child_seed(cfg.seed, "split", static_cast<std::uint64_t>(run)));
    if (train_fraction < 1.0) {
        // Randomly restrict the training entities to the given proportion.
        std::vector<std::uint32_t> train_entities;
        for (std::size_t i = 0; i < ds.instances.size(); ++i) {
            if (ds.split[i] != SplitLabel::Train) continue;
            const std::uint32_t e = ds.instances[i].entity;
            if (std::find(train_entities.begin(), train_entities.end(), e) ==
                train_entities.end()) {
                train_entities.push_back(e);
            }
        }
        Rng rng(child_seed(cfg.seed, "subsample", static_cast<std::uint64_t>(run)));
        rng.shuffle(train_entities);
        const std::size_t keep = std::max<std::size_t>(
            2, static_cast<std::size_t>(train_fraction *
                                        static_cast<double>(train_entities.size()) + 0.5));
        std::vector<bool> kept(1 + *std::max_element(train_entities.begin(),
                                                     train_entities.end()),
                               false);
        for (std::size_t i = 0; i < std::min(keep, train_entities.size()); ++i) {
            kept[train_entities[i]] = true;
        }
        for (std::size_t i = 0; i < ds.instances.size(); ++i) {
            if (ds.split[i] == SplitLabel::Train && !kept[ds.instances[i].entity]) {
                ds.split[i] = SplitLabel::Excluded;
            }
        }
    }
    TrainConfig run_cfg = train_cfg;
    run_cfg.seed = child_seed(cfg.seed, "run", static_cast<std::uint64_t>(run));
    TrainOutcome out = train_variant(variant, ds, run_cfg);
    out.result.run_index = run;
    return out;
}

/// Execute a list of jobs on a small thread pool; results land in slots so
/// the output order never depends on scheduling.
template <typename Job>
void run_jobs(int jobs, std::size_t count, Job&& job) {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

inline void write_results_csv(const std::filesystem::path& path,
                              const std::vector<RunResult>& results) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "variant,run,metric,value\n";
    for (const RunResult& r : results) {
        for (const auto& [metric, value] : r.metrics) {
            f << r.variant << "," << r.run_index << "," << metric << ","
              << detail::format_double(value) << "\n";
        }
    }
    if (!f) throw IoError("short write to " + path.string());
}

inline void write_stage_logs(const std::filesystem::path& path,
                             const std::vector<StageLogEntry>& logs) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const StageLogEntry& e : logs) {
        nlohmann::json j{{"stage", e.stage},
                         {"iteration", e.iteration},
                         {"train_loss", e.train_loss},
                         {"val_loss", e.val_loss}};
        f << j.dump() << "\n";
    }
}

} // namespace detail

/// Generate the configured dataset and write the CSV plus JSON sidecar.
inline void cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                         bool force) {
    std::filesystem::create_directories(out_dir);
    const auto csv = out_dir / "dataset.csv";
    const auto sidecar = out_dir / "dataset.json";
    detail::require_fresh_path(csv, force);

    DatasetSpec ds = cfg.dataset;
    const std::uint64_t default_seed = child_seed(cfg.seed, "dataset");
    RawDataset raw;
    std::size_t w_x = 1, w_y = 1, offset = 0;
    switch (ds.kind) {
        case DatasetSpec::Kind::LatentFactor:
            if (!ds.seed_given) ds.latent.seed = default_seed;
            raw = gen_latent_factor_raw(ds.latent);
            w_x = ds.latent.w_x;
            w_y = ds.latent.w_y;
            offset = ds.latent.w_x;
            break;
        case DatasetSpec::Kind::AdversarialBlocks:
            if (!ds.seed_given) ds.adversarial.seed = default_seed;
            raw = gen_adversarial_blocks_raw(ds.adversarial);
            break;
        case DatasetSpec::Kind::StaticMultilabel:
            if (!ds.seed_given) ds.multilabel.seed = default_seed;
            raw = gen_static_multilabel_raw(ds.multilabel);
            break;
        case DatasetSpec::Kind::File:
            throw ConfigError("generate: dataset is already a file");
    }
    save_raw_csv(raw, csv);
    save_sidecar(raw, cfg.split, w_x, w_y, offset, sidecar);
    log_msg(LogLevel::Info, "wrote " + csv.string() + " (" +
                                std::to_string(raw.entities.size()) + " entities x " +
                                std::to_string(raw.timesteps) + " steps)");
}

struct TrainArtifacts {
    std::vector<RunResult> results; // ordered by (variant, run)
    std::filesystem::path results_csv;
};

/// Train every configured variant for the configured number of runs,
/// writing checkpoints, stage logs, and the per-run results CSV.
inline TrainArtifacts cmd_train(const ExperimentConfig& cfg,
                                const std::filesystem::path& out_dir, bool force) {
    std::filesystem::create_directories(out_dir);
    const auto results_path = out_dir / "results.csv";
    detail::require_fresh_path(results_path, force);

    const WindowedDataset base = materialize_dataset(cfg);
    log_msg(LogLevel::Info, "dataset ready: " + std::to_string(base.instances.size()) +
                                " instances, |X|=" + std::to_string(base.dims.flat_x()) +
                                ", |Y|=" + std::to_string(base.dims.flat_y()));

    TrainConfig train_cfg = cfg.train;
    if (cfg.tune) {
        // Tune on the first run's split with the Reg baseline; the chosen
        // setting is reused for every comparator.
        WindowedDataset tune_ds = base;
        assign_splits(tune_ds, cfg.split, child_seed(cfg.seed, "split", 0));
        TrainConfig seed_cfg = train_cfg;
        seed_cfg.seed = child_seed(cfg.seed, "tune");
        train_cfg = tune_hyperparameters(parse_variant("Reg"), tune_ds, seed_cfg);
        log_msg(LogLevel::Info,
                "tuned: psi=" + std::to_string(train_cfg.learning_rate) +
                    " nu=" + std::to_string(train_cfg.nu) +
                    " minibatch=" + std::to_string(train_cfg.minibatch));
    }

    const std::size_t n_cells = cfg.variants.size() * static_cast<std::size_t>(cfg.runs);
    std::vector<RunResult> results(n_cells);
    std::vector<std::vector<StageLogEntry>> logs(n_cells);
    std::vector<std::unique_ptr<ComponentSet>> trained(n_cells);
    std::vector<std::string> stage_reached(n_cells);

    detail::run_jobs(cfg.effective_jobs(), n_cells, [&](std::size_t cell) {
        const std::size_t vi = cell / static_cast<std::size_t>(cfg.runs);
        const int run = static_cast<int>(cell % static_cast<std::size_t>(cfg.runs));
        const Variant variant = parse_variant(cfg.variants[vi]);
        TrainOutcome o = detail::run_cell(cfg, base, variant, run, train_cfg);
        results[cell] = o.result;
        logs[cell] = std::move(o.logs);
        stage_reached[cell] = o.stage_reached;
        trained[cell] = std::make_unique<ComponentSet>(std::move(o.components));
        log_msg(LogLevel::Debug, "finished " + results[cell].variant + " run " +
                                     std::to_string(run));
    });

    // Single-writer output phase, ordered by (variant, run).
    for (std::size_t cell = 0; cell < n_cells; ++cell) {
        const std::size_t vi = cell / static_cast<std::size_t>(cfg.runs);
        const int run = static_cast<int>(cell % static_cast<std::size_t>(cfg.runs));
        const std::string vname = detail::sanitize_name(cfg.variants[vi]);
        const auto ckpt_dir =
            out_dir / "checkpoints" / vname / ("run_" + std::to_string(run));
        save_checkpoint(*trained[cell], ckpt_dir,
                        {results[cell].seed, stage_reached[cell]});
        std::filesystem::create_directories(out_dir / "logs");
        detail::write_stage_logs(
            out_dir / "logs" / (vname + "_run" + std::to_string(run) + ".jsonl"), logs[cell]);
    }
    detail::write_results_csv(results_path, results);
    log_msg(LogLevel::Info, "wrote " + results_path.string());
    return {std::move(results), results_path};
}

// ---------------------------------------------------------------------------
// Aggregation and reporting
// ---------------------------------------------------------------------------

struct VariantMetricSummary {
    std::string variant;
    std::string metric;
    std::vector<double> values; // per run, ordered by run index
    double mean = 0.0;
    double se = 0.0;
    double p_vs_reference = 1.0;
    bool significant = false;
    bool best = false;
};

inline bool metric_higher_is_better(const std::string& metric) {
    return metric == "roc_auc" || metric == "pr_auc";
}

/// Aggregate per-run rows into per-(variant, metric) means, standard
/// errors, significance vs. the reference variant, and best markers.
inline std::vector<VariantMetricSummary> summarize_results(
    const std::vector<RunResult>& results, const std::string& reference) {
    std::vector<std::string> variant_order;
    std::vector<std::string> metric_order;
    std::map<std::pair<std::string, std::string>, std::map<int, double>> cells;
    for (const RunResult& r : results) {
        if (std::find(variant_order.begin(), variant_order.end(), r.variant) ==
            variant_order.end()) {
            variant_order.push_back(r.variant);
        }
        for (const auto& [metric, value] : r.metrics) {
            if (std::find(metric_order.begin(), metric_order.end(), metric) ==
                metric_order.end()) {
                metric_order.push_back(metric);
            }
            cells[{r.variant, metric}][r.run_index] = value;
        }
    }
    std::sort(metric_order.begin(), metric_order.end());

    std::vector<VariantMetricSummary> out;
    for (const std::string& metric : metric_order) {
        std::size_t best_idx = out.size();
        double best_val = 0.0;
        bool have_best = false;
        const std::size_t first_row = out.size();
        for (const std::string& variant : variant_order) {
            auto it = cells.find({variant, metric});
            if (it == cells.end()) continue;
            VariantMetricSummary s;
            s.variant = variant;
            s.metric = metric;
            for (const auto& [run, v] : it->second) s.values.push_back(v);
            s.mean = sample_mean(s.values);
            s.se = standard_error(s.values);
            out.push_back(std::move(s));
            const double v = out.back().mean;
            const bool better = !have_best || (metric_higher_is_better(metric)
                                                   ? v > best_val
                                                   : v < best_val);
            if (better) {
                best_val = v;
                best_idx = out.size() - 1;
                have_best = true;
            }
        }
        if (have_best) out[best_idx].best = true;
        // Significance against the reference variant (when present).
        const VariantMetricSummary* ref = nullptr;
        for (std::size_t i = first_row; i < out.size(); ++i) {
            if (out[i].variant == reference) ref = &out[i];
        }
        if (ref) {
            for (std::size_t i = first_row; i < out.size(); ++i) {
                if (out[i].variant == reference || out[i].values.size() < 2 ||
                    ref->values.size() < 2) {
                    continue;
                }
                const TTestResult t = two_sample_ttest(out[i].values, ref->values);
                out[i].p_vs_reference = t.p_value;
                out[i].significant = t.significant();
            }
        }
    }
    return out;
}

inline std::vector<RunResult> load_results_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != "variant,run,metric,value") {
        throw IoError("unexpected results header in " + path.string());
    }
    std::map<std::pair<std::string, int>, RunResult> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string variant, run_s, metric, value_s;
        if (!std::getline(ss, variant, ',') || !std::getline(ss, run_s, ',') ||
            !std::getline(ss, metric, ',') || !std::getline(ss, value_s)) {
            throw IoError("malformed results row: " + line);
        }
        const int run = std::stoi(run_s);
        RunResult& r = rows[{variant, run}];
        r.variant = variant;
        r.run_index = run;
        r.metrics[metric] = std::strtod(value_s.c_str(), nullptr);
    }
    std::vector<RunResult> out;
    out.reserve(rows.size());
    for (auto& [_, r] : rows) out.push_back(std::move(r));
    return out;
}

/// Render the per-metric summary tables (aligned text plus CSV).
inline void cmd_report(const std::filesystem::path& results_csv, const std::string& reference,
                       std::ostream& text_out, const std::filesystem::path& csv_out,
                       int expected_runs = 0) {
    const std::vector<RunResult> results = load_results_csv(results_csv);
    if (results.empty()) throw IoError("no rows in " + results_csv.string());
    const auto summaries = summarize_results(results, reference);

    if (expected_runs > 0) {
        for (const auto& s : summaries) {
            if (static_cast<int>(s.values.size()) < expected_runs) {
                log_msg(LogLevel::Error, "warning: " + s.variant + "/" + s.metric + " has " +
                                             std::to_string(s.values.size()) + " of " +
                                             std::to_string(expected_runs) + " runs");
            }
        }
    }

    std::string current_metric;
    char buf[160];
    for (const auto& s : summaries) {
        if (s.metric != current_metric) {
            current_metric = s.metric;
            text_out << "\nmetric: " << s.metric << " ("
                     << (metric_higher_is_better(s.metric) ? "higher" : "lower")
                     << " is better; reference: " << reference << ")\n";
            std::snprintf(buf, sizeof(buf), "  %-22s %12s %12s %10s %4s\n", "variant", "mean",
                          "se", "p_value", "");
            text_out << buf;
        }
        char pbuf[24];
        if (s.variant == reference) {
            std::snprintf(pbuf, sizeof(pbuf), "%10s", "-");
        } else {
            std::snprintf(pbuf, sizeof(pbuf), "%10.4g", s.p_vs_reference);
        }
        std::snprintf(buf, sizeof(buf), "  %-22s %12.6g %12.4g %s %s%s\n", s.variant.c_str(),
                      s.mean, s.se, pbuf, s.significant ? "*" : "", s.best ? " <- best" : "");
        text_out << buf;
    }

    if (!csv_out.empty()) {
        std::ofstream f(csv_out);
        if (!f) throw IoError("cannot write " + csv_out.string());
        f << "metric,variant,runs,mean,se,p_vs_reference,significant,best\n";
        for (const auto& s : summaries) {
            f << s.metric << "," << s.variant << "," << s.values.size() << ","
              << detail::format_double(s.mean) << "," << detail::format_double(s.se) << ","
              << (s.variant == reference ? "" : detail::format_double(s.p_vs_reference)) << ","
              << (s.significant ? 1 : 0) << "," << (s.best ? 1 : 0) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
    double axis_value = 0.0;
    RunResult result;
};

struct SweepArtifacts {
    std::vector<SweepRow> rows;
    std::filesystem::path csv;
};

/// Sweep one axis. nu: every configured variant at each l2 coefficient.
/// lambda: joint-training-only TEA across the grid (isolating the joint
/// reconstruction task) with a Reg baseline. n: every configured variant
/// with the training split randomly restricted to each proportion.
inline SweepArtifacts cmd_sweep(const ExperimentConfig& cfg, const std::string& axis,
                                const std::filesystem::path& out_dir, bool force) {
    std::filesystem::create_directories(out_dir);
    const auto csv_path = out_dir / ("sweep_" + axis + ".csv");
    detail::require_fresh_path(csv_path, force);

    const WindowedDataset base = materialize_dataset(cfg);
    std::vector<double> grid;
    std::vector<std::string> variants;
    if (axis == "nu") {
        grid = cfg.sweep.nu;
        variants = cfg.variants;
    } else if (axis == "lambda") {
        grid = cfg.sweep.lambda;
        variants = {"TEA:nostaged", "Reg"};
    } else if (axis == "n") {
        grid = cfg.sweep.n;
        variants = cfg.variants;
        for (double f : grid) {
            if (!(f > 0.0 && f <= 1.0)) {
                throw ConfigError("n grid entries must be proportions in (0, 1]");
            }
        }
    } else {
        throw ConfigError("unknown sweep axis '" + axis + "' (nu, lambda, n)");
    }
    if (grid.empty()) throw ConfigError("sweep grid for '" + axis + "' is empty");

    struct Cell {
        std::size_t point;
        std::size_t variant;
        int run;
    };
    std::vector<Cell> cells;
    // A lambda sweep trains the baseline once per run, not once per point.
    const bool reg_once = axis == "lambda";
    for (std::size_t p = 0; p < grid.size(); ++p) {
        for (std::size_t v = 0; v < variants.size(); ++v) {
            if (reg_once && variants[v] == "Reg" && p > 0) continue;
            for (int run = 0; run < cfg.runs; ++run) {
                cells.push_back({p, v, run});
            }
        }
    }

    std::vector<RunResult> cell_results(cells.size());
    detail::run_jobs(cfg.effective_jobs(), cells.size(), [&](std::size_t i) {
        const Cell& c = cells[i];
        TrainConfig tc = cfg.train;
        double fraction = 1.0;
        if (axis == "nu") {
            tc.nu = grid[c.point];
        } else if (axis == "lambda") {
            tc.lambda = grid[c.point];
        } else {
            fraction = grid[c.point];
        }
        const Variant variant = parse_variant(variants[c.variant]);
        TrainOutcome o = detail::run_cell(cfg, base, variant, c.run, tc, fraction);
        cell_results[i] = o.result;
    });

    SweepArtifacts out;
    out.csv = csv_path;
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot write " + csv_path.string());
    f << "axis,value,variant,run,metric,metric_value\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        const auto emit = [&](double axis_value) {
            for (const auto& [metric, value] : cell_results[i].metrics) {
                f << axis << "," << detail::format_double(axis_value) << ","
                  << cell_results[i].variant << "," << c.run << "," << metric << ","
                  << detail::format_double(value) << "\n";
            }
            out.rows.push_back({axis_value, cell_results[i]});
        };
        if (reg_once && variants[c.variant] == "Reg") {
            // The baseline is lambda-independent: repeat its rows per point.
            for (double g : grid) emit(g);
        } else {
            emit(grid[c.point]);
        }
    }
    log_msg(LogLevel::Info, "wrote " + csv_path.string());
    return out;
}

// ---------------------------------------------------------------------------
// Stability pipeline
// ---------------------------------------------------------------------------

struct StabilityArtifacts {
    StabilityReport report;
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
};

/// End-to-end stability study: generate a flattened linear pool, pretrain
/// the predictor/encoder (stages 1-2), freeze them, then measure the
/// replacement instability of the closed-form Theta solve across the N grid.
inline StabilityArtifacts cmd_stability(const ExperimentConfig& cfg,
                                        const std::filesystem::path& out_dir, bool force) {
    if (cfg.train.model != ModelType::Linear) {
        throw ConfigError("stability requires the linear architecture with quadratic losses");
    }
    std::filesystem::create_directories(out_dir);
    const auto json_path = out_dir / "stability.json";
    const auto csv_path = out_dir / "stability.csv";
    detail::require_fresh_path(json_path, force);

    WindowedDataset ds = materialize_dataset(cfg);
    for (VarKind k : ds.target_kinds_flat) {
        if (k == VarKind::Binary) {
            throw ConfigError("stability requires continuous targets (quadratic losses)");
        }
    }

    // Pretrain W_u, W_e with the staged plan (no joint stage needed: the
    // harness re-solves Theta itself).
    TrainConfig tc = cfg.train;
    tc.seed = child_seed(cfg.seed, "stability-pretrain");
    TrainOutcome pre = train_variant(parse_variant("TEA:nojoint"), ds, tc);
    const Tensor w_u = pre.components.param("u.W")->value;
    const Tensor w_e = pre.components.param("e.W")->value;

    // Pool and probe set from the flattened instances.
    const std::size_t n_total = ds.instances.size();
    const std::size_t probe_n = std::min(cfg.stability.probe_size, n_total / 4);
    if (probe_n < 8) throw ConfigError("stability: dataset too small for a probe set");
    std::vector<std::size_t> order(n_total);
    for (std::size_t i = 0; i < n_total; ++i) order[i] = i;
    Rng rng(child_seed(cfg.seed, "stability-probe"));
    rng.shuffle(order);
    const std::size_t xd = ds.dims.flat_x(), yd = ds.dims.flat_y();
    const std::size_t pool_n = n_total - probe_n;
    SamplePool pool;
    pool.x = Tensor({xd, pool_n});
    pool.y = Tensor({yd, pool_n});
    Tensor probe_x({xd, probe_n}), probe_y({yd, probe_n});
    for (std::size_t j = 0; j < n_total; ++j) {
        const Instance& in = ds.instances[order[j]];
        const bool probe = j < probe_n;
        const std::size_t col = probe ? j : j - probe_n;
        const std::size_t width = probe ? probe_n : pool_n;
        double* xs = (probe ? probe_x : pool.x).data();
        double* ys = (probe ? probe_y : pool.y).data();
        for (std::size_t i = 0; i < ds.dims.static_dim; ++i) {
            xs[i * width + col] = in.statics[i];
        }
        for (std::size_t i = 0; i < in.x.size(); ++i) {
            xs[(ds.dims.static_dim + i) * width + col] = in.x[i];
        }
        for (std::size_t i = 0; i < yd; ++i) ys[i * width + col] = in.y[i];
    }
    for (std::size_t n : cfg.stability.n_grid) {
        if (n + 1 > pool_n) {
            throw ConfigError("stability: N grid point " + std::to_string(n) +
                              " exceeds the pool size " + std::to_string(pool_n));
        }
    }

    StabilityArtifacts out;
    out.report = run_stability_study(pool, probe_x, probe_y, w_u, w_e, cfg.stability,
                                     child_seed(cfg.seed, "stability"));
    out.json_path = json_path;
    out.csv_path = csv_path;

    nlohmann::json j;
    j["n_grid"] = out.report.n_grid;
    j["gamma_samples"] = out.report.gamma_samples;
    j["gamma_median"] = out.report.gamma_median;
    j["gamma_max"] = out.report.gamma_max;
    j["bound"] = out.report.bound;
    j["slope"] = out.report.slope;
    j["slope_stderr"] = out.report.slope_stderr;
    j["any_degenerate"] = out.report.any_degenerate;
    j["assumption_report"] = {{"epsilon_max", out.report.epsilon_max},
                              {"r_alpha_max", out.report.r_alpha_max},
                              {"r_beta_max", out.report.r_beta_max},
                              {"sigma_p_max", out.report.sigma_p_max},
                              {"sigma_r_max", out.report.sigma_r_max}};
    j["constants"] = {{"c", cfg.stability.c_strong_convexity},
                      {"a", cfg.stability.a_assumption2},
                      {"representative_m",
                       cfg.stability.representative_m == 0
                           ? w_u.rows()
                           : cfg.stability.representative_m},
                      {"replacements", cfg.stability.replacements_per_batch},
                      {"trials_per_n", cfg.stability.trials_per_n},
                      {"probe_size", probe_n}};
    {
        std::ofstream f(json_path);
        if (!f) throw IoError("cannot write " + json_path.string());
        f << j.dump(2) << "\n";
    }
    {
        std::ofstream f(csv_path);
        if (!f) throw IoError("cannot write " + csv_path.string());
        f << "n,trial,gamma,bound\n";
        for (std::size_t gi = 0; gi < out.report.n_grid.size(); ++gi) {
            for (std::size_t t = 0; t < out.report.gamma_samples[gi].size(); ++t) {
                f << out.report.n_grid[gi] << "," << t << ","
                  << detail::format_double(out.report.gamma_samples[gi][t]) << ","
                  << detail::format_double(out.report.bound[gi]) << "\n";
            }
        }
    }
    log_msg(LogLevel::Info,
            "stability slope " + std::to_string(out.report.slope) + " +/- " +
                std::to_string(out.report.slope_stderr));
    return out;
}

} // namespace tealab
