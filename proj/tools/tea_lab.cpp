// tea-lab: command-line front end for the target-embedding autoencoder
// laboratory. Subcommands: generate, train, sweep, stability, report.
// Exit codes: 0 success, 1 config error, 2 runtime/divergence error, 3 I/O.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tealab/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int jobs = -1;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config JSON")->required();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "override the config seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--jobs", args.jobs, "parallel jobs (default: processors)");
    cmd->add_flag("--force", args.force, "overwrite existing outputs");
}

tealab::ExperimentConfig load_config(const CommonArgs& args) {
    tealab::ExperimentConfig cfg = tealab::load_experiment_config(args.config_path);
    if (args.seed_set) cfg.seed = args.seed;
    if (args.jobs >= 0) cfg.jobs = args.jobs;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tea-lab: target-embedding autoencoder laboratory"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, sweep_args, stab_args, report_args;
    std::string sweep_axis;
    std::string report_results;

    CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset CSV + sidecar");
    add_common(gen, gen_args);

    CLI::App* train =
        app.add_subcommand("train", "train the configured variants across seeded runs");
    add_common(train, train_args);

    CLI::App* sweep = app.add_subcommand("sweep", "sweep nu, lambda, or training-set size");
    add_common(sweep, sweep_args);
    sweep->add_option("--axis", sweep_axis, "sweep axis: nu | lambda | n")->required();

    CLI::App* stability =
        app.add_subcommand("stability", "empirical uniform-stability study (linear case)");
    add_common(stability, stab_args);

    CLI::App* report = app.add_subcommand("report", "summary tables from a results CSV");
    add_common(report, report_args);
    report->add_option("--results", report_results,
                       "results CSV (default: <out>/results.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // help/version exit 0; bad usage is a config error
    }

    try {
        if (gen->parsed()) {
            tealab::cmd_generate(load_config(gen_args), gen_args.out_dir, gen_args.force);
        } else if (train->parsed()) {
            tealab::cmd_train(load_config(train_args), train_args.out_dir, train_args.force);
        } else if (sweep->parsed()) {
            tealab::cmd_sweep(load_config(sweep_args), sweep_axis, sweep_args.out_dir,
                              sweep_args.force);
        } else if (stability->parsed()) {
            tealab::cmd_stability(load_config(stab_args), stab_args.out_dir, stab_args.force);
        } else if (report->parsed()) {
            tealab::ExperimentConfig cfg = load_config(report_args);
            const std::filesystem::path results =
                report_results.empty()
                    ? std::filesystem::path(report_args.out_dir) / "results.csv"
                    : std::filesystem::path(report_results);
            tealab::cmd_report(results, cfg.reference(), std::cout,
                               std::filesystem::path(report_args.out_dir) / "report.csv",
                               cfg.runs);
        }
    } catch (const tealab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const tealab::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const tealab::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
