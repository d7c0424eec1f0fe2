// Experiment runner for data-free class-incremental learning: trains a
// method over a task sequence with synthetic replay, compares runs, and
// regenerates drift diagnostics from checkpoints.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dfcil/config.hpp"
#include "dfcil/report.hpp"
#include "dfcil/serialize.hpp"

namespace fs = std::filesystem;
using namespace dfcil;

namespace {

struct RunFlags {
    std::string config_path;
    std::string out_override;
    uint64_t seed = 0;
    int trials = 0;
    bool checkpoint_every_task = false;
    bool dump_synth_grid = false;
    bool verbose = false;
};

config::ExperimentConfig load_config(const RunFlags& flags) {
    auto kv = config::KeyValues::parse_file(flags.config_path);
    auto cfg = config::ExperimentConfig::from_kv(kv);
    if (!flags.out_override.empty()) cfg.out_dir = flags.out_override;
    if (flags.seed != 0 && flags.trials > 0) {
        cfg.seeds.clear();
        for (int i = 0; i < flags.trials; ++i) cfg.seeds.push_back(flags.seed + i);
    } else if (flags.seed != 0) {
        cfg.seeds = {flags.seed};
    } else if (flags.trials > 0) {
        cfg.seeds.clear();
        for (int i = 0; i < flags.trials; ++i) cfg.seeds.push_back(static_cast<uint64_t>(i + 1));
    }
    return cfg;
}

int cmd_run(const RunFlags& flags) {
    auto cfg = load_config(flags);
    auto in = config::load_inputs(cfg);
    fs::create_directories(cfg.out_dir);

    trainer::RunOptions opts;
    opts.quiet = !flags.verbose;
    opts.log_interval = cfg.log_interval;
    opts.drift_sample = cfg.drift_sample;
    std::map<uint64_t, std::vector<double>> offline;
    if (cfg.omega_mode == "inline") {
        opts.inline_upper_bound = true;
    } else if (cfg.omega_mode == "none") {
        opts.inline_upper_bound = false;
    } else {
        std::string path = cfg.omega_mode;
        if (fs::is_directory(path)) path += "/offline_table.tsv";
        offline = report::read_offline_table(path);
        for (uint64_t s : cfg.seeds) {
            if (!offline.count(s)) {
                throw data::ConfigError("offline table has no entry for trial seed " +
                                        std::to_string(s));
            }
        }
        opts.offline_tables = &offline;
        opts.inline_upper_bound = false;
    }
    if (flags.checkpoint_every_task) {
        opts.checkpoint_hook = [&](uint64_t seed, int task_idx, trainer::TrainerState& state) {
            const std::string base = cfg.out_dir + "/ckpt_seed" + std::to_string(seed) + "_task" +
                                     std::to_string(task_idx + 1);
            serialize::save_model(state.model, task_idx + 1, base + ".bin");
            if (trainer::method_uses_coreset(cfg.method.method) && state.coreset.size() > 0) {
                data::save_coreset(state.coreset, base + ".coreset.arr",
                                   base + ".coreset.labels.tsv");
            }
        };
    }
    if (flags.dump_synth_grid) {
        opts.synth_dump_hook = [&](uint64_t seed, int task_idx, const Tensor& images) {
            report::write_image_grid_ppm(images, cfg.out_dir + "/synth_seed" +
                                                     std::to_string(seed) + "_task" +
                                                     std::to_string(task_idx + 1) + ".ppm");
        };
    }

    std::vector<metrics::RunRecord> records;
    try {
        for (uint64_t seed : cfg.seeds) {
            auto record = trainer::run_single_trial(in, cfg.method, cfg.optim, seed, opts);
            record.config_digest = cfg.digest();
            records.push_back(std::move(record));
            std::cout << "trial seed " << seed
                      << ": A_N = " << records.back().final_accuracy() * 100.0 << "%\n";
        }
    } catch (const std::exception& e) {
        // Partial artifacts plus an error manifest.
        if (!records.empty()) report::write_run_artifacts(cfg.out_dir, cfg, records);
        nlohmann::json manifest = {{"error", e.what()},
                                   {"completed_trials", records.size()},
                                   {"requested_trials", cfg.seeds.size()}};
        serialize::atomic_write_text(cfg.out_dir + "/error_manifest.json",
                                     manifest.dump(2) + "\n");
        std::cerr << "run failed mid-way: " << e.what() << "\n";
        return 2;
    }
    report::write_run_artifacts(cfg.out_dir, cfg, records);
    std::ifstream agg(cfg.out_dir + "/aggregate.txt");
    std::cout << agg.rdbuf();
    std::cout << "run artifacts written to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_upper_bound(const RunFlags& flags) {
    auto cfg = load_config(flags);
    auto in = config::load_inputs(cfg);
    fs::create_directories(cfg.out_dir);

    std::map<uint64_t, std::vector<double>> tables;
    for (uint64_t seed : cfg.seeds) {
        const auto schedule = data::build_task_schedule(in.train.num_classes, cfg.num_tasks, seed);
        auto ub = trainer::train_upper_bound(in, schedule, cfg.optim, seed, !flags.verbose);
        tables[seed] = ub.offline_prefix;
        serialize::save_model(ub.model, 0,
                              cfg.out_dir + "/ub_model_seed" + std::to_string(seed) + ".bin");
        std::cout << "seed " << seed << ": offline accuracy " << ub.overall_accuracy * 100.0
                  << "%\n";
    }
    report::write_offline_table(cfg.out_dir + "/offline_table.tsv", tables);
    serialize::atomic_write_text(cfg.out_dir + "/config.snapshot", cfg.canonical_text());
    std::cout << "offline table written to " << cfg.out_dir << "/offline_table.tsv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-free class-incremental learning experiments"};
    app.require_subcommand(1);

    RunFlags flags;
    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* opt = sub->add_option("--config", flags.config_path, "experiment config file");
        if (need_config) opt->required();
        sub->add_option("--out", flags.out_override, "output directory override");
        sub->add_option("--seed", flags.seed, "first trial seed override");
        sub->add_option("--trials", flags.trials, "trial count override");
        sub->add_flag("-v,--verbose", flags.verbose, "per-epoch progress output");
    };

    auto* run = app.add_subcommand("run", "run an experiment from a config");
    add_common(run, true);
    run->add_flag("--checkpoint-every-task", flags.checkpoint_every_task,
                  "save a model checkpoint after each task");
    run->add_flag("--dump-synth-grid", flags.dump_synth_grid,
                  "write a PPM grid of synthesized images per task");

    auto* compare = app.add_subcommand("compare", "tabulate results across run directories");
    std::vector<std::string> compare_dirs;
    std::string compare_out;
    compare->add_option("dirs", compare_dirs, "run directories")->expected(-1);
    compare->add_option("--out", compare_out, "output table file (default: stdout)");

    auto* diagnose = app.add_subcommand("diagnose", "recompute drift diagnostics from checkpoints");
    std::string diag_dir;
    std::vector<int> diag_tasks = {1, 2};
    uint64_t diag_seed = 0;
    diagnose->add_option("dir", diag_dir, "run directory")->required();
    diagnose->add_option("--tasks", diag_tasks, "task pair (1-based)")->expected(2);
    diagnose->add_option("--seed", diag_seed, "trial seed (default: first in config)");

    auto* ub = app.add_subcommand("upper-bound", "train the offline upper bound");
    add_common(ub, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(flags);
        if (compare->parsed()) {
            const std::string table = report::build_compare_table(compare_dirs);
            if (compare_out.empty()) {
                std::cout << table;
            } else {
                serialize::atomic_write_text(compare_out, table);
                std::cout << "comparison written to " << compare_out << "\n";
            }
            return 0;
        }
        if (diagnose->parsed()) {
            auto result = report::diagnose_run(diag_dir, diag_tasks[0], diag_tasks[1], diag_seed);
            std::cout << "MID(real" << diag_tasks[0] << ", synth" << diag_tasks[0]
                      << ") = " << result.drift.mid_real_synth << "\n";
            std::cout << "MID(real" << diag_tasks[0] << ", real" << diag_tasks[1]
                      << ") = " << result.drift.mid_real_real << "\n";
            std::cout << "MMD(real" << diag_tasks[0] << ", synth" << diag_tasks[0]
                      << ") = " << result.drift.mmd_real_synth << "\n";
            std::cout << "MMD(real" << diag_tasks[0] << ", real" << diag_tasks[1]
                      << ") = " << result.drift.mmd_real_real << "\n";
            std::cout << "report: " << result.report_path << "\n";
            std::cout << "embeddings: " << result.embeddings_path << "\n";
            return 0;
        }
        if (ub->parsed()) return cmd_upper_bound(flags);
    } catch (const data::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
