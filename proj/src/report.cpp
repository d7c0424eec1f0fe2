#include "dfcil/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "dfcil/serialize.hpp"

namespace dfcil::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json record_to_json(const metrics::RunRecord& r) {
    json j;
    j["method"] = r.method;
    j["trial_seed"] = r.trial_seed;
    j["config_digest"] = r.config_digest;
    j["per_task"] = r.acc.per_task;
    j["cumulative"] = r.acc.cumulative;
    j["final_accuracy"] = r.final_accuracy();
    j["has_omega"] = r.has_omega;
    if (r.has_omega) {
        j["omega"] = r.omega.omega;
        j["omega_trajectory"] = r.omega.trajectory;
    }
    j["has_drift"] = r.has_drift;
    if (r.has_drift) {
        j["drift"] = {{"mid_real_synth", r.drift.mid_real_synth},
                      {"mid_real_real", r.drift.mid_real_real},
                      {"mmd_real_synth", r.drift.mmd_real_synth},
                      {"mmd_real_real", r.drift.mmd_real_real}};
    }
    j["seconds_per_batch"] = r.seconds_per_batch;
    j["snapshot_peak"] = r.snapshot_peak;
    j["generator_peak"] = r.generator_peak;
    json audit = json::object();
    for (const auto& [task, classes] : r.train_classes_read) {
        audit[std::to_string(task)] = classes;
    }
    j["train_classes_read"] = audit;
    return j;
}

metrics::RunRecord record_from_json(const json& j) {
    metrics::RunRecord r;
    r.method = j.at("method").get<std::string>();
    r.trial_seed = j.at("trial_seed").get<uint64_t>();
    r.config_digest = j.value("config_digest", uint64_t{0});
    r.acc.per_task = j.at("per_task").get<std::vector<std::vector<double>>>();
    r.acc.cumulative = j.at("cumulative").get<std::vector<std::vector<double>>>();
    r.has_omega = j.value("has_omega", false);
    if (r.has_omega) {
        r.omega.omega = j.at("omega").get<double>();
        r.omega.trajectory = j.at("omega_trajectory").get<std::vector<double>>();
    }
    r.has_drift = j.value("has_drift", false);
    if (r.has_drift) {
        const auto& d = j.at("drift");
        r.drift.mid_real_synth = d.at("mid_real_synth").get<double>();
        r.drift.mid_real_real = d.at("mid_real_real").get<double>();
        r.drift.mmd_real_synth = d.at("mmd_real_synth").get<double>();
        r.drift.mmd_real_real = d.at("mmd_real_real").get<double>();
    }
    r.seconds_per_batch = j.value("seconds_per_batch", 0.0);
    r.snapshot_peak = j.value("snapshot_peak", 0);
    r.generator_peak = j.value("generator_peak", 0);
    if (j.contains("train_classes_read")) {
        for (const auto& [task, classes] : j.at("train_classes_read").items()) {
            r.train_classes_read[std::stoi(task)] = classes.get<std::vector<int>>();
        }
    }
    return r;
}

json aggregate_json(const config::ExperimentConfig& cfg,
                    const std::vector<metrics::RunRecord>& records) {
    const auto agg = trainer::aggregate_records(records);
    json j;
    j["method"] = trainer::method_name(cfg.method.method);
    j["replay"] = trainer::replay_kind(cfg.method.method);
    j["tasks"] = cfg.num_tasks;
    j["trials"] = agg.trials;
    j["seeds"] = cfg.seeds;
    j["a_n_mean"] = agg.a_n_mean;
    j["a_n_std"] = agg.a_n_std;
    j["has_omega"] = agg.has_omega;
    j["omega_mean"] = agg.omega_mean;
    j["omega_std"] = agg.omega_std;
    j["config_digest"] = cfg.digest();
    // Wall-clock timing stays in the per-trial records; the aggregate table
    // is a pure function of (config, seeds).
    return j;
}

}  // namespace

std::string record_to_json_text(const metrics::RunRecord& r) { return record_to_json(r).dump(2); }

metrics::RunRecord record_from_json_text(const std::string& text) {
    return record_from_json(json::parse(text));
}

std::string format_mean_std(double mean_pct, double std_pct) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", mean_pct, std_pct);
    return buf;
}

void write_run_artifacts(const std::string& out_dir, const config::ExperimentConfig& cfg,
                         const std::vector<metrics::RunRecord>& records) {
    fs::create_directories(out_dir);
    serialize::atomic_write_text(out_dir + "/config.snapshot", cfg.canonical_text());

    for (const auto& r : records) {
        serialize::atomic_write_text(
            out_dir + "/record_seed" + std::to_string(r.trial_seed) + ".json",
            record_to_json_text(r) + "\n");
        std::ostringstream log;
        for (const auto& e : r.loss_log) {
            json line = {{"step", e.step}, {"task", e.task}, {"term", e.term}, {"value", e.value}};
            log << line.dump() << "\n";
        }
        serialize::atomic_write_text(
            out_dir + "/loss_log_seed" + std::to_string(r.trial_seed) + ".jsonl", log.str());
    }

    // Accuracy matrix keyed (trial, task_i, task_n) for external plotting.
    {
        std::ostringstream tsv;
        tsv << "trial\ttask_i\ttask_n\taccuracy\tcumulative\n";
        for (const auto& r : records) {
            for (size_t i = 0; i < r.acc.per_task.size(); ++i) {
                for (size_t n = 0; n <= i; ++n) {
                    tsv << r.trial_seed << "\t" << i + 1 << "\t" << n + 1 << "\t"
                        << r.acc.per_task[i][n] << "\t" << r.acc.cumulative[i][n] << "\n";
                }
            }
        }
        serialize::atomic_write_text(out_dir + "/acc_matrix.tsv", tsv.str());
    }
    {
        std::ostringstream tsv;
        tsv << "trial\ttask\tomega_partial\n";
        for (const auto& r : records) {
            if (!r.has_omega) continue;
            for (size_t t = 0; t < r.omega.trajectory.size(); ++t) {
                tsv << r.trial_seed << "\t" << t + 1 << "\t" << r.omega.trajectory[t] << "\n";
            }
        }
        serialize::atomic_write_text(out_dir + "/omega_trajectory.tsv", tsv.str());
    }

    const json agg = aggregate_json(cfg, records);
    serialize::atomic_write_text(out_dir + "/aggregate.json", agg.dump(2) + "\n");

    std::ostringstream txt;
    txt << "Method            Replay Data   A_N (↑)        Ω (↑)\n";
    char row[256];
    const std::string a = format_mean_std(agg["a_n_mean"].get<double>() * 100.0,
                                          agg["a_n_std"].get<double>() * 100.0);
    const std::string o = agg["has_omega"].get<bool>()
                              ? format_mean_std(agg["omega_mean"].get<double>() * 100.0,
                                                agg["omega_std"].get<double>() * 100.0)
                              : std::string("-");
    std::snprintf(row, sizeof(row), "%-17s %-13s %-14s %s\n",
                  agg["method"].get<std::string>().c_str(),
                  agg["replay"].get<std::string>().c_str(), a.c_str(), o.c_str());
    txt << row;
    serialize::atomic_write_text(out_dir + "/aggregate.txt", txt.str());
}

std::string build_compare_table(const std::vector<std::string>& run_dirs) {
    if (run_dirs.size() < 2) {
        throw std::invalid_argument("compare requires at least 2 run directories, got " +
                                    std::to_string(run_dirs.size()));
    }
    struct Row {
        std::string method, replay;
        double a_mean, a_std, o_mean, o_std;
        bool has_omega;
        int tasks;
    };
    std::vector<Row> rows;
    for (const auto& dir : run_dirs) {
        std::ifstream f(dir + "/aggregate.json");
        if (!f) throw std::runtime_error("no aggregate.json under " + dir);
        json j = json::parse(f);
        rows.push_back({j.at("method").get<std::string>(), j.at("replay").get<std::string>(),
                        j.at("a_n_mean").get<double>(), j.at("a_n_std").get<double>(),
                        j.value("omega_mean", 0.0), j.value("omega_std", 0.0),
                        j.value("has_omega", false), j.at("tasks").get<int>()});
    }
    for (const auto& r : rows) {
        if (r.tasks != rows[0].tasks) {
            throw std::invalid_argument("incompatible task counts across runs: " +
                                        std::to_string(rows[0].tasks) + " vs " +
                                        std::to_string(r.tasks));
        }
    }
    // Stable sort by the declared method order.
    auto rank = [](const std::string& name) {
        const auto& order = trainer::method_order();
        for (size_t i = 0; i < order.size(); ++i) {
            if (trainer::method_name(order[i]) == name) return i;
        }
        return order.size();
    };
    std::stable_sort(rows.begin(), rows.end(),
                     [&](const Row& a, const Row& b) { return rank(a.method) < rank(b.method); });

    std::ostringstream out;
    out << "Method            Replay Data   A_N (↑)        Ω (↑)\n";
    for (const auto& r : rows) {
        char buf[256];
        const std::string a = format_mean_std(r.a_mean * 100.0, r.a_std * 100.0);
        const std::string o =
            r.has_omega ? format_mean_std(r.o_mean * 100.0, r.o_std * 100.0) : std::string("-");
        std::snprintf(buf, sizeof(buf), "%-17s %-13s %-14s %s\n", r.method.c_str(),
                      r.replay.c_str(), a.c_str(), o.c_str());
        out << buf;
    }
    return out.str();
}

DiagnoseResult diagnose_run(const std::string& run_dir, int task_a, int task_b, uint64_t seed) {
    auto kv = config::KeyValues::parse_file(run_dir + "/config.snapshot");
    auto cfg = config::ExperimentConfig::from_kv(kv);
    if (seed == 0) seed = cfg.seeds.at(0);

    if (task_a < 1 || task_b <= task_a || task_b > cfg.num_tasks) {
        throw std::invalid_argument("diagnose: task pair (" + std::to_string(task_a) + "," +
                                    std::to_string(task_b) + ") invalid for a " +
                                    std::to_string(cfg.num_tasks) + "-task run");
    }
    if (!trainer::method_uses_synthesis(cfg.method.method)) {
        throw std::invalid_argument("diagnose: method '" +
                                    trainer::method_name(cfg.method.method) +
                                    "' does not synthesize replay data");
    }
    const auto ckpt = [&](int task_1based) {
        return run_dir + "/ckpt_seed" + std::to_string(seed) + "_task" +
               std::to_string(task_1based) + ".bin";
    };
    for (int t : {task_a, task_b}) {
        if (!fs::exists(ckpt(t))) {
            throw std::runtime_error("diagnose: missing checkpoint " + ckpt(t) +
                                     "; rerun with --checkpoint-every-task");
        }
    }

    auto in = config::load_inputs(cfg);
    const auto schedule = data::build_task_schedule(in.train.num_classes, cfg.num_tasks, seed);
    data::LabeledDataset test = in.test;
    if (in.per_trial_normalization) {
        const auto stats = data::compute_channel_stats(in.train, schedule.task(0));
        data::normalize_inplace(test, stats);
    }

    auto model_b = serialize::load_model(ckpt(task_b));
    auto model_a = serialize::load_model(ckpt(task_a));
    model::ModelSnapshot teacher(model_a.model);

    // The generator was discarded at task end; rebuild it deterministically
    // with the same seed derivation the run used for task_b's synthesis.
    const uint64_t gen_seed = mix_seed(seed, 0x6e2a, static_cast<uint64_t>(task_b - 1));
    auto trained = synthesis::train_generator(teacher, cfg.method.inversion, cfg.method.generator,
                                              cfg.method.synthesis_steps,
                                              cfg.method.synthesis_batch, gen_seed);

    auto real_a = data::task_subset(test, schedule.task(task_a - 1));
    auto real_b = data::task_subset(test, schedule.task(task_b - 1));
    const int c = std::min<int>({cfg.drift_sample, static_cast<int>(real_a.count()),
                                 static_cast<int>(real_b.count())});
    auto to_tensor = [&](const data::LabeledDataset& ds) {
        Tensor t({c, ds.channels, ds.height, ds.width});
        std::copy_n(ds.images.data(), static_cast<size_t>(c) * ds.image_size(), t.data());
        return t;
    };
    Rng rng(mix_seed(seed, 0xd1a6));
    auto [synth, synth_labels] = synthesis::sample_synthetic(trained.generator, teacher, c, rng);

    Tensor ra = to_tensor(real_a), rb = to_tensor(real_b);
    DiagnoseResult out;
    out.drift = metrics::drift_report(model_b.model, ra, rb, synth);

    std::vector<int> la(real_a.labels.begin(), real_a.labels.begin() + c);
    std::vector<int> lb(real_b.labels.begin(), real_b.labels.begin() + c);
    out.embeddings_path = run_dir + "/embeddings_task" + std::to_string(task_a) + "_" +
                          std::to_string(task_b) + ".tsv";
    metrics::export_embeddings(
        model_b.model,
        {{ra, la, "real-task-" + std::to_string(task_a)},
         {rb, lb, "real-task-" + std::to_string(task_b)},
         {synth, synth_labels, "synthetic-task-" + std::to_string(task_a)}},
        out.embeddings_path);

    json j = {{"task_a", task_a},
              {"task_b", task_b},
              {"seed", seed},
              {"mid_real_synth", out.drift.mid_real_synth},
              {"mid_real_real", out.drift.mid_real_real},
              {"mid_ratio", out.drift.mid_ratio()},
              {"mmd_real_synth", out.drift.mmd_real_synth},
              {"mmd_real_real", out.drift.mmd_real_real},
              {"mmd_ratio", out.drift.mmd_ratio()}};
    out.report_path = run_dir + "/drift_task" + std::to_string(task_a) + "_" +
                      std::to_string(task_b) + ".json";
    serialize::atomic_write_text(out.report_path, j.dump(2) + "\n");
    return out;
}

void write_image_grid_ppm(const Tensor& images, const std::string& path) {
    const int B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(B))));
    const int rows = (B + cols - 1) / cols;
    const int GW = cols * W, GH = rows * H;
    std::vector<unsigned char> rgb(static_cast<size_t>(GW) * GH * 3, 0);
    for (int b = 0; b < B; ++b) {
        const double* img = images.data() + static_cast<size_t>(b) * C * H * W;
        double lo = img[0], hi = img[0];
        for (size_t i = 0; i < static_cast<size_t>(C) * H * W; ++i) {
            lo = std::min(lo, img[i]);
            hi = std::max(hi, img[i]);
        }
        const double range = hi - lo > 1e-12 ? hi - lo : 1.0;
        const int oy = (b / cols) * H, ox = (b % cols) * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const int cc = C == 3 ? c : 0;
                    const double v = img[(static_cast<size_t>(cc) * H + y) * W + x];
                    rgb[((static_cast<size_t>(oy + y)) * GW + (ox + x)) * 3 + c] =
                        static_cast<unsigned char>(255.0 * (v - lo) / range);
                }
            }
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P6\n" << GW << " " << GH << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

void write_offline_table(const std::string& path,
                         const std::map<uint64_t, std::vector<double>>& tables) {
    std::ostringstream tsv;
    tsv << "seed\tprefix\taccuracy\n";
    tsv.precision(17);
    for (const auto& [seed, prefix] : tables) {
        for (size_t n = 0; n < prefix.size(); ++n) {
            tsv << seed << "\t" << n + 1 << "\t" << prefix[n] << "\n";
        }
    }
    serialize::atomic_write_text(path, tsv.str());
}

std::map<uint64_t, std::vector<double>> read_offline_table(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open offline table " + path);
    std::map<uint64_t, std::vector<double>> out;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        uint64_t seed;
        size_t prefix;
        double acc;
        is >> seed >> prefix >> acc;
        auto& v = out[seed];
        if (v.size() < prefix) v.resize(prefix);
        v[prefix - 1] = acc;
    }
    return out;
}

}  // namespace dfcil::report
