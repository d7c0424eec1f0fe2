#pragma once

#include <string>
#include <vector>

#include "dfcil/config.hpp"
#include "dfcil/metrics.hpp"

namespace dfcil::report {

// ---- run directory artifacts ----
// config.snapshot, per-trial records (JSON), loss logs (JSONL), aggregate
// table (JSON + text), accuracy-matrix and omega-trajectory tables (TSV).
void write_run_artifacts(const std::string& out_dir, const config::ExperimentConfig& cfg,
                         const std::vector<metrics::RunRecord>& records);

std::string record_to_json_text(const metrics::RunRecord& r);
metrics::RunRecord record_from_json_text(const std::string& text);

// "mean ± std" with one decimal, values given as percentages.
std::string format_mean_std(double mean_pct, double std_pct);

// ---- comparison across runs ----
// One row per run directory, ordered by the declared method order; errors on
// fewer than two directories or incompatible task counts.
std::string build_compare_table(const std::vector<std::string>& run_dirs);

// ---- drift diagnosis from checkpoints ----
struct DiagnoseResult {
    metrics::DriftReport drift;
    std::string report_path;
    std::string embeddings_path;
};
// task_a/task_b are 1-based; requires checkpoints written with
// --checkpoint-every-task. Retrains the task-a generator deterministically
// from its checkpoint (generators are never persisted past their task).
DiagnoseResult diagnose_run(const std::string& run_dir, int task_a, int task_b,
                            uint64_t seed = 0 /* 0: first trial seed */);

// ---- qualitative image dumps ----
void write_image_grid_ppm(const Tensor& images, const std::string& path);

// ---- upper-bound artifacts ----
void write_offline_table(const std::string& path,
                         const std::map<uint64_t, std::vector<double>>& tables);
std::map<uint64_t, std::vector<double>> read_offline_table(const std::string& path);

}  // namespace dfcil::report
