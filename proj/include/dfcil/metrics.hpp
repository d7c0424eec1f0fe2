#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dfcil/data.hpp"
#include "dfcil/model.hpp"

namespace dfcil::metrics {

// A[i][n]: accuracy of the model after task i on task-n test data with
// predictions over T_{1:i}. cumulative[i][n] evaluates over the union
// T_{1:n+1} test data (A_{i,1:n}). Entries for n > i stay unset; forgetting
// makes rows non-monotone, only range checks apply.
struct AccuracyMatrix {
    std::vector<std::vector<double>> per_task;
    std::vector<std::vector<double>> cumulative;

    int tasks_done() const { return static_cast<int>(per_task.size()); }
    // A_N over all seen classes after the last task.
    double final_accuracy() const;
};

using LogitFn = std::function<Tensor(const Tensor& images)>;

// Fraction of test examples whose argmax over span logits equals the label.
// span_classes maps logit columns to global class ids.
double accuracy_from_logits(const LogitFn& logits, const data::LabeledDataset& test,
                            const std::vector<int>& span_classes, int eval_batch = 256);

// Evaluation of an incremental model: test data restricted to `classes`,
// predictions over the heads of tasks [0, last_task].
double task_accuracy(model::IncrementalClassifier& m, const data::LabeledDataset& test,
                     const std::vector<int>& classes, int last_task, int eval_batch = 256);

struct OmegaResult {
    double omega = 0.0;
    std::vector<double> trajectory;  // partial average over tasks 1..t
};

// offline_prefix[n] = A_offline,1:n+1 for every prefix of the schedule.
OmegaResult omega(const AccuracyMatrix& acc, const std::vector<double>& offline_prefix,
                  const std::vector<int>& task_sizes);

// ---- representational diagnostics ----

// ||(mu_ref - mu_other) / sigma_ref||_2 with per-dimension reference sample
// std (n-1). Asymmetric in its arguments.
double mid_score(const Tensor& z_ref, const Tensor& z_other);

struct MmdConfig {
    double bandwidth = 0.0;  // 0: median pairwise distance heuristic on the pooled sample
};
// Unbiased squared-MMD estimate with a Gaussian RBF kernel; may be slightly
// negative under the null.
double mmd_score(const Tensor& z_a, const Tensor& z_b, const MmdConfig& cfg = {});

struct DriftReport {
    double mid_real_synth = 0.0;
    double mid_real_real = 0.0;
    double mmd_real_synth = 0.0;
    double mmd_real_real = 0.0;
    double mid_ratio() const { return mid_real_synth / mid_real_real; }
    double mmd_ratio() const { return mmd_real_synth / mmd_real_real; }
};

DriftReport drift_report(model::IncrementalClassifier& m, const Tensor& real_task1,
                         const Tensor& real_task2, const Tensor& synth_task1,
                         const MmdConfig& cfg = {});

// ---- embedding export ----

struct TaggedSamples {
    Tensor images;
    std::vector<int> labels;
    std::string provenance;  // e.g. "real-task-1", "synthetic-task-1"
};

void export_embeddings(model::IncrementalClassifier& m, const std::vector<TaggedSamples>& groups,
                       const std::string& path);

struct EmbeddingRow {
    std::vector<double> embedding;
    int label = 0;
    std::string provenance;
};
std::vector<EmbeddingRow> parse_embeddings(const std::string& path, int* dim_out = nullptr);

// ---- timing ----
double batch_timing(const std::function<void()>& step, int warmup, int measured);

// ---- per-run results ----

struct LossLogEntry {
    int step = 0;
    int task = 0;
    std::string term;
    double value = 0.0;
};

struct RunRecord {
    std::string method;
    uint64_t trial_seed = 0;
    uint64_t config_digest = 0;
    AccuracyMatrix acc;
    bool has_omega = false;
    OmegaResult omega;
    bool has_drift = false;
    DriftReport drift;
    double seconds_per_batch = 0.0;
    std::map<int, std::vector<int>> train_classes_read;  // audit: task -> classes
    std::vector<LossLogEntry> loss_log;
    int snapshot_peak = 0;   // cross-task memory accounting
    int generator_peak = 0;

    double final_accuracy() const { return acc.final_accuracy(); }
};

}  // namespace dfcil::metrics
