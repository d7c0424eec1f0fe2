#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dfcil/data.hpp"
#include "dfcil/losses.hpp"
#include "dfcil/metrics.hpp"
#include "dfcil/synthesis.hpp"

namespace dfcil::trainer {

enum class Method { base, lwf, lwf_synth, deep_inversion, naive_rehearsal, lwf_coreset, ours };

std::string method_name(Method m);
Method method_from_name(const std::string& name);
// Declared presentation order (mirrors the results tables).
const std::vector<Method>& method_order();
std::string replay_kind(Method m);  // None / Synthetic / Coreset
bool method_uses_synthesis(Method m);
bool method_uses_coreset(Method m);
bool method_is_data_free(Method m);
bool method_needs_teacher(Method m);

struct AblationFlags {
    bool no_balancing = false;
    bool standard_ce = false;
    bool wfeat_real_only = false;
    bool wfeat_synth_only = false;
    bool no_ft = false;
    bool any() const {
        return no_balancing || standard_ce || wfeat_real_only || wfeat_synth_only || no_ft;
    }
};

struct MethodConfig {
    Method method = Method::ours;
    AblationFlags ablation;
    losses::ObjectiveWeights objective;
    synthesis::InversionWeights inversion;
    synthesis::GeneratorConfig generator;
    int synthesis_steps = 5000;
    int synthesis_batch = 128;
    std::string synthesis_backend = "generator";  // generator | direct
    int direct_steps = 200;                       // per-sample optimization for direct backend
    double lwf_kd_weight = 1.0;
    int coreset_capacity = 2000;
};

// Rejects incompatible combinations (ablations without ours, conflicting
// wfeat flags, coreset capacity on data-free methods).
void validate_method_config(const MethodConfig& cfg);

// Maps ablation flags onto the effective objective assembly.
losses::OursOptions apply_ablation(const MethodConfig& cfg);

struct OptimSchedule {
    int epochs = 250;
    double lr = 0.1;
    std::vector<int> milestones = {100, 150, 200};
    double decay = 0.1;
    double weight_decay = 2e-4;
    double momentum = 0.9;
    int batch = 128;

    void validate() const;
    double lr_at(int epoch) const;
};

struct TrainerState {
    model::IncrementalClassifier model;
    std::optional<model::ModelSnapshot> snapshot;
    data::CoresetStore coreset;
    int completed_tasks = 0;
};

struct ExperimentInputs {
    data::LabeledDataset train;
    data::LabeledDataset test;
    int num_tasks = 0;
    model::BackboneKind backbone = model::BackboneKind::small_conv;
    int backbone_width = 0;
    // When set, per-channel mean/std are computed per trial on the training
    // split of the trial's first task and frozen for the whole sequence.
    // Off for sources that already emit normalized pixels (toy generator).
    bool per_trial_normalization = false;
};

struct RunOptions {
    bool quiet = true;
    int log_interval = 10;
    // Omega normalization: explicit per-seed offline prefix tables, or train
    // the upper bound inline per trial, or skip omega entirely.
    const std::map<uint64_t, std::vector<double>>* offline_tables = nullptr;
    bool inline_upper_bound = true;
    bool compute_drift = true;
    int drift_sample = 200;
    std::function<void(uint64_t seed, int task_idx, TrainerState& state)> checkpoint_hook;
    std::function<void(uint64_t seed, int task_idx, const Tensor& images)> synth_dump_hook;
    // Runs at the end of a synthesis task while the generator is still alive
    // (drift diagnostics sample through it before it is discarded).
    std::function<void(int task_idx, synthesis::SyntheticSource& source)> source_end_hook;
};

struct TaskLog {
    std::vector<metrics::LossLogEntry> losses;
    double seconds_per_batch = 0.0;
    int steps = 0;
    std::vector<double> generator_trace;
};

// One task of the incremental sequence: snapshot, grow heads, synthesize,
// run the epoch loop, update the coreset, discard the generator.
void train_task(TrainerState& state, const data::TaskSchedule& schedule,
                const data::LabeledDataset& train, int task_idx, const MethodConfig& mcfg,
                const OptimSchedule& sched, uint64_t trial_seed, data::AccessAudit* audit,
                TaskLog* log, const RunOptions& opts);

metrics::RunRecord run_single_trial(const ExperimentInputs& in, const MethodConfig& mcfg,
                                    const OptimSchedule& sched, uint64_t seed,
                                    const RunOptions& opts);

// Full experiment: one trial per seed, per-trial class reshuffling.
std::vector<metrics::RunRecord> run_experiment(const ExperimentInputs& in,
                                               const MethodConfig& mcfg,
                                               const OptimSchedule& sched,
                                               const std::vector<uint64_t>& seeds,
                                               const RunOptions& opts);

struct UpperBoundResult {
    model::IncrementalClassifier model;
    std::vector<double> offline_prefix;  // A_offline,1:n per schedule prefix
    double overall_accuracy = 0.0;
};

// Offline training on all classes at once; prefix accuracies follow the
// schedule's shuffled class order with predictions over all M heads.
UpperBoundResult train_upper_bound(const ExperimentInputs& in, const data::TaskSchedule& schedule,
                                   const OptimSchedule& sched, uint64_t seed, bool quiet = true);

struct Aggregate {
    double a_n_mean = 0.0, a_n_std = 0.0;
    bool has_omega = false;
    double omega_mean = 0.0, omega_std = 0.0;
    int trials = 0;
};
// Population standard deviation across trials.
Aggregate aggregate_records(const std::vector<metrics::RunRecord>& records);

}  // namespace dfcil::trainer
