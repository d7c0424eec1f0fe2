#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dfcil/model.hpp"

namespace dfcil::losses {

struct ObjectiveWeights {
    double lambda_kd = 0.1;
    double lambda_ft = 1.0;
    double kd_temperature = 2.0;
};

// Real current-task samples plus synthetic past-task samples, with labels as
// global class ids. Provenance is carried by the split storage.
struct MixedBatch {
    Tensor real_x;
    std::vector<int> real_y;
    Tensor synth_x;
    std::vector<int> synth_y;

    bool has_real() const { return !real_y.empty(); }
    bool has_synth() const { return !synth_y.empty(); }
    int total() const { return static_cast<int>(real_y.size() + synth_y.size()); }
};

// Ablation switches for the combined objective; defaults reproduce the full
// method.
struct OursOptions {
    bool balancing = true;
    bool standard_ce = false;      // replace local CE with CE over all heads
    bool wfeat_real_only = false;  // feature distillation on real data only
    bool wfeat_synth_only = false; // ... or synthetic data only
    bool no_ft = false;            // drop the head fine-tuning term
};

using Breakdown = std::vector<std::pair<std::string, double>>;

// ---- distillation losses ----

// KL(padded tempered teacher probs || tempered student probs) over all 1:n
// classes; zero-mass teacher entries contribute 0.
ad::Var kd_di_loss(model::IncrementalClassifier& student, const model::ModelSnapshot& teacher,
                   const Tensor& x, double temperature);

// Classic variant: KL over the teacher's own classes against the student's
// old-head logit slice (no padding). Used by the LwF baselines.
ad::Var kd_lwf_loss(model::IncrementalClassifier& student, const model::ModelSnapshot& teacher,
                    const Tensor& x, double temperature);

// Cross-entropy over the current task's head only, labels remapped to local
// indices. Real current-task data only; a label outside the current task is
// an error.
ad::Var local_ce_loss(model::IncrementalClassifier& student, const Tensor& x,
                      const std::vector<int>& y);

// Mean squared distance between student and teacher penultimate embeddings.
ad::Var feature_distillation_loss(model::IncrementalClassifier& student,
                                  const model::ModelSnapshot& teacher, const Tensor& x);

// Feature distillation after projecting through the teacher's frozen
// past-class head W; evaluated over the union of real and synthetic samples.
ad::Var weighted_feature_distillation_loss(model::IncrementalClassifier& student,
                                           const model::ModelSnapshot& teacher,
                                           const MixedBatch& batch);

// Per-sample weights implementing task-balancing over provenance: a sample
// is weighted by its own provenance's share of the 1:n class count
// (past-task samples |T_{1:n-1}|/|T_{1:n}|, current-task |T_n|/|T_{1:n}|),
// renormalized to mean 1. Equalizes expected per-class gradient mass between
// old and new classes. Single-provenance batches degrade to uniform weights
// with a logged warning.
std::vector<double> task_balance_weights(int n_real, int n_synth, int current_classes,
                                         int past_classes, bool enabled);

// Cross-entropy over all 1:n heads with the backbone detached: gradients
// reach only the classification heads.
ad::Var ft_ce_loss(model::IncrementalClassifier& student, const MixedBatch& batch,
                   const std::vector<double>& balance_weights);

// ---- combined objectives ----

struct OursResult {
    ad::Var total;
    Breakdown terms;
};

// local CE (real) + lambda_kd * wfeat({x, x_hat}) + lambda_ft * ft({x, x_hat}).
// Builds one student forward per provenance and shares it across terms.
OursResult ours_objective(model::IncrementalClassifier& student,
                          const model::ModelSnapshot& teacher, const MixedBatch& batch,
                          const ObjectiveWeights& w, const OursOptions& opt = {});

// CE over 1:n (real) + KD_DI(real) + KD_DI(synthetic).
struct LwfDiResult {
    ad::Var total;
    Breakdown terms;
};
LwfDiResult lwf_di_objective(model::IncrementalClassifier& student,
                             const model::ModelSnapshot& teacher, const MixedBatch& batch,
                             double temperature, double kd_weight = 1.0);

// ---- shared helpers ----
std::vector<int> map_labels_to_span(const model::IncrementalClassifier& m,
                                    const std::vector<int>& y, int first_task, int last_task);
ad::Var kd_di_from_logits(const ad::Var& student_logits_all, const Tensor& padded_teacher_probs,
                          double temperature);

}  // namespace dfcil::losses
