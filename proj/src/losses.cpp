#include "dfcil/losses.hpp"

#include <iostream>
#include <stdexcept>

namespace dfcil::losses {

std::vector<int> map_labels_to_span(const model::IncrementalClassifier& m,
                                    const std::vector<int>& y, int first_task, int last_task) {
    std::vector<int> local(y.size());
    for (size_t i = 0; i < y.size(); ++i) {
        const int idx = m.local_index(y[i], first_task, last_task);
        if (idx < 0) {
            throw std::invalid_argument("label " + std::to_string(y[i]) +
                                        " not registered in task span [" +
                                        std::to_string(first_task) + "," +
                                        std::to_string(last_task) + "]");
        }
        local[i] = idx;
    }
    return local;
}

ad::Var kd_di_from_logits(const ad::Var& student_logits_all, const Tensor& padded_teacher_probs,
                          double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("kd_di_loss: temperature must be positive, got " +
                                    std::to_string(temperature));
    }
    auto logq = ad::log_softmax_rows(ad::scale(student_logits_all, 1.0 / temperature));
    return ad::kl_const_target(logq, padded_teacher_probs);
}

ad::Var kd_di_loss(model::IncrementalClassifier& student, const model::ModelSnapshot& teacher,
                   const Tensor& x, double temperature) {
    if (student.num_classes() < teacher.num_classes()) {
        throw std::invalid_argument("kd_di_loss: student has fewer classes than teacher");
    }
    Tensor probs = model::padded_teacher_probs(teacher, x, student.num_classes(), temperature);
    auto feats = student.features(ad::constant(x), true);
    auto logits = student.logits_over_tasks(feats, 0, student.num_tasks() - 1);
    return kd_di_from_logits(logits, probs, temperature);
}

ad::Var kd_lwf_loss(model::IncrementalClassifier& student, const model::ModelSnapshot& teacher,
                    const Tensor& x, double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("kd_lwf_loss: temperature must be positive");
    }
    // Teacher probs over its own classes, no padding; student's old-head slice.
    Tensor probs = model::padded_teacher_probs(teacher, x, teacher.num_classes(), temperature);
    auto feats = student.features(ad::constant(x), true);
    auto logits = student.logits_over_tasks(feats, 0, teacher.num_tasks() - 1);
    return kd_di_from_logits(logits, probs, temperature);
}

namespace {

ad::Var local_ce_from_feats(model::IncrementalClassifier& student, const ad::Var& feats,
                            const std::vector<int>& y) {
    const int n = student.num_tasks() - 1;
    auto local = map_labels_to_span(student, y, n, n);
    auto logits = student.logits_over_tasks(feats, n, n);
    return ad::nll_rows(ad::log_softmax_rows(logits), local, {});
}

// Projects features through the teacher's frozen past-class head (linear
// part only; a shared bias cancels in the difference).
Tensor project_const(const Tensor& feats, const Tensor& W) {
    const int B = feats.dim(0), D = feats.dim(1), K = W.dim(0);
    Tensor out({B, K});
    gemm_nt(feats.data(), W.data(), out.data(), B, D, K);
    return out;
}

ad::Var wfeat_from_feats(const model::ModelSnapshot& teacher, const ad::Var& student_feats,
                         const Tensor& x) {
    const Tensor W = teacher.past_head_weights();
    auto w_const = ad::constant(W);
    auto proj_student = ad::linear(student_feats, w_const, ad::Var());
    Tensor teacher_feats = teacher.features_eval(x);
    auto proj_teacher = ad::constant(project_const(teacher_feats, W));
    return ad::sq_diff_mean_rows(proj_student, proj_teacher);
}

ad::Var ft_from_feats(model::IncrementalClassifier& student, const ad::Var& feats_detached,
                      const std::vector<int>& y_all, const std::vector<double>& weights) {
    auto logits = student.logits_over_tasks(feats_detached, 0, student.num_tasks() - 1);
    auto local = map_labels_to_span(student, y_all, 0, student.num_tasks() - 1);
    return ad::nll_rows(ad::log_softmax_rows(logits), local, weights);
}

}  // namespace

ad::Var local_ce_loss(model::IncrementalClassifier& student, const Tensor& x,
                      const std::vector<int>& y) {
    auto feats = student.features(ad::constant(x), true);
    return local_ce_from_feats(student, feats, y);
}

ad::Var feature_distillation_loss(model::IncrementalClassifier& student,
                                  const model::ModelSnapshot& teacher, const Tensor& x) {
    const int ds = student.backbone().feature_dim();
    const int dt = teacher.model().backbone().feature_dim();
    if (ds != dt) {
        throw std::invalid_argument("feature_distillation_loss: dimension mismatch " +
                                    std::to_string(ds) + " vs " + std::to_string(dt));
    }
    auto feats = student.features(ad::constant(x), true);
    auto teacher_feats = ad::constant(teacher.features_eval(x));
    return ad::sq_diff_mean_rows(feats, teacher_feats);
}

ad::Var weighted_feature_distillation_loss(model::IncrementalClassifier& student,
                                           const model::ModelSnapshot& teacher,
                                           const MixedBatch& batch) {
    if (teacher.num_tasks() == 0) {
        throw std::invalid_argument("weighted_feature_distillation_loss: teacher has no heads");
    }
    std::vector<ad::Var> parts;
    std::vector<double> counts;
    if (batch.has_real()) {
        auto feats = student.features(ad::constant(batch.real_x), true);
        parts.push_back(wfeat_from_feats(teacher, feats, batch.real_x));
        counts.push_back(static_cast<double>(batch.real_y.size()));
    }
    if (batch.has_synth()) {
        auto feats = student.features_batchstats(ad::constant(batch.synth_x));
        parts.push_back(wfeat_from_feats(teacher, feats, batch.synth_x));
        counts.push_back(static_cast<double>(batch.synth_y.size()));
    }
    if (parts.empty()) {
        throw std::invalid_argument("weighted_feature_distillation_loss: empty batch");
    }
    // Each part is a mean over its own samples; recombine into the mean over
    // the union.
    const double total = counts.size() == 2 ? counts[0] + counts[1] : counts[0];
    std::vector<double> w;
    for (double c : counts) w.push_back(c / total);
    return ad::weighted_sum(parts, w);
}

std::vector<double> task_balance_weights(int n_real, int n_synth, int current_classes,
                                         int past_classes, bool enabled) {
    const int total = n_real + n_synth;
    std::vector<double> w(static_cast<size_t>(total), 1.0);
    if (!enabled) return w;
    if (n_real == 0 || n_synth == 0) {
        std::cerr << "[losses] task balancing requested on a single-provenance batch; "
                     "using uniform weights\n";
        return w;
    }
    const double all = current_classes + past_classes;
    const double w_real = current_classes / all;
    const double w_synth = past_classes / all;
    double mean = (n_real * w_real + n_synth * w_synth) / total;
    for (int i = 0; i < n_real; ++i) w[static_cast<size_t>(i)] = w_real / mean;
    for (int i = 0; i < n_synth; ++i) w[static_cast<size_t>(n_real + i)] = w_synth / mean;
    return w;
}

ad::Var ft_ce_loss(model::IncrementalClassifier& student, const MixedBatch& batch,
                   const std::vector<double>& balance_weights) {
    if (batch.total() == 0) throw std::invalid_argument("ft_ce_loss: empty batch");
    std::vector<ad::Var> feat_parts;
    std::vector<int> y_all;
    if (batch.has_real()) {
        feat_parts.push_back(student.features(ad::constant(batch.real_x), true));
        y_all.insert(y_all.end(), batch.real_y.begin(), batch.real_y.end());
    }
    if (batch.has_synth()) {
        feat_parts.push_back(student.features_batchstats(ad::constant(batch.synth_x)));
        y_all.insert(y_all.end(), batch.synth_y.begin(), batch.synth_y.end());
    }
    ad::Var feats = feat_parts.size() == 2 ? ad::concat_rows(feat_parts[0], feat_parts[1])
                                           : feat_parts[0];
    return ft_from_feats(student, ad::detach(feats), y_all, balance_weights);
}

OursResult ours_objective(model::IncrementalClassifier& student,
                          const model::ModelSnapshot& teacher, const MixedBatch& batch,
                          const ObjectiveWeights& w, const OursOptions& opt) {
    if (opt.wfeat_real_only && opt.wfeat_synth_only) {
        throw std::invalid_argument("ours_objective: wfeat_real_only and wfeat_synth_only conflict");
    }
    if (student.num_tasks() < 2) {
        throw std::invalid_argument("ours_objective: requires task index >= 2");
    }
    const int n = student.num_tasks() - 1;
    const int cur_classes = static_cast<int>(student.task_classes(n).size());
    const int past_classes = student.num_classes() - cur_classes;

    // One student forward per provenance, shared across all terms.
    auto feats_real = student.features(ad::constant(batch.real_x), true);
    ad::Var feats_synth;
    if (batch.has_synth()) feats_synth = student.features_batchstats(ad::constant(batch.synth_x));

    std::vector<ad::Var> terms;
    std::vector<double> weights;
    Breakdown breakdown;

    // (i) learning the current task
    ad::Var ce;
    if (opt.standard_ce) {
        auto local = map_labels_to_span(student, batch.real_y, 0, n);
        auto logits = student.logits_over_tasks(feats_real, 0, n);
        ce = ad::nll_rows(ad::log_softmax_rows(logits), local, {});
    } else {
        ce = local_ce_from_feats(student, feats_real, batch.real_y);
    }
    terms.push_back(ce);
    weights.push_back(1.0);
    breakdown.push_back({opt.standard_ce ? "standard_ce" : "local_ce", ce->val.v[0]});

    // (ii) importance-weighted feature distillation over {x, x_hat}
    std::vector<ad::Var> wf_parts;
    std::vector<double> wf_counts;
    if (!opt.wfeat_synth_only) {
        wf_parts.push_back(wfeat_from_feats(teacher, feats_real, batch.real_x));
        wf_counts.push_back(static_cast<double>(batch.real_y.size()));
    }
    if (!opt.wfeat_real_only && batch.has_synth()) {
        wf_parts.push_back(wfeat_from_feats(teacher, feats_synth, batch.synth_x));
        wf_counts.push_back(static_cast<double>(batch.synth_y.size()));
    }
    if (!wf_parts.empty()) {
        double total_count = 0.0;
        for (double c : wf_counts) total_count += c;
        std::vector<double> frac;
        for (double c : wf_counts) frac.push_back(c / total_count);
        auto wfeat = ad::weighted_sum(wf_parts, frac);
        terms.push_back(wfeat);
        weights.push_back(w.lambda_kd);
        breakdown.push_back({"wfeat", wfeat->val.v[0]});
    }

    // (iii) head fine-tuning over {x, x_hat} with detached features
    if (!opt.no_ft) {
        std::vector<int> y_all(batch.real_y);
        ad::Var feats_all = feats_real;
        if (batch.has_synth()) {
            feats_all = ad::concat_rows(feats_real, feats_synth);
            y_all.insert(y_all.end(), batch.synth_y.begin(), batch.synth_y.end());
        }
        auto bw = task_balance_weights(static_cast<int>(batch.real_y.size()),
                                       static_cast<int>(batch.synth_y.size()), cur_classes,
                                       past_classes, opt.balancing);
        auto ft = ft_from_feats(student, ad::detach(feats_all), y_all, bw);
        terms.push_back(ft);
        weights.push_back(w.lambda_ft);
        breakdown.push_back({"ft_ce", ft->val.v[0]});
    }

    OursResult out;
    out.total = ad::weighted_sum(terms, weights);
    out.terms = std::move(breakdown);
    out.terms.push_back({"total", out.total->val.v[0]});
    return out;
}

LwfDiResult lwf_di_objective(model::IncrementalClassifier& student,
                             const model::ModelSnapshot& teacher, const MixedBatch& batch,
                             double temperature, double kd_weight) {
    const int n = student.num_tasks() - 1;
    // Real and synthetic data share one forward pass (and one set of batch
    // statistics), as in the distillation baseline this reproduces.
    ad::Var x;
    if (batch.has_synth()) {
        x = ad::concat_rows(ad::constant(batch.real_x), ad::constant(batch.synth_x));
    } else {
        x = ad::constant(batch.real_x);
    }
    auto feats = student.features(x, true);
    auto logits = student.logits_over_tasks(feats, 0, n);
    const int n_real = static_cast<int>(batch.real_y.size());

    auto logits_real = batch.has_synth() ? ad::slice_rows(logits, 0, n_real) : logits;
    auto local = map_labels_to_span(student, batch.real_y, 0, n);
    auto ce = ad::nll_rows(ad::log_softmax_rows(logits_real), local, {});

    Tensor probs_real =
        model::padded_teacher_probs(teacher, batch.real_x, student.num_classes(), temperature);
    auto kd_real = kd_di_from_logits(logits_real, probs_real, temperature);

    std::vector<ad::Var> terms = {ce, kd_real};
    std::vector<double> weights = {1.0, kd_weight};
    Breakdown breakdown = {{"ce", ce->val.v[0]}, {"kd_real", kd_real->val.v[0]}};

    if (batch.has_synth()) {
        auto logits_synth = ad::slice_rows(logits, n_real, batch.total());
        Tensor probs_synth =
            model::padded_teacher_probs(teacher, batch.synth_x, student.num_classes(), temperature);
        auto kd_synth = kd_di_from_logits(logits_synth, probs_synth, temperature);
        terms.push_back(kd_synth);
        weights.push_back(kd_weight);
        breakdown.push_back({"kd_synth", kd_synth->val.v[0]});
    }

    LwfDiResult out;
    out.total = ad::weighted_sum(terms, weights);
    out.terms = std::move(breakdown);
    out.terms.push_back({"total", out.total->val.v[0]});
    return out;
}

}  // namespace dfcil::losses
