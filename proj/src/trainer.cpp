#include "dfcil/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <set>
#include <stdexcept>

namespace dfcil::trainer {

std::string method_name(Method m) {
    switch (m) {
        case Method::base: return "base";
        case Method::lwf: return "lwf";
        case Method::lwf_synth: return "lwf_synth";
        case Method::deep_inversion: return "deep_inversion";
        case Method::naive_rehearsal: return "naive_rehearsal";
        case Method::lwf_coreset: return "lwf_coreset";
        case Method::ours: return "ours";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    for (Method m : method_order()) {
        if (method_name(m) == name) return m;
    }
    throw data::ConfigError("unknown method: " + name);
}

const std::vector<Method>& method_order() {
    static const std::vector<Method> order = {
        Method::base,            Method::lwf,         Method::lwf_synth, Method::deep_inversion,
        Method::naive_rehearsal, Method::lwf_coreset, Method::ours};
    return order;
}

std::string replay_kind(Method m) {
    if (method_uses_coreset(m)) return "Coreset";
    if (method_uses_synthesis(m)) return "Synthetic";
    return "None";
}

bool method_uses_synthesis(Method m) {
    return m == Method::lwf_synth || m == Method::deep_inversion || m == Method::ours;
}

bool method_uses_coreset(Method m) {
    return m == Method::naive_rehearsal || m == Method::lwf_coreset;
}

bool method_is_data_free(Method m) { return !method_uses_coreset(m); }

bool method_needs_teacher(Method m) {
    return m == Method::lwf || m == Method::lwf_synth || m == Method::deep_inversion ||
           m == Method::lwf_coreset || m == Method::ours;
}

void validate_method_config(const MethodConfig& cfg) {
    if (cfg.method != Method::ours && cfg.ablation.any()) {
        throw data::ConfigError("ablation flags are only valid with method=ours, got method=" +
                                method_name(cfg.method));
    }
    if (cfg.ablation.wfeat_real_only && cfg.ablation.wfeat_synth_only) {
        throw data::ConfigError("conflicting ablation flags: wfeat_real_only and wfeat_synth_only");
    }
    if (cfg.synthesis_backend != "generator" && cfg.synthesis_backend != "direct") {
        throw data::ConfigError("synthesis.backend must be 'generator' or 'direct', got '" +
                                cfg.synthesis_backend + "'");
    }
    if (method_uses_coreset(cfg.method) && cfg.coreset_capacity <= 0) {
        throw data::ConfigError("coreset capacity must be positive for replay methods");
    }
}

losses::OursOptions apply_ablation(const MethodConfig& cfg) {
    if (cfg.method != Method::ours) {
        throw data::ConfigError("apply_ablation: method must be ours");
    }
    if (cfg.ablation.wfeat_real_only && cfg.ablation.wfeat_synth_only) {
        throw data::ConfigError("conflicting ablation flags: wfeat_real_only and wfeat_synth_only");
    }
    losses::OursOptions opt;
    opt.balancing = !cfg.ablation.no_balancing;
    opt.standard_ce = cfg.ablation.standard_ce;
    opt.wfeat_real_only = cfg.ablation.wfeat_real_only;
    opt.wfeat_synth_only = cfg.ablation.wfeat_synth_only;
    opt.no_ft = cfg.ablation.no_ft;
    return opt;
}

void OptimSchedule::validate() const {
    if (epochs <= 0 || batch <= 0 || lr <= 0.0) {
        throw data::ConfigError("optim schedule: epochs, batch and lr must be positive");
    }
    for (size_t i = 0; i < milestones.size(); ++i) {
        if (milestones[i] >= epochs || (i > 0 && milestones[i] <= milestones[i - 1])) {
            throw data::ConfigError(
                "optim schedule: milestones must be strictly increasing and < epochs");
        }
    }
}

double OptimSchedule::lr_at(int epoch) const {
    double out = lr;
    for (int m : milestones) {
        if (epoch >= m) out *= decay;
    }
    return out;
}

namespace {

struct StepObjective {
    ad::Var total;
    losses::Breakdown terms;
};

// Per-batch objective assembly shared by all methods. Task 0 is plain CE
// over the single head for every method (first-task equivalence).
StepObjective build_objective(model::IncrementalClassifier& m,
                              const std::optional<model::ModelSnapshot>& snapshot,
                              const MethodConfig& cfg, int task_idx, const Tensor& x,
                              const std::vector<int>& y, const Tensor* synth_x,
                              const std::vector<int>* synth_y) {
    StepObjective out;
    const int n = m.num_tasks() - 1;
    if (task_idx == 0) {
        auto loss = losses::local_ce_loss(m, x, y);
        out.total = loss;
        out.terms = {{"ce", loss->val.v[0]}, {"total", loss->val.v[0]}};
        return out;
    }
    switch (cfg.method) {
        case Method::base:
        case Method::naive_rehearsal: {
            auto feats = m.features(ad::constant(x), true);
            auto logits = m.logits_over_tasks(feats, 0, n);
            auto local = losses::map_labels_to_span(m, y, 0, n);
            auto loss = ad::nll_rows(ad::log_softmax_rows(logits), local, {});
            out.total = loss;
            out.terms = {{"ce", loss->val.v[0]}, {"total", loss->val.v[0]}};
            return out;
        }
        case Method::lwf:
        case Method::lwf_coreset: {
            // CE and the classic non-padded KD share one forward pass.
            const double T = cfg.objective.kd_temperature;
            auto feats = m.features(ad::constant(x), true);
            auto logits = m.logits_over_tasks(feats, 0, n);
            auto local = losses::map_labels_to_span(m, y, 0, n);
            auto ce = ad::nll_rows(ad::log_softmax_rows(logits), local, {});
            auto logits_old = m.logits_over_tasks(feats, 0, snapshot->num_tasks() - 1);
            Tensor probs = model::padded_teacher_probs(*snapshot, x, snapshot->num_classes(), T);
            auto kd = losses::kd_di_from_logits(logits_old, probs, T);
            out.total = ad::weighted_sum({ce, kd}, {1.0, cfg.lwf_kd_weight});
            out.terms = {{"ce", ce->val.v[0]},
                         {"kd_real", kd->val.v[0]},
                         {"total", out.total->val.v[0]}};
            return out;
        }
        case Method::lwf_synth: {
            // Combined forward over real and synthetic rows (as in the
            // distillation baselines) with classic non-padded KD.
            const double T = cfg.objective.kd_temperature;
            auto xs = ad::concat_rows(ad::constant(x), ad::constant(*synth_x));
            auto feats = m.features(xs, true);
            const int n_real = static_cast<int>(y.size());
            const int n_all = n_real + static_cast<int>(synth_y->size());
            auto logits_all = m.logits_over_tasks(feats, 0, n);
            auto logits_old = m.logits_over_tasks(feats, 0, snapshot->num_tasks() - 1);
            auto local = losses::map_labels_to_span(m, y, 0, n);
            auto ce = ad::nll_rows(ad::log_softmax_rows(ad::slice_rows(logits_all, 0, n_real)),
                                   local, {});
            Tensor probs_real =
                model::padded_teacher_probs(*snapshot, x, snapshot->num_classes(), T);
            Tensor probs_synth =
                model::padded_teacher_probs(*snapshot, *synth_x, snapshot->num_classes(), T);
            auto kd_real =
                losses::kd_di_from_logits(ad::slice_rows(logits_old, 0, n_real), probs_real, T);
            auto kd_synth = losses::kd_di_from_logits(ad::slice_rows(logits_old, n_real, n_all),
                                                      probs_synth, T);
            out.total = ad::weighted_sum({ce, kd_real, kd_synth},
                                         {1.0, cfg.lwf_kd_weight, cfg.lwf_kd_weight});
            out.terms = {{"ce", ce->val.v[0]},
                         {"kd_real", kd_real->val.v[0]},
                         {"kd_synth", kd_synth->val.v[0]},
                         {"total", out.total->val.v[0]}};
            return out;
        }
        case Method::deep_inversion: {
            losses::MixedBatch batch;
            batch.real_x = x;
            batch.real_y = y;
            if (synth_x) {
                batch.synth_x = *synth_x;
                batch.synth_y = *synth_y;
            }
            auto res = losses::lwf_di_objective(m, *snapshot, batch, cfg.objective.kd_temperature,
                                                cfg.lwf_kd_weight);
            out.total = res.total;
            out.terms = std::move(res.terms);
            return out;
        }
        case Method::ours: {
            losses::MixedBatch batch;
            batch.real_x = x;
            batch.real_y = y;
            if (synth_x) {
                batch.synth_x = *synth_x;
                batch.synth_y = *synth_y;
            }
            auto res = losses::ours_objective(m, *snapshot, batch, cfg.objective,
                                              apply_ablation(cfg));
            out.total = res.total;
            out.terms = std::move(res.terms);
            return out;
        }
    }
    throw std::logic_error("build_objective: unhandled method");
}

}  // namespace

void train_task(TrainerState& state, const data::TaskSchedule& schedule,
                const data::LabeledDataset& train, int task_idx, const MethodConfig& mcfg,
                const OptimSchedule& sched, uint64_t trial_seed, data::AccessAudit* audit,
                TaskLog* log, const RunOptions& opts) {
    if (task_idx != state.completed_tasks) {
        throw std::invalid_argument("train_task: tasks must run in order; expected task " +
                                    std::to_string(state.completed_tasks) + ", got " +
                                    std::to_string(task_idx));
    }
    sched.validate();
    const auto& classes = schedule.task(task_idx);

    // (1) snapshot the previous-task model
    if (task_idx > 0 && method_needs_teacher(mcfg.method)) {
        state.snapshot.emplace(state.model);  // replaces (releases) the older snapshot
    }
    // (2) grow heads for the incoming classes
    state.model.grow_heads(classes, mix_seed(trial_seed, 0x6ead, static_cast<uint64_t>(task_idx)));

    // (3) synthesis setup against the frozen teacher
    std::unique_ptr<synthesis::SyntheticSource> source;
    if (task_idx > 0 && method_uses_synthesis(mcfg.method)) {
        if (!state.snapshot) throw std::invalid_argument("train_task: missing teacher snapshot");
        const uint64_t gen_seed = mix_seed(trial_seed, 0x6e2a, static_cast<uint64_t>(task_idx));
        if (mcfg.synthesis_backend == "generator") {
            auto trained = synthesis::train_generator(*state.snapshot, mcfg.inversion,
                                                      mcfg.generator, mcfg.synthesis_steps,
                                                      mcfg.synthesis_batch, gen_seed);
            if (log) log->generator_trace = std::move(trained.loss_trace);
            source = std::make_unique<synthesis::GeneratorSource>(std::move(trained.generator),
                                                                  *state.snapshot);
        } else {
            source = std::make_unique<synthesis::DirectOptSource>(*state.snapshot, mcfg.inversion,
                                                                  mcfg.direct_steps,
                                                                  mcfg.generator.lr);
        }
        if (opts.synth_dump_hook) {
            Rng dump_rng(mix_seed(trial_seed, 0xd06, static_cast<uint64_t>(task_idx)));
            opts.synth_dump_hook(trial_seed, task_idx, source->sample(64, dump_rng).first);
        }
    }

    // (4) epoch loop
    auto task_data = data::task_subset(train, classes);
    data::LabeledDataset train_view = task_data;
    if (task_idx > 0 && method_uses_coreset(mcfg.method)) {
        // Union of current-task data and the stored coreset.
        auto replay = state.coreset.as_dataset(train.num_classes);
        train_view.labels.insert(train_view.labels.end(), replay.labels.begin(),
                                 replay.labels.end());
        train_view.images.insert(train_view.images.end(), replay.images.begin(),
                                 replay.images.end());
    }

    nn::SGD opt(state.model.parameters(), sched.lr, sched.momentum, sched.weight_decay);
    Rng sample_rng(mix_seed(trial_seed, 0x5a3e, static_cast<uint64_t>(task_idx)));
    int step = 0;
    double seconds = 0.0;
    const uint64_t iter_seed = mix_seed(trial_seed, 0xba7c, static_cast<uint64_t>(task_idx));

    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        opt.set_lr(sched.lr_at(epoch));
        data::BatchIterator it(train_view, sched.batch, iter_seed, epoch, true, audit, task_idx);
        Tensor x;
        std::vector<int> y;
        while (it.next(x, y)) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor synth_x;
            std::vector<int> synth_y;
            const bool want_synth = source != nullptr;
            if (want_synth) {
                auto sampled = source->sample(x.dim(0), sample_rng);
                synth_x = std::move(sampled.first);
                synth_y = std::move(sampled.second);
            }
            auto obj = build_objective(state.model, state.snapshot, mcfg, task_idx, x, y,
                                       want_synth ? &synth_x : nullptr,
                                       want_synth ? &synth_y : nullptr);
            opt.zero_grad();
            ad::backward(obj.total);
            opt.step();
            const auto t1 = std::chrono::steady_clock::now();
            seconds += std::chrono::duration<double>(t1 - t0).count();
            if (log && (step % opts.log_interval == 0)) {
                for (const auto& [term, value] : obj.terms) {
                    log->losses.push_back({step, task_idx, term, value});
                }
            }
            ++step;
        }
        if (!opts.quiet) {
            std::cout << "[task " << task_idx << "] epoch " << epoch << " done\n";
        }
    }
    if (log) {
        log->steps += step;
        log->seconds_per_batch = step > 0 ? seconds / step : 0.0;
    }

    // (5) coreset update for replay methods
    if (method_uses_coreset(mcfg.method)) {
        if (state.coreset.capacity == 0) state.coreset.capacity = mcfg.coreset_capacity;
        data::update_coreset(state.coreset, task_data,
                             mix_seed(trial_seed, 0xc02e, static_cast<uint64_t>(task_idx)));
    }

    if (source && opts.source_end_hook) opts.source_end_hook(task_idx, *source);
    // (6) the source (and any generator inside it) is discarded here
    source.reset();
    state.completed_tasks = task_idx + 1;
}

metrics::RunRecord run_single_trial(const ExperimentInputs& in, const MethodConfig& mcfg,
                                    const OptimSchedule& sched, uint64_t seed,
                                    const RunOptions& opts) {
    validate_method_config(mcfg);
    const auto schedule =
        data::build_task_schedule(in.train.num_classes, in.num_tasks, seed);

    // Per-trial pixel normalization, frozen at task 1.
    data::LabeledDataset train_norm, test_norm;
    const data::LabeledDataset* train_p = &in.train;
    const data::LabeledDataset* test_p = &in.test;
    if (in.per_trial_normalization) {
        const auto stats = data::compute_channel_stats(in.train, schedule.task(0));
        train_norm = in.train;
        test_norm = in.test;
        data::normalize_inplace(train_norm, stats);
        data::normalize_inplace(test_norm, stats);
        train_p = &train_norm;
        test_p = &test_norm;
    }
    const data::LabeledDataset& train = *train_p;
    const data::LabeledDataset& test = *test_p;

    model::ModelSnapshot::reset_peak();
    synthesis::SynthesisGenerator::reset_peak();

    TrainerState state;
    model::ImageDims dims{in.train.channels, in.train.height, in.train.width};
    state.model = model::IncrementalClassifier(in.backbone, dims, mix_seed(seed, 0x30d1),
                                               in.backbone_width);
    state.coreset.capacity = mcfg.coreset_capacity;

    data::AccessAudit audit;
    metrics::RunRecord record;
    record.method = method_name(mcfg.method);
    record.trial_seed = seed;

    RunOptions local_opts = opts;
    bool drift_done = false;
    local_opts.source_end_hook = [&](int task_idx, synthesis::SyntheticSource& source) {
        if (opts.source_end_hook) opts.source_end_hook(task_idx, source);
        if (!opts.compute_drift || task_idx != 1 || drift_done) return;
        Rng rng(mix_seed(seed, 0xd21f7));
        auto real1 = data::task_subset(test, schedule.task(0));
        auto real2 = data::task_subset(test, schedule.task(1));
        const int c = std::min<int>({opts.drift_sample, static_cast<int>(real1.count()),
                                     static_cast<int>(real2.count())});
        auto to_tensor = [&](const data::LabeledDataset& ds) {
            Tensor t({c, ds.channels, ds.height, ds.width});
            std::copy_n(ds.images.data(), static_cast<size_t>(c) * ds.image_size(), t.data());
            return t;
        };
        auto [synth, synth_labels] = source.sample(c, rng);
        record.drift = metrics::drift_report(state.model, to_tensor(real1), to_tensor(real2),
                                             synth);
        record.has_drift = true;
        drift_done = true;
    };

    double total_seconds = 0.0;
    long total_steps = 0;
    for (int task = 0; task < in.num_tasks; ++task) {
        TaskLog tlog;
        train_task(state, schedule, train, task, mcfg, sched, seed, &audit, &tlog, local_opts);
        total_seconds += tlog.seconds_per_batch * tlog.steps;
        total_steps += tlog.steps;
        for (auto& e : tlog.losses) record.loss_log.push_back(std::move(e));

        // Accuracy matrix row i: every past task plus cumulative prefixes.
        std::vector<double> row, cum_row;
        double weighted = 0.0;
        long count = 0;
        for (int n = 0; n <= task; ++n) {
            auto subset_classes = schedule.task(n);
            const double acc =
                metrics::task_accuracy(state.model, test, subset_classes, task);
            row.push_back(acc);
            const long subset_count =
                static_cast<long>(data::task_subset(test, subset_classes).count());
            weighted += acc * subset_count;
            count += subset_count;
            cum_row.push_back(weighted / count);
        }
        record.acc.per_task.push_back(std::move(row));
        record.acc.cumulative.push_back(std::move(cum_row));

        if (opts.checkpoint_hook) opts.checkpoint_hook(seed, task, state);
        if (!opts.quiet) {
            std::cout << "[trial " << seed << "] task " << task + 1 << "/" << in.num_tasks
                      << " A_{1:" << task + 1 << "} = " << record.acc.cumulative.back().back()
                      << "\n";
        }
    }
    record.seconds_per_batch = total_steps > 0 ? total_seconds / total_steps : 0.0;
    record.snapshot_peak = model::ModelSnapshot::peak_instances();
    record.generator_peak = synthesis::SynthesisGenerator::peak_instances();
    for (const auto& [task, classes] : audit.table()) {
        std::vector<int> read;
        for (const auto& [c, count] : classes) {
            if (count > 0) read.push_back(c);
        }
        record.train_classes_read[task] = std::move(read);
    }

    // Omega normalization against the offline upper bound.
    std::vector<double> offline;
    if (opts.offline_tables) {
        auto it = opts.offline_tables->find(seed);
        if (it == opts.offline_tables->end()) {
            throw data::ConfigError("no offline table for trial seed " + std::to_string(seed));
        }
        offline = it->second;
    } else if (opts.inline_upper_bound) {
        ExperimentInputs norm_in = in;
        if (in.per_trial_normalization) {
            norm_in.train = train;
            norm_in.test = test;
            norm_in.per_trial_normalization = false;
        }
        offline = train_upper_bound(norm_in, schedule, sched, seed, opts.quiet).offline_prefix;
    }
    if (!offline.empty()) {
        std::vector<int> sizes;
        for (int t = 0; t < in.num_tasks; ++t) {
            sizes.push_back(static_cast<int>(schedule.task(t).size()));
        }
        record.omega = metrics::omega(record.acc, offline, sizes);
        record.has_omega = true;
    }
    return record;
}

std::vector<metrics::RunRecord> run_experiment(const ExperimentInputs& in,
                                               const MethodConfig& mcfg,
                                               const OptimSchedule& sched,
                                               const std::vector<uint64_t>& seeds,
                                               const RunOptions& opts) {
    if (seeds.empty()) throw std::invalid_argument("run_experiment: needs at least one trial");
    std::set<uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size()) {
        throw std::invalid_argument("run_experiment: trial seeds must be distinct");
    }
    std::vector<metrics::RunRecord> records;
    records.reserve(seeds.size());
    for (uint64_t seed : seeds) {
        records.push_back(run_single_trial(in, mcfg, sched, seed, opts));
    }
    return records;
}

UpperBoundResult train_upper_bound(const ExperimentInputs& in, const data::TaskSchedule& schedule,
                                   const OptimSchedule& sched, uint64_t seed, bool quiet) {
    sched.validate();
    if (in.per_trial_normalization) {
        ExperimentInputs norm_in = in;
        const auto stats = data::compute_channel_stats(in.train, schedule.task(0));
        data::normalize_inplace(norm_in.train, stats);
        data::normalize_inplace(norm_in.test, stats);
        norm_in.per_trial_normalization = false;
        return train_upper_bound(norm_in, schedule, sched, seed, quiet);
    }
    model::ImageDims dims{in.train.channels, in.train.height, in.train.width};
    UpperBoundResult out{
        model::IncrementalClassifier(in.backbone, dims, mix_seed(seed, 0x0ff1), in.backbone_width),
        {},
        0.0};
    out.model.grow_heads(schedule.class_order, mix_seed(seed, 0x0ff2));

    nn::SGD opt(out.model.parameters(), sched.lr, sched.momentum, sched.weight_decay);
    const uint64_t iter_seed = mix_seed(seed, 0x0ff3);
    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        opt.set_lr(sched.lr_at(epoch));
        data::BatchIterator it(in.train, sched.batch, iter_seed, epoch, true);
        Tensor x;
        std::vector<int> y;
        while (it.next(x, y)) {
            auto feats = out.model.features(ad::constant(x), true);
            auto logits = out.model.logits_over_tasks(feats, 0, 0);
            auto local = losses::map_labels_to_span(out.model, y, 0, 0);
            auto loss = ad::nll_rows(ad::log_softmax_rows(logits), local, {});
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
        }
        if (!quiet) std::cout << "[upper-bound] epoch " << epoch << " done\n";
    }

    for (int n = 1; n <= in.num_tasks; ++n) {
        out.offline_prefix.push_back(
            metrics::task_accuracy(out.model, in.test, schedule.cumulative(n), 0));
    }
    out.overall_accuracy = out.offline_prefix.back();
    return out;
}

Aggregate aggregate_records(const std::vector<metrics::RunRecord>& records) {
    if (records.empty()) throw std::invalid_argument("aggregate_records: empty");
    Aggregate agg;
    agg.trials = static_cast<int>(records.size());
    agg.has_omega = true;
    double a_sum = 0.0, o_sum = 0.0;
    for (const auto& r : records) {
        a_sum += r.final_accuracy();
        if (!r.has_omega) agg.has_omega = false;
        o_sum += r.omega.omega;
    }
    agg.a_n_mean = a_sum / agg.trials;
    if (agg.has_omega) agg.omega_mean = o_sum / agg.trials;
    double a_var = 0.0, o_var = 0.0;
    for (const auto& r : records) {
        a_var += (r.final_accuracy() - agg.a_n_mean) * (r.final_accuracy() - agg.a_n_mean);
        if (agg.has_omega) {
            o_var += (r.omega.omega - agg.omega_mean) * (r.omega.omega - agg.omega_mean);
        }
    }
    agg.a_n_std = std::sqrt(a_var / agg.trials);  // population std
    if (agg.has_omega) agg.omega_std = std::sqrt(o_var / agg.trials);
    return agg;
}

}  // namespace dfcil::trainer
