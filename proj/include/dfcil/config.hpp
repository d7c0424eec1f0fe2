#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "dfcil/trainer.hpp"

namespace dfcil::config {

// Flat `key = value` text with dotted namespaces; '#' starts a comment.
// Parsing tracks consumed keys so unknown ones can be rejected.
class KeyValues {
public:
    static KeyValues parse_file(const std::string& path);
    static KeyValues parse_string(const std::string& text);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;
    std::vector<uint64_t> get_u64_list(const std::string& key,
                                       std::vector<uint64_t> fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    std::vector<std::string> unconsumed() const;
    std::string canonical_text() const;  // sorted keys, one per line

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

struct ExperimentConfig {
    std::string dataset = "toy";  // toy | cifar100
    uint64_t dataset_seed = 1234;
    data::ToyConfig toy;
    std::string data_root;

    int num_tasks = 4;
    trainer::MethodConfig method;
    trainer::OptimSchedule optim;
    model::BackboneKind backbone = model::BackboneKind::small_conv;
    int backbone_width = 0;

    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string omega_mode = "inline";  // inline | none | <path to upper-bound run>
    int log_interval = 10;
    int drift_sample = 200;
    std::string out_dir = "runs/out";

    static ExperimentConfig from_kv(const KeyValues& kv);
    std::string canonical_text() const;
    uint64_t digest() const;
};

// Builds normalized datasets per the config. CIFAR uses per-trial
// normalization frozen at task 1; the toy generator already emits
// normalized pixels.
trainer::ExperimentInputs load_inputs(const ExperimentConfig& cfg);

}  // namespace dfcil::config
