#include "dfcil/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dfcil::config {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <class T>
std::vector<T> parse_list(const std::string& text) {
    std::vector<T> out;
    std::istringstream is(text);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        if constexpr (std::is_same_v<T, uint64_t>) {
            out.push_back(std::stoull(tok));
        } else {
            out.push_back(std::stoi(tok));
        }
    }
    return out;
}
}  // namespace

KeyValues KeyValues::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data::ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str());
}

KeyValues KeyValues::parse_string(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw data::ConfigError("config line " + std::to_string(lineno) +
                                    ": expected key = value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw data::ConfigError("config line " + std::to_string(lineno) + ": empty key");
        }
        kv.values_[key] = value;
    }
    return kv;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw data::ConfigError("config key '" + key + "': expected a number, got '" + it->second +
                                "'");
    }
}

int KeyValues::get_int(const std::string& key, int fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw data::ConfigError("config key '" + key + "': expected an integer, got '" +
                                it->second + "'");
    }
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw data::ConfigError("config key '" + key + "': expected true/false, got '" + it->second +
                            "'");
}

std::vector<int> KeyValues::get_int_list(const std::string& key, std::vector<int> fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_list<int>(it->second);
}

std::vector<uint64_t> KeyValues::get_u64_list(const std::string& key,
                                              std::vector<uint64_t> fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_list<uint64_t>(it->second);
}

std::vector<std::string> KeyValues::unconsumed() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
        if (!consumed_.count(k)) out.push_back(k);
    }
    return out;
}

std::string KeyValues::canonical_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValues& kv) {
    ExperimentConfig cfg;
    cfg.dataset = kv.get_string("dataset", cfg.dataset);
    if (cfg.dataset != "toy" && cfg.dataset != "cifar100") {
        throw data::ConfigError("dataset must be 'toy' or 'cifar100', got '" + cfg.dataset + "'");
    }
    cfg.dataset_seed = static_cast<uint64_t>(kv.get_int("dataset.seed", 1234));
    cfg.toy.classes = kv.get_int("toy.classes", cfg.toy.classes);
    cfg.toy.train_per_class = kv.get_int("toy.train_per_class", cfg.toy.train_per_class);
    cfg.toy.test_per_class = kv.get_int("toy.test_per_class", cfg.toy.test_per_class);
    cfg.toy.image = kv.get_int("toy.image", cfg.toy.image);
    cfg.toy.noise = kv.get_double("toy.noise", cfg.toy.noise);
    cfg.data_root = kv.get_string("data_root", "");
    if (cfg.data_root.empty()) {
        const char* env = std::getenv("DFCIL_DATA_ROOT");
        if (env) cfg.data_root = env;
    }

    cfg.num_tasks = kv.get_int("tasks", cfg.num_tasks);

    auto& m = cfg.method;
    m.method = trainer::method_from_name(kv.get_string("method", "ours"));
    m.ablation.no_balancing = kv.get_bool("ablation.no_balancing", false);
    m.ablation.standard_ce = kv.get_bool("ablation.standard_ce", false);
    m.ablation.wfeat_real_only = kv.get_bool("ablation.wfeat_real_only", false);
    m.ablation.wfeat_synth_only = kv.get_bool("ablation.wfeat_synth_only", false);
    m.ablation.no_ft = kv.get_bool("ablation.no_ft", false);
    m.objective.lambda_kd = kv.get_double("objective.kd", m.objective.lambda_kd);
    m.objective.lambda_ft = kv.get_double("objective.ft", m.objective.lambda_ft);
    m.objective.kd_temperature = kv.get_double("objective.kd_temperature", 2.0);
    m.inversion.con = kv.get_double("inversion.con", m.inversion.con);
    m.inversion.div = kv.get_double("inversion.div", m.inversion.div);
    m.inversion.stat = kv.get_double("inversion.stat", m.inversion.stat);
    m.inversion.prior = kv.get_double("inversion.prior", m.inversion.prior);
    m.inversion.temp = kv.get_double("inversion.temp", m.inversion.temp);
    m.generator.z_dim = kv.get_int("synthesis.z_dim", m.generator.z_dim);
    m.generator.base_channels = kv.get_int("synthesis.base_channels", m.generator.base_channels);
    m.generator.output_scale = kv.get_double("synthesis.output_scale", m.generator.output_scale);
    m.generator.lr = kv.get_double("synthesis.lr", m.generator.lr);
    m.synthesis_steps = kv.get_int("synthesis.steps", m.synthesis_steps);
    m.synthesis_batch = kv.get_int("synthesis.batch", m.synthesis_batch);
    m.synthesis_backend = kv.get_string("synthesis.backend", m.synthesis_backend);
    m.direct_steps = kv.get_int("synthesis.direct_steps", m.direct_steps);
    m.lwf_kd_weight = kv.get_double("lwf.kd_weight", m.lwf_kd_weight);
    m.coreset_capacity = kv.get_int("coreset.capacity", m.coreset_capacity);

    // Synthesis/coreset keys are only meaningful for methods that use them.
    static const char* synth_keys[] = {"inversion.con",       "inversion.div",
                                       "inversion.stat",      "inversion.prior",
                                       "inversion.temp",      "synthesis.z_dim",
                                       "synthesis.base_channels", "synthesis.output_scale",
                                       "synthesis.lr",        "synthesis.steps",
                                       "synthesis.batch",     "synthesis.backend",
                                       "synthesis.direct_steps"};
    if (!trainer::method_uses_synthesis(m.method)) {
        for (const char* k : synth_keys) {
            if (kv.has(k)) {
                throw data::ConfigError(std::string("config key '") + k +
                                        "' requires a synthesis method, but method=" +
                                        trainer::method_name(m.method));
            }
        }
    }
    if (!trainer::method_uses_coreset(m.method) && kv.has("coreset.capacity")) {
        throw data::ConfigError("config key 'coreset.capacity' requires a replay method, "
                                "but method=" +
                                trainer::method_name(m.method));
    }

    cfg.optim.epochs = kv.get_int("optim.epochs", cfg.optim.epochs);
    cfg.optim.lr = kv.get_double("optim.lr", cfg.optim.lr);
    cfg.optim.milestones = kv.get_int_list("optim.milestones", cfg.optim.milestones);
    cfg.optim.decay = kv.get_double("optim.decay", cfg.optim.decay);
    cfg.optim.weight_decay = kv.get_double("optim.weight_decay", cfg.optim.weight_decay);
    cfg.optim.momentum = kv.get_double("optim.momentum", cfg.optim.momentum);
    cfg.optim.batch = kv.get_int("optim.batch", cfg.optim.batch);

    cfg.backbone = model::backbone_from_name(
        kv.get_string("model.backbone", cfg.dataset == "cifar100" ? "resnet32" : "small_conv"));
    cfg.backbone_width = kv.get_int("model.width", 0);

    cfg.seeds = kv.get_u64_list("seeds", cfg.seeds);
    const int trials = kv.get_int("trials", static_cast<int>(cfg.seeds.size()));
    if (trials < 1) throw data::ConfigError("trials must be >= 1");
    if (kv.has("trials") && !kv.has("seeds")) {
        cfg.seeds.clear();
        for (int i = 0; i < trials; ++i) cfg.seeds.push_back(static_cast<uint64_t>(i + 1));
    } else if (trials != static_cast<int>(cfg.seeds.size())) {
        throw data::ConfigError("trials (" + std::to_string(trials) +
                                ") does not match the seed list length (" +
                                std::to_string(cfg.seeds.size()) + ")");
    }

    cfg.omega_mode = kv.get_string("omega.upper_bound", cfg.omega_mode);
    cfg.log_interval = kv.get_int("log.interval", cfg.log_interval);
    cfg.drift_sample = kv.get_int("drift.sample", cfg.drift_sample);
    cfg.out_dir = kv.get_string("out", cfg.out_dir);

    const auto unknown = kv.unconsumed();
    if (!unknown.empty()) {
        std::string msg = "unknown config keys:";
        for (const auto& k : unknown) msg += " '" + k + "'";
        throw data::ConfigError(msg);
    }

    trainer::validate_method_config(cfg.method);
    cfg.optim.validate();
    if (cfg.dataset == "toy" && cfg.toy.classes % cfg.num_tasks != 0) {
        throw data::ConfigError("toy.classes must be divisible by tasks");
    }
    return cfg;
}

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream os;
    os << "dataset = " << dataset << "\n";
    os << "dataset.seed = " << dataset_seed << "\n";
    if (dataset == "toy") {
        os << "toy.classes = " << toy.classes << "\n";
        os << "toy.train_per_class = " << toy.train_per_class << "\n";
        os << "toy.test_per_class = " << toy.test_per_class << "\n";
        os << "toy.image = " << toy.image << "\n";
        os << "toy.noise = " << toy.noise << "\n";
    } else {
        os << "data_root = " << data_root << "\n";
    }
    os << "tasks = " << num_tasks << "\n";
    os << "method = " << trainer::method_name(method.method) << "\n";
    if (method.ablation.no_balancing) os << "ablation.no_balancing = true\n";
    if (method.ablation.standard_ce) os << "ablation.standard_ce = true\n";
    if (method.ablation.wfeat_real_only) os << "ablation.wfeat_real_only = true\n";
    if (method.ablation.wfeat_synth_only) os << "ablation.wfeat_synth_only = true\n";
    if (method.ablation.no_ft) os << "ablation.no_ft = true\n";
    os << "objective.kd = " << method.objective.lambda_kd << "\n";
    os << "objective.ft = " << method.objective.lambda_ft << "\n";
    os << "objective.kd_temperature = " << method.objective.kd_temperature << "\n";
    if (trainer::method_uses_synthesis(method.method)) {
        os << "inversion.con = " << method.inversion.con << "\n";
        os << "inversion.div = " << method.inversion.div << "\n";
        os << "inversion.stat = " << method.inversion.stat << "\n";
        os << "inversion.prior = " << method.inversion.prior << "\n";
        os << "inversion.temp = " << method.inversion.temp << "\n";
        os << "synthesis.z_dim = " << method.generator.z_dim << "\n";
        os << "synthesis.base_channels = " << method.generator.base_channels << "\n";
        os << "synthesis.output_scale = " << method.generator.output_scale << "\n";
        os << "synthesis.lr = " << method.generator.lr << "\n";
        os << "synthesis.steps = " << method.synthesis_steps << "\n";
        os << "synthesis.batch = " << method.synthesis_batch << "\n";
        os << "synthesis.backend = " << method.synthesis_backend << "\n";
        os << "synthesis.direct_steps = " << method.direct_steps << "\n";
    }
    os << "lwf.kd_weight = " << method.lwf_kd_weight << "\n";
    if (trainer::method_uses_coreset(method.method)) {
        os << "coreset.capacity = " << method.coreset_capacity << "\n";
    }
    os << "optim.epochs = " << optim.epochs << "\n";
    os << "optim.lr = " << optim.lr << "\n";
    os << "optim.milestones = ";
    for (size_t i = 0; i < optim.milestones.size(); ++i) {
        os << (i ? "," : "") << optim.milestones[i];
    }
    os << "\n";
    os << "optim.decay = " << optim.decay << "\n";
    os << "optim.weight_decay = " << optim.weight_decay << "\n";
    os << "optim.momentum = " << optim.momentum << "\n";
    os << "optim.batch = " << optim.batch << "\n";
    os << "model.backbone = " << model::backbone_name(backbone) << "\n";
    os << "model.width = " << backbone_width << "\n";
    os << "trials = " << seeds.size() << "\n";
    os << "seeds = ";
    for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    os << "\n";
    os << "omega.upper_bound = " << omega_mode << "\n";
    os << "log.interval = " << log_interval << "\n";
    os << "drift.sample = " << drift_sample << "\n";
    os << "out = " << out_dir << "\n";
    return os.str();
}

uint64_t ExperimentConfig::digest() const {
    // The output directory is where results land, not what they are; two
    // runs differing only in it must produce identical metric artifacts.
    ExperimentConfig keyed = *this;
    keyed.out_dir = "";
    const std::string text = keyed.canonical_text();
    return fnv1a(text.data(), text.size());
}

trainer::ExperimentInputs load_inputs(const ExperimentConfig& cfg) {
    trainer::ExperimentInputs in;
    in.num_tasks = cfg.num_tasks;
    in.backbone = cfg.backbone;
    in.backbone_width = cfg.backbone_width;
    if (cfg.dataset == "toy") {
        in.train = data::make_toy_dataset(cfg.toy, data::Split::train, cfg.dataset_seed);
        in.test = data::make_toy_dataset(cfg.toy, data::Split::test, cfg.dataset_seed);
        in.per_trial_normalization = false;
    } else {
        if (cfg.data_root.empty()) {
            throw data::ConfigError(
                "cifar100 requires data_root (config key or DFCIL_DATA_ROOT)");
        }
        in.train = data::load_cifar100(cfg.data_root, data::Split::train);
        in.test = data::load_cifar100(cfg.data_root, data::Split::test);
        in.per_trial_normalization = true;
    }
    if (in.train.num_classes % cfg.num_tasks != 0) {
        throw data::ConfigError("num classes " + std::to_string(in.train.num_classes) +
                                " not divisible by tasks " + std::to_string(cfg.num_tasks));
    }
    return in;
}

}  // namespace dfcil::config
