#include "dfcil/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace dfcil::model {

std::string backbone_name(BackboneKind k) {
    switch (k) {
        case BackboneKind::tiny_mlp: return "tiny_mlp";
        case BackboneKind::small_conv: return "small_conv";
        case BackboneKind::resnet32: return "resnet32";
    }
    return "?";
}

BackboneKind backbone_from_name(const std::string& name) {
    if (name == "tiny_mlp") return BackboneKind::tiny_mlp;
    if (name == "small_conv") return BackboneKind::small_conv;
    if (name == "resnet32") return BackboneKind::resnet32;
    throw std::invalid_argument("unknown backbone: " + name);
}

namespace {

void check_input(const ad::Var& x, const ImageDims& d, const char* who) {
    if (x->val.ndim() != 4 || x->val.dim(1) != d.channels || x->val.dim(2) != d.height ||
        x->val.dim(3) != d.width) {
        throw std::invalid_argument(std::string(who) + ": expected [B," +
                                    std::to_string(d.channels) + "," + std::to_string(d.height) +
                                    "," + std::to_string(d.width) + "], given " +
                                    x->val.shape_str());
    }
}

// Two-layer MLP without normalization layers. Used by the gradient suite
// (feature dim <= 8) and as the error path for stat extraction.
class TinyMlp final : public Backbone {
public:
    TinyMlp(ImageDims dims, uint64_t seed, int width) : dims_(dims), width_(width ? width : 16) {
        Rng rng(mix_seed(seed, 0x3177u));
        const int in = dims.channels * dims.height * dims.width;
        fc1_ = nn::Linear(in, width_, rng);
        fc2_ = nn::Linear(width_, 8, rng);
    }

    ad::Var forward(const ad::Var& x, bool, bool, nn::BnCapture*) override {
        check_input(x, dims_, "features");
        const int B = x->val.dim(0);
        auto flat = ad::reshape(x, {B, dims_.channels * dims_.height * dims_.width});
        return ad::tanh_op(fc2_.forward(ad::tanh_op(fc1_.forward(flat))));
    }

    int feature_dim() const override { return 8; }
    ImageDims input_dims() const override { return dims_; }
    BackboneKind kind() const override { return BackboneKind::tiny_mlp; }
    int width_hint() const override { return width_; }

    void tensors(std::vector<nn::NamedTensor>& out) override {
        fc1_.tensors("backbone.fc1", out);
        fc2_.tensors("backbone.fc2", out);
    }
    void params(std::vector<ad::Var>& out) const override {
        fc1_.params(out);
        fc2_.params(out);
    }
    std::vector<nn::BatchNorm2d*> bn_layers() override { return {}; }

    std::unique_ptr<Backbone> clone() const override {
        auto c = std::make_unique<TinyMlp>(*this);
        c->fc1_ = fc1_.clone();
        c->fc2_ = fc2_.clone();
        return c;
    }
    void set_frozen() override {
        fc1_.set_frozen();
        fc2_.set_frozen();
    }

private:
    ImageDims dims_;
    int width_;
    nn::Linear fc1_, fc2_;
};

// Four convolutions with batch norm, for toy and test runs.
class SmallConvNet final : public Backbone {
public:
    SmallConvNet(ImageDims dims, uint64_t seed, int width) : dims_(dims), c0_(width ? width : 8) {
        Rng rng(mix_seed(seed, 0x5c0cu));
        conv_[0] = nn::Conv2d(dims.channels, c0_, 3, 1, 1, rng, false);
        conv_[1] = nn::Conv2d(c0_, 2 * c0_, 3, 2, 1, rng, false);
        conv_[2] = nn::Conv2d(2 * c0_, 4 * c0_, 3, 2, 1, rng, false);
        conv_[3] = nn::Conv2d(4 * c0_, 4 * c0_, 3, 1, 1, rng, false);
        bn_[0] = nn::BatchNorm2d(c0_);
        bn_[1] = nn::BatchNorm2d(2 * c0_);
        bn_[2] = nn::BatchNorm2d(4 * c0_);
        bn_[3] = nn::BatchNorm2d(4 * c0_);
    }

    ad::Var forward(const ad::Var& x, bool use_batch, bool update, nn::BnCapture* cap) override {
        check_input(x, dims_, "features");
        ad::Var h = x;
        for (int i = 0; i < 4; ++i) {
            // Leaky activations keep every pooled feature dimension alive,
            // which the reference-normalized drift metric depends on.
            h = ad::leaky_relu(bn_[i].forward(conv_[i].forward(h), use_batch, update, cap), 0.01);
        }
        return ad::global_avg_pool(h);
    }

    int feature_dim() const override { return 4 * c0_; }
    ImageDims input_dims() const override { return dims_; }
    BackboneKind kind() const override { return BackboneKind::small_conv; }
    int width_hint() const override { return c0_; }

    void tensors(std::vector<nn::NamedTensor>& out) override {
        for (int i = 0; i < 4; ++i) {
            conv_[i].tensors("backbone.conv" + std::to_string(i), out);
            bn_[i].tensors("backbone.bn" + std::to_string(i), out);
        }
    }
    void params(std::vector<ad::Var>& out) const override {
        for (int i = 0; i < 4; ++i) {
            conv_[i].params(out);
            bn_[i].params(out);
        }
    }
    std::vector<nn::BatchNorm2d*> bn_layers() override {
        return {&bn_[0], &bn_[1], &bn_[2], &bn_[3]};
    }

    std::unique_ptr<Backbone> clone() const override {
        auto c = std::make_unique<SmallConvNet>(*this);
        for (int i = 0; i < 4; ++i) {
            c->conv_[i] = conv_[i].clone();
            c->bn_[i] = bn_[i].clone();
        }
        return c;
    }
    void set_frozen() override {
        for (int i = 0; i < 4; ++i) {
            conv_[i].set_frozen();
            bn_[i].set_frozen();
        }
    }

private:
    ImageDims dims_;
    int c0_;
    nn::Conv2d conv_[4];
    nn::BatchNorm2d bn_[4];
};

// Standard CIFAR-scale residual network: 3 stages of 5 basic blocks (6n+2
// with n=5), projection shortcuts on downsampling.
class ResNet32 final : public Backbone {
public:
    struct Block {
        nn::Conv2d conv1, conv2, proj;
        nn::BatchNorm2d bn1, bn2, bn_proj;
        bool has_proj = false;
    };

    ResNet32(ImageDims dims, uint64_t seed) : dims_(dims) {
        Rng rng(mix_seed(seed, 0x2e57u));
        stem_ = nn::Conv2d(dims.channels, 16, 3, 1, 1, rng, false);
        stem_bn_ = nn::BatchNorm2d(16);
        const int widths[3] = {16, 32, 64};
        int in = 16;
        for (int s = 0; s < 3; ++s) {
            for (int b = 0; b < 5; ++b) {
                Block blk;
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                blk.conv1 = nn::Conv2d(in, widths[s], 3, stride, 1, rng, false);
                blk.bn1 = nn::BatchNorm2d(widths[s]);
                blk.conv2 = nn::Conv2d(widths[s], widths[s], 3, 1, 1, rng, false);
                blk.bn2 = nn::BatchNorm2d(widths[s]);
                if (stride != 1 || in != widths[s]) {
                    blk.proj = nn::Conv2d(in, widths[s], 1, stride, 0, rng, false);
                    blk.bn_proj = nn::BatchNorm2d(widths[s]);
                    blk.has_proj = true;
                }
                blocks_.push_back(std::move(blk));
                in = widths[s];
            }
        }
    }

    ad::Var forward(const ad::Var& x, bool use_batch, bool update, nn::BnCapture* cap) override {
        check_input(x, dims_, "features");
        ad::Var h = ad::relu(stem_bn_.forward(stem_.forward(x), use_batch, update, cap));
        for (auto& blk : blocks_) {
            ad::Var out = ad::relu(blk.bn1.forward(blk.conv1.forward(h), use_batch, update, cap));
            out = blk.bn2.forward(blk.conv2.forward(out), use_batch, update, cap);
            ad::Var skip = blk.has_proj
                               ? blk.bn_proj.forward(blk.proj.forward(h), use_batch, update, cap)
                               : h;
            h = ad::relu(ad::add(out, skip));
        }
        return ad::global_avg_pool(h);
    }

    int feature_dim() const override { return 64; }
    ImageDims input_dims() const override { return dims_; }
    BackboneKind kind() const override { return BackboneKind::resnet32; }
    int width_hint() const override { return 16; }

    void tensors(std::vector<nn::NamedTensor>& out) override {
        stem_.tensors("backbone.stem", out);
        stem_bn_.tensors("backbone.stem_bn", out);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "backbone.block" + std::to_string(i);
            blocks_[i].conv1.tensors(p + ".conv1", out);
            blocks_[i].bn1.tensors(p + ".bn1", out);
            blocks_[i].conv2.tensors(p + ".conv2", out);
            blocks_[i].bn2.tensors(p + ".bn2", out);
            if (blocks_[i].has_proj) {
                blocks_[i].proj.tensors(p + ".proj", out);
                blocks_[i].bn_proj.tensors(p + ".bn_proj", out);
            }
        }
    }
    void params(std::vector<ad::Var>& out) const override {
        stem_.params(out);
        stem_bn_.params(out);
        for (const auto& blk : blocks_) {
            blk.conv1.params(out);
            blk.bn1.params(out);
            blk.conv2.params(out);
            blk.bn2.params(out);
            if (blk.has_proj) {
                blk.proj.params(out);
                blk.bn_proj.params(out);
            }
        }
    }
    std::vector<nn::BatchNorm2d*> bn_layers() override {
        std::vector<nn::BatchNorm2d*> out = {&stem_bn_};
        for (auto& blk : blocks_) {
            out.push_back(&blk.bn1);
            out.push_back(&blk.bn2);
            if (blk.has_proj) out.push_back(&blk.bn_proj);
        }
        return out;
    }

    std::unique_ptr<Backbone> clone() const override {
        auto c = std::make_unique<ResNet32>(*this);
        c->stem_ = stem_.clone();
        c->stem_bn_ = stem_bn_.clone();
        for (size_t i = 0; i < blocks_.size(); ++i) {
            c->blocks_[i].conv1 = blocks_[i].conv1.clone();
            c->blocks_[i].bn1 = blocks_[i].bn1.clone();
            c->blocks_[i].conv2 = blocks_[i].conv2.clone();
            c->blocks_[i].bn2 = blocks_[i].bn2.clone();
            if (blocks_[i].has_proj) {
                c->blocks_[i].proj = blocks_[i].proj.clone();
                c->blocks_[i].bn_proj = blocks_[i].bn_proj.clone();
            }
        }
        return c;
    }
    void set_frozen() override {
        stem_.set_frozen();
        stem_bn_.set_frozen();
        for (auto& blk : blocks_) {
            blk.conv1.set_frozen();
            blk.bn1.set_frozen();
            blk.conv2.set_frozen();
            blk.bn2.set_frozen();
            if (blk.has_proj) {
                blk.proj.set_frozen();
                blk.bn_proj.set_frozen();
            }
        }
    }

private:
    ImageDims dims_;
    nn::Conv2d stem_;
    nn::BatchNorm2d stem_bn_;
    std::vector<Block> blocks_;
};

}  // namespace

std::unique_ptr<Backbone> make_backbone(BackboneKind kind, ImageDims dims, uint64_t seed,
                                        int width) {
    switch (kind) {
        case BackboneKind::tiny_mlp: return std::make_unique<TinyMlp>(dims, seed, width);
        case BackboneKind::small_conv: return std::make_unique<SmallConvNet>(dims, seed, width);
        case BackboneKind::resnet32: return std::make_unique<ResNet32>(dims, seed);
    }
    throw std::invalid_argument("make_backbone: bad kind");
}

IncrementalClassifier::IncrementalClassifier(BackboneKind kind, ImageDims dims, uint64_t seed,
                                             int width)
    : backbone_(make_backbone(kind, dims, seed, width)) {}

ad::Var IncrementalClassifier::features(const ad::Var& x, bool training, nn::BnCapture* cap) {
    return backbone_->forward(x, training, training, cap);
}

ad::Var IncrementalClassifier::features_batchstats(const ad::Var& x, nn::BnCapture* cap) {
    return backbone_->forward(x, true, false, cap);
}

Tensor IncrementalClassifier::features_eval(const Tensor& x) {
    return backbone_->forward(ad::constant(x), false, false, nullptr)->val;
}

void IncrementalClassifier::check_task_range(int first_task, int last_task) const {
    if (first_task < 0 || last_task >= num_tasks() || first_task > last_task) {
        throw std::invalid_argument("task range [" + std::to_string(first_task) + "," +
                                    std::to_string(last_task) + "] invalid for model with " +
                                    std::to_string(num_tasks()) + " tasks");
    }
}

ad::Var IncrementalClassifier::logits_over_tasks(const ad::Var& feats, int first_task,
                                                 int last_task) const {
    check_task_range(first_task, last_task);
    std::vector<ad::Var> parts;
    for (int t = first_task; t <= last_task; ++t) {
        parts.push_back(heads_[static_cast<size_t>(t)].forward(feats));
    }
    return parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
}

Tensor IncrementalClassifier::logits_eval(const Tensor& x, int first_task, int last_task) {
    auto feats = backbone_->forward(ad::constant(x), false, false, nullptr);
    return logits_over_tasks(feats, first_task, last_task)->val;
}

void IncrementalClassifier::grow_heads(const std::vector<int>& new_classes, uint64_t seed) {
    if (new_classes.empty()) throw std::invalid_argument("grow_heads: empty class set");
    for (int c : new_classes) {
        if (std::find(registry_.begin(), registry_.end(), c) != registry_.end()) {
            throw std::invalid_argument("grow_heads: class " + std::to_string(c) +
                                        " already registered");
        }
    }
    Rng rng(mix_seed(seed, 0x6ead5u, static_cast<uint64_t>(num_tasks())));
    heads_.emplace_back(backbone_->feature_dim(), static_cast<int>(new_classes.size()), rng);
    head_classes_.push_back(new_classes);
    registry_.insert(registry_.end(), new_classes.begin(), new_classes.end());
}

int IncrementalClassifier::head_width(int first_task, int last_task) const {
    check_task_range(first_task, last_task);
    int w = 0;
    for (int t = first_task; t <= last_task; ++t) {
        w += static_cast<int>(head_classes_[static_cast<size_t>(t)].size());
    }
    return w;
}

int IncrementalClassifier::local_index(int class_id, int first_task, int last_task) const {
    check_task_range(first_task, last_task);
    int idx = 0;
    for (int t = first_task; t <= last_task; ++t) {
        for (int c : head_classes_[static_cast<size_t>(t)]) {
            if (c == class_id) return idx;
            ++idx;
        }
    }
    return -1;
}

Tensor IncrementalClassifier::heads_weight_matrix(int first_task, int last_task) const {
    check_task_range(first_task, last_task);
    const int D = backbone_->feature_dim();
    const int K = head_width(first_task, last_task);
    Tensor W({K, D});
    int row = 0;
    for (int t = first_task; t <= last_task; ++t) {
        const auto& h = heads_[static_cast<size_t>(t)];
        std::copy(h.weight->val.v.begin(), h.weight->val.v.end(),
                  W.v.begin() + static_cast<size_t>(row) * D);
        row += h.out;
    }
    return W;
}

std::vector<ad::Var> IncrementalClassifier::parameters() const {
    std::vector<ad::Var> out;
    backbone_->params(out);
    for (const auto& h : heads_) h.params(out);
    return out;
}

std::vector<ad::Var> IncrementalClassifier::backbone_parameters() const {
    std::vector<ad::Var> out;
    backbone_->params(out);
    return out;
}

std::vector<ad::Var> IncrementalClassifier::head_parameters(int first_task, int last_task) const {
    check_task_range(first_task, last_task);
    std::vector<ad::Var> out;
    for (int t = first_task; t <= last_task; ++t) heads_[static_cast<size_t>(t)].params(out);
    return out;
}

void IncrementalClassifier::tensors(std::vector<nn::NamedTensor>& out) {
    backbone_->tensors(out);
    for (size_t t = 0; t < heads_.size(); ++t) {
        heads_[t].tensors("head" + std::to_string(t), out);
    }
}

uint64_t IncrementalClassifier::state_hash() const {
    std::vector<nn::NamedTensor> named;
    const_cast<IncrementalClassifier*>(this)->tensors(named);
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& nt : named) {
        h = fnv1a(nt.name.data(), nt.name.size(), h);
        h = fnv1a(nt.tensor->v.data(), nt.tensor->v.size() * sizeof(double), h);
    }
    return h;
}

BatchNormStats IncrementalClassifier::extract_bn_stats() const {
    auto layers = const_cast<IncrementalClassifier*>(this)->backbone_->bn_layers();
    if (layers.empty()) {
        throw std::invalid_argument(
            "extract_bn_stats: model has no normalization layers (synthesis requires them)");
    }
    BatchNormStats out;
    for (auto* bn : layers) {
        BatchNormStats::Layer l;
        l.mean = bn->running_mean.v;
        l.std.resize(bn->running_var.v.size());
        for (size_t i = 0; i < l.std.size(); ++i) l.std[i] = std::sqrt(bn->running_var.v[i]);
        out.layers.push_back(std::move(l));
    }
    return out;
}

IncrementalClassifier IncrementalClassifier::clone() const {
    IncrementalClassifier c;
    c.backbone_ = backbone_->clone();
    c.heads_.reserve(heads_.size());
    for (const auto& h : heads_) c.heads_.push_back(h.clone());
    c.head_classes_ = head_classes_;
    c.registry_ = registry_;
    return c;
}

void IncrementalClassifier::set_frozen() {
    backbone_->set_frozen();
    for (auto& h : heads_) h.set_frozen();
}

namespace {
std::atomic<int> g_snapshot_live{0};
std::atomic<int> g_snapshot_peak{0};

void snapshot_inc() {
    const int n = ++g_snapshot_live;
    int peak = g_snapshot_peak.load();
    while (n > peak && !g_snapshot_peak.compare_exchange_weak(peak, n)) {
    }
}
}  // namespace

ModelSnapshot::ModelSnapshot(const IncrementalClassifier& live) : model_(live.clone()) {
    model_.set_frozen();
    snapshot_inc();
}

ModelSnapshot::ModelSnapshot(const ModelSnapshot& o) : model_(o.model_.clone()) {
    model_.set_frozen();
    snapshot_inc();
}

ModelSnapshot::ModelSnapshot(ModelSnapshot&& o) noexcept : model_(std::move(o.model_)) {
    counted_ = o.counted_;
    o.counted_ = false;
}

ModelSnapshot::~ModelSnapshot() {
    if (counted_) --g_snapshot_live;
}

int ModelSnapshot::live_instances() { return g_snapshot_live.load(); }
int ModelSnapshot::peak_instances() { return g_snapshot_peak.load(); }
void ModelSnapshot::reset_peak() { g_snapshot_peak.store(g_snapshot_live.load()); }

ad::Var ModelSnapshot::features(const ad::Var& x, nn::BnCapture* cap) const {
    // Inference-mode normalization, no state writes; const_cast is safe.
    return const_cast<IncrementalClassifier&>(model_).features(x, false, cap) ;
}

Tensor ModelSnapshot::features_eval(const Tensor& x) const {
    return const_cast<IncrementalClassifier&>(model_).features_eval(x);
}

ad::Var ModelSnapshot::logits(const ad::Var& x, nn::BnCapture* cap) const {
    auto feats = features(x, cap);
    return model_.logits_over_tasks(feats, 0, model_.num_tasks() - 1);
}

Tensor ModelSnapshot::logits_eval(const Tensor& x) const {
    return const_cast<IncrementalClassifier&>(model_).logits_eval(x, 0, model_.num_tasks() - 1);
}

Tensor ModelSnapshot::past_head_weights() const {
    return model_.heads_weight_matrix(0, model_.num_tasks() - 1);
}

Tensor padded_teacher_probs(const ModelSnapshot& snapshot, const Tensor& x, int total_classes,
                            double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("padded_teacher_probs: temperature must be positive, got " +
                                    std::to_string(temperature));
    }
    if (total_classes < snapshot.num_classes()) {
        throw std::invalid_argument("padded_teacher_probs: total_classes " +
                                    std::to_string(total_classes) + " < snapshot classes " +
                                    std::to_string(snapshot.num_classes()));
    }
    Tensor logits = snapshot.logits_eval(x);
    const int B = logits.dim(0), K = logits.dim(1);
    Tensor probs({B, total_classes});
    for (int r = 0; r < B; ++r) {
        const double* row = logits.data() + static_cast<size_t>(r) * K;
        double* o = probs.data() + static_cast<size_t>(r) * total_classes;
        double m = row[0] / temperature;
        for (int k = 1; k < K; ++k) m = std::max(m, row[k] / temperature);
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            o[k] = std::exp(row[k] / temperature - m);
            z += o[k];
        }
        for (int k = 0; k < K; ++k) o[k] /= z;
        // remaining entries stay exactly zero
    }
    return probs;
}

}  // namespace dfcil::model
