#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dfcil/nn.hpp"

namespace dfcil::model {

struct ImageDims {
    int channels = 3, height = 32, width = 32;
    bool operator==(const ImageDims&) const = default;
};

enum class BackboneKind { tiny_mlp, small_conv, resnet32 };

std::string backbone_name(BackboneKind k);
BackboneKind backbone_from_name(const std::string& name);

// Running normalization statistics per BN layer, in layer order.
struct BatchNormStats {
    struct Layer {
        std::vector<double> mean, std;
    };
    std::vector<Layer> layers;
};

class Backbone {
public:
    virtual ~Backbone() = default;
    // x: [B,C,H,W] -> features [B,D].
    virtual ad::Var forward(const ad::Var& x, bool use_batch_stats, bool update_running,
                            nn::BnCapture* cap) = 0;
    virtual int feature_dim() const = 0;
    virtual ImageDims input_dims() const = 0;
    virtual BackboneKind kind() const = 0;
    virtual int width_hint() const = 0;
    virtual void tensors(std::vector<nn::NamedTensor>& out) = 0;
    virtual void params(std::vector<ad::Var>& out) const = 0;
    virtual std::vector<nn::BatchNorm2d*> bn_layers() = 0;
    virtual std::unique_ptr<Backbone> clone() const = 0;
    virtual void set_frozen() = 0;
};

// width selects the base channel count for small_conv (default 8) and the
// hidden width for tiny_mlp (default 16); resnet32 ignores it.
std::unique_ptr<Backbone> make_backbone(BackboneKind kind, ImageDims dims, uint64_t seed,
                                        int width = 0);

// Backbone plus a growing bank of per-task linear heads. Head blocks own
// disjoint parameters, so logits over one task span never read another
// span's weights.
class IncrementalClassifier {
public:
    IncrementalClassifier() = default;
    IncrementalClassifier(BackboneKind kind, ImageDims dims, uint64_t seed, int width = 0);

    ad::Var features(const ad::Var& x, bool training, nn::BnCapture* cap = nullptr);
    // Batch-stat normalization without touching the running estimates (the
    // student's synthetic passes; running stats track real data only).
    ad::Var features_batchstats(const ad::Var& x, nn::BnCapture* cap = nullptr);
    Tensor features_eval(const Tensor& x);

    // Logits over the heads of tasks [first_task, last_task], 0-based inclusive.
    ad::Var logits_over_tasks(const ad::Var& feats, int first_task, int last_task) const;
    Tensor logits_eval(const Tensor& x, int first_task, int last_task);

    void grow_heads(const std::vector<int>& new_classes, uint64_t seed);

    int num_tasks() const { return static_cast<int>(heads_.size()); }
    int num_classes() const { return static_cast<int>(registry_.size()); }
    int head_width(int first_task, int last_task) const;
    const std::vector<int>& class_registry() const { return registry_; }
    const std::vector<int>& task_classes(int t) const { return head_classes_.at(static_cast<size_t>(t)); }
    // Index of a class id within the registry slice [first_task, last_task]; -1 if absent.
    int local_index(int class_id, int first_task, int last_task) const;

    Backbone& backbone() { return *backbone_; }
    const Backbone& backbone() const { return *backbone_; }
    // Head weight rows for tasks [first_task, last_task] stacked to [K x D].
    Tensor heads_weight_matrix(int first_task, int last_task) const;

    std::vector<ad::Var> parameters() const;
    std::vector<ad::Var> backbone_parameters() const;
    std::vector<ad::Var> head_parameters(int first_task, int last_task) const;
    void tensors(std::vector<nn::NamedTensor>& out);
    uint64_t state_hash() const;

    BatchNormStats extract_bn_stats() const;

    IncrementalClassifier clone() const;
    void set_frozen();

private:
    std::unique_ptr<Backbone> backbone_;
    std::vector<nn::Linear> heads_;
    std::vector<std::vector<int>> head_classes_;
    std::vector<int> registry_;

    void check_task_range(int first_task, int last_task) const;
};

// Immutable deep copy taken at a task boundary. All evaluation runs in
// inference mode (running statistics); parameters are frozen so graphs built
// through a snapshot propagate gradients only to their inputs.
class ModelSnapshot {
public:
    explicit ModelSnapshot(const IncrementalClassifier& live);
    ModelSnapshot(const ModelSnapshot& o);
    ModelSnapshot& operator=(const ModelSnapshot&) = delete;
    ModelSnapshot(ModelSnapshot&&) noexcept;  // counted: the source still destructs
    ~ModelSnapshot();

    const IncrementalClassifier& model() const { return model_; }
    int num_classes() const { return model_.num_classes(); }
    int num_tasks() const { return model_.num_tasks(); }

    ad::Var features(const ad::Var& x, nn::BnCapture* cap = nullptr) const;
    Tensor features_eval(const Tensor& x) const;
    ad::Var logits(const ad::Var& x, nn::BnCapture* cap = nullptr) const;  // over all its tasks
    Tensor logits_eval(const Tensor& x) const;
    BatchNormStats bn_stats() const { return model_.extract_bn_stats(); }
    Tensor past_head_weights() const;  // [K_old x D]
    uint64_t state_hash() const { return model_.state_hash(); }

    // Cross-task memory accounting.
    static int live_instances();
    static int peak_instances();
    static void reset_peak();

private:
    IncrementalClassifier model_;
    bool counted_ = true;  // moved-from shells are not live snapshots
};

// Tempered softmax of snapshot logits, zero-extended to total_classes.
Tensor padded_teacher_probs(const ModelSnapshot& snapshot, const Tensor& x, int total_classes,
                            double temperature);

}  // namespace dfcil::model
