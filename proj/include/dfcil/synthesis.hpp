#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "dfcil/model.hpp"

namespace dfcil::synthesis {

struct InversionWeights {
    double con = 1.0;
    double div = 1.0;
    double stat = 50.0;
    double prior = 1e-3;
    double temp = 1000.0;  // content-loss temperature, must be positive
};

struct GeneratorConfig {
    int z_dim = 1000;
    int base_channels = 128;
    double output_scale = 3.0;  // tanh output bound in normalized pixel space
    double lr = 1e-3;           // Adam learning rate
};

// Noise-to-image ConvNet: linear from Z to an (H/4 x W/4) feature map, then
// three conv+norm+activation stages (the first two preceded by 2x nearest
// upsampling), bounded by a scaled tanh.
class SynthesisGenerator {
public:
    SynthesisGenerator(model::ImageDims dims, const GeneratorConfig& cfg, uint64_t seed);
    SynthesisGenerator(const SynthesisGenerator&);
    SynthesisGenerator& operator=(const SynthesisGenerator&) = delete;
    SynthesisGenerator(SynthesisGenerator&&) noexcept;  // counted: the source still destructs
    ~SynthesisGenerator();

    ad::Var forward(const ad::Var& z, bool update_running);
    // Forward-only pass with batch-stat normalization, no state writes.
    Tensor sample_images(int batch, Rng& rng);

    int z_dim() const { return cfg_.z_dim; }
    model::ImageDims output_dims() const { return dims_; }
    size_t param_count() const;
    std::vector<ad::Var> parameters() const;
    void tensors(std::vector<nn::NamedTensor>& out);

    // Cross-task memory accounting (generators must not outlive their task).
    static int live_instances();
    static int peak_instances();
    static void reset_peak();

private:
    model::ImageDims dims_;
    GeneratorConfig cfg_;
    bool counted_ = true;  // moved-from shells hold no parameters
    nn::Linear fc_;
    nn::BatchNorm2d bn0_;
    nn::Conv2d conv1_, conv2_, conv3_, conv_out_;
    nn::BatchNorm2d bn1_, bn2_, bn3_;
};

// ---- inversion losses ----

// -H(mean row of probs); rows must be distributions (sum 1 within 1e-6,
// nonnegative entries). Bounded in [-log K, 0].
ad::Var diversity_loss(const ad::Var& probs);

struct ContentLoss {
    ad::Var loss;
    std::vector<int> labels;  // argmax pseudo-labels, indices into teacher registry order
};
// Cross-entropy between the temperature-scaled teacher softmax and the
// argmax pseudo-labels (labels detached by construction).
ContentLoss content_loss_from_logits(const ad::Var& teacher_logits, double alpha_temp);
ContentLoss content_loss(const model::ModelSnapshot& teacher, const ad::Var& x_hat,
                         double alpha_temp);

// Mean over layers of channel-mean KL(N(mu,sigma^2) || N(mu_hat,sigma_hat^2)).
// batch_stats entries are the [2 x C] nodes captured at each BN layer.
ad::Var stat_alignment_loss(const model::BatchNormStats& ref,
                            const std::vector<ad::Var>& batch_stats);
// Plain-number convenience for direct (mu_hat, sigma_hat) inputs.
double stat_alignment_value(const model::BatchNormStats& ref,
                            const std::vector<std::pair<std::vector<double>, std::vector<double>>>&
                                batch_stats);

// Mean over batch of ||x - blur(x)||^2 with a fixed 3x3 Gaussian (sigma 1,
// reflect padding).
ad::Var smoothness_prior_loss(const ad::Var& x_hat);
const double* smoothness_kernel();  // the 9 normalized taps

// ---- generator training / sampling ----

struct GeneratorTrainResult {
    SynthesisGenerator generator;
    std::vector<double> loss_trace;  // combined loss per step
};

GeneratorTrainResult train_generator(const model::ModelSnapshot& teacher,
                                     const InversionWeights& weights, const GeneratorConfig& cfg,
                                     int steps, int batch, uint64_t seed);

// x_hat = F_phi(noise), y_hat = teacher argmax as global class ids.
std::pair<Tensor, std::vector<int>> sample_synthetic(SynthesisGenerator& gen,
                                                     const model::ModelSnapshot& teacher, int batch,
                                                     Rng& rng);

// Uniform sampling interface over the two synthesis backends.
class SyntheticSource {
public:
    virtual ~SyntheticSource() = default;
    virtual std::pair<Tensor, std::vector<int>> sample(int batch, Rng& rng) = 0;
    virtual size_t stored_parameters() const = 0;
};

class GeneratorSource final : public SyntheticSource {
public:
    GeneratorSource(SynthesisGenerator gen, const model::ModelSnapshot& teacher)
        : gen_(std::move(gen)), teacher_(&teacher) {}
    std::pair<Tensor, std::vector<int>> sample(int batch, Rng& rng) override {
        return sample_synthetic(gen_, *teacher_, batch, rng);
    }
    size_t stored_parameters() const override { return gen_.param_count(); }
    SynthesisGenerator& generator() { return gen_; }

private:
    SynthesisGenerator gen_;
    const model::ModelSnapshot* teacher_;
};

// Optimizes a fresh image batch from noise on every call; trades compute for
// holding no generator parameters.
class DirectOptSource final : public SyntheticSource {
public:
    DirectOptSource(const model::ModelSnapshot& teacher, InversionWeights weights, int steps,
                    double lr)
        : teacher_(&teacher), weights_(weights), steps_(steps), lr_(lr) {}
    std::pair<Tensor, std::vector<int>> sample(int batch, Rng& rng) override;
    size_t stored_parameters() const override { return 0; }

private:
    const model::ModelSnapshot* teacher_;
    InversionWeights weights_;
    int steps_;
    double lr_;
};

}  // namespace dfcil::synthesis
