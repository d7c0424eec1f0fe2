#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dfcil/autodiff.hpp"
#include "dfcil/rng.hpp"

namespace dfcil::nn {

// Named view into a module's state, used for checkpoints and hashing.
// `is_param` marks trainable arrays; running statistics are state but not
// parameters.
struct NamedTensor {
    std::string name;
    Tensor* tensor;
    bool is_param;
};

// Per-layer batch statistics captured while an input flows through BN layers.
// Feeds the stat alignment loss; stats are [2 x C] nodes (mean row, std row).
struct BnCapture {
    std::vector<ad::Var> per_layer;
};

struct Linear {
    ad::Var weight;  // [out x in]
    ad::Var bias;    // [out], may be empty var (numel 0)
    int in = 0, out = 0;

    Linear() = default;
    Linear(int in_dim, int out_dim, Rng& rng, bool with_bias = true);
    ad::Var forward(const ad::Var& x) const { return ad::linear(x, weight, bias); }
    void tensors(const std::string& prefix, std::vector<NamedTensor>& out_list);
    void params(std::vector<ad::Var>& out_list) const;
    Linear clone() const;
    void set_frozen();
};

struct Conv2d {
    ad::Var weight;  // [out, in, k, k]
    ad::Var bias;    // [out], may be empty
    int in = 0, out = 0, k = 3, stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng,
           bool with_bias = true);
    ad::Var forward(const ad::Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }
    void tensors(const std::string& prefix, std::vector<NamedTensor>& out_list);
    void params(std::vector<ad::Var>& out_list) const;
    Conv2d clone() const;
    void set_frozen();
};

struct BatchNorm2d {
    ad::Var gamma;
    ad::Var beta;
    Tensor running_mean;
    Tensor running_var;
    int channels = 0;
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int ch);
    // use_batch: normalize with this batch's statistics (training behavior).
    // update_running: fold batch stats into the running buffers.
    // cap: when non-null, the input's per-channel batch stats are appended as
    // graph nodes regardless of the normalization mode.
    ad::Var forward(const ad::Var& x, bool use_batch, bool update_running, BnCapture* cap = nullptr);
    void tensors(const std::string& prefix, std::vector<NamedTensor>& out_list);
    void params(std::vector<ad::Var>& out_list) const;
    BatchNorm2d clone() const;
    void set_frozen();
};

// Kaiming-style fan-in initialization, zero bias.
Tensor kaiming_normal(std::vector<int> shape, int fan_in, Rng& rng);

class SGD {
public:
    SGD(std::vector<ad::Var> params, double lr, double momentum, double weight_decay);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    void zero_grad();
    void step();

private:
    std::vector<ad::Var> params_;
    std::vector<Tensor> velocity_;
    double lr_, momentum_, weight_decay_;
};

class Adam {
public:
    Adam(std::vector<ad::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void zero_grad();
    void step();

private:
    std::vector<ad::Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace dfcil::nn
