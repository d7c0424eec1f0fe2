#include "dfcil/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dfcil::nn {

Tensor kaiming_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / fan_in);
    return Tensor::randn(std::move(shape), rng, std);
}

Linear::Linear(int in_dim, int out_dim, Rng& rng, bool with_bias) : in(in_dim), out(out_dim) {
    weight = ad::leaf(kaiming_normal({out_dim, in_dim}, in_dim, rng));
    bias = ad::leaf(with_bias ? Tensor({out_dim}) : Tensor());
}

void Linear::tensors(const std::string& prefix, std::vector<NamedTensor>& out_list) {
    out_list.push_back({prefix + ".weight", &weight->val, true});
    if (bias->val.numel() > 0) out_list.push_back({prefix + ".bias", &bias->val, true});
}

void Linear::params(std::vector<ad::Var>& out_list) const {
    out_list.push_back(weight);
    if (bias->val.numel() > 0) out_list.push_back(bias);
}

Linear Linear::clone() const {
    Linear c;
    c.in = in;
    c.out = out;
    c.weight = ad::leaf(weight->val, weight->requires_grad);
    c.bias = ad::leaf(bias->val, bias->requires_grad);
    return c;
}

void Linear::set_frozen() {
    weight->requires_grad = weight->needs_grad = false;
    bias->requires_grad = bias->needs_grad = false;
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng, bool with_bias)
    : in(in_ch), out(out_ch), k(kernel), stride(stride_), pad(pad_) {
    weight = ad::leaf(kaiming_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng));
    bias = ad::leaf(with_bias ? Tensor({out_ch}) : Tensor());
}

void Conv2d::tensors(const std::string& prefix, std::vector<NamedTensor>& out_list) {
    out_list.push_back({prefix + ".weight", &weight->val, true});
    if (bias->val.numel() > 0) out_list.push_back({prefix + ".bias", &bias->val, true});
}

void Conv2d::params(std::vector<ad::Var>& out_list) const {
    out_list.push_back(weight);
    if (bias->val.numel() > 0) out_list.push_back(bias);
}

Conv2d Conv2d::clone() const {
    Conv2d c;
    c.in = in;
    c.out = out;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.weight = ad::leaf(weight->val, weight->requires_grad);
    c.bias = ad::leaf(bias->val, bias->requires_grad);
    return c;
}

void Conv2d::set_frozen() {
    weight->requires_grad = weight->needs_grad = false;
    bias->requires_grad = bias->needs_grad = false;
}

BatchNorm2d::BatchNorm2d(int ch) : channels(ch) {
    gamma = ad::leaf(Tensor({ch}, 1.0));
    beta = ad::leaf(Tensor({ch}));
    running_mean = Tensor({ch}, 0.0);
    running_var = Tensor({ch}, 1.0);
}

ad::Var BatchNorm2d::forward(const ad::Var& x, bool use_batch, bool update_running,
                             BnCapture* cap) {
    if (cap) cap->per_layer.push_back(ad::channel_mean_std(x, 1e-8));
    return ad::batchnorm2d(x, gamma, beta, &running_mean, &running_var, use_batch, update_running,
                           momentum, eps);
}

void BatchNorm2d::tensors(const std::string& prefix, std::vector<NamedTensor>& out_list) {
    out_list.push_back({prefix + ".gamma", &gamma->val, true});
    out_list.push_back({prefix + ".beta", &beta->val, true});
    out_list.push_back({prefix + ".running_mean", &running_mean, false});
    out_list.push_back({prefix + ".running_var", &running_var, false});
}

void BatchNorm2d::params(std::vector<ad::Var>& out_list) const {
    out_list.push_back(gamma);
    out_list.push_back(beta);
}

BatchNorm2d BatchNorm2d::clone() const {
    BatchNorm2d c;
    c.channels = channels;
    c.eps = eps;
    c.momentum = momentum;
    c.gamma = ad::leaf(gamma->val, gamma->requires_grad);
    c.beta = ad::leaf(beta->val, beta->requires_grad);
    c.running_mean = running_mean;
    c.running_var = running_var;
    return c;
}

void BatchNorm2d::set_frozen() {
    gamma->requires_grad = gamma->needs_grad = false;
    beta->requires_grad = beta->needs_grad = false;
}

SGD::SGD(std::vector<ad::Var> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p->val.shape);
}

void SGD::zero_grad() {
    for (auto& p : params_) {
        p->ensure_grad();
        p->zero_grad();
    }
}

void SGD::step() {
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (p->grad.numel() != p->val.numel()) continue;  // never touched by backward
        auto& vel = velocity_[i];
        for (size_t j = 0; j < p->val.numel(); ++j) {
            const double g = p->grad.v[j] + weight_decay_ * p->val.v[j];
            vel.v[j] = momentum_ * vel.v[j] + g;
            p->val.v[j] -= lr_ * vel.v[j];
        }
    }
}

Adam::Adam(std::vector<ad::Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p->val.shape);
        v_.emplace_back(p->val.shape);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) {
        p->ensure_grad();
        p->zero_grad();
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (p->grad.numel() != p->val.numel()) continue;
        for (size_t j = 0; j < p->val.numel(); ++j) {
            const double g = p->grad.v[j];
            m_[i].v[j] = beta1_ * m_[i].v[j] + (1.0 - beta1_) * g;
            v_[i].v[j] = beta2_ * v_[i].v[j] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i].v[j] / bc1;
            const double vhat = v_[i].v[j] / bc2;
            p->val.v[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace dfcil::nn
