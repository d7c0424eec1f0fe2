#include "dfcil/synthesis.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace dfcil::synthesis {

namespace {
std::atomic<int> g_gen_live{0};
std::atomic<int> g_gen_peak{0};

void gen_inc() {
    const int n = ++g_gen_live;
    int peak = g_gen_peak.load();
    while (n > peak && !g_gen_peak.compare_exchange_weak(peak, n)) {
    }
}
}  // namespace

SynthesisGenerator::SynthesisGenerator(model::ImageDims dims, const GeneratorConfig& cfg,
                                       uint64_t seed)
    : dims_(dims), cfg_(cfg) {
    if (dims.height % 4 != 0 || dims.width % 4 != 0) {
        throw std::invalid_argument("SynthesisGenerator: image dims must be divisible by 4");
    }
    Rng rng(mix_seed(seed, 0x9e4ull));
    const int c0 = cfg.base_channels;
    const int c1 = std::max(c0 / 2, dims.channels);
    const int c2 = std::max(c0 / 4, dims.channels);
    const int h0 = dims.height / 4, w0 = dims.width / 4;
    fc_ = nn::Linear(cfg.z_dim, c0 * h0 * w0, rng);
    bn0_ = nn::BatchNorm2d(c0);
    conv1_ = nn::Conv2d(c0, c0, 3, 1, 1, rng, false);
    bn1_ = nn::BatchNorm2d(c0);
    conv2_ = nn::Conv2d(c0, c1, 3, 1, 1, rng, false);
    bn2_ = nn::BatchNorm2d(c1);
    conv3_ = nn::Conv2d(c1, c2, 3, 1, 1, rng, false);
    bn3_ = nn::BatchNorm2d(c2);
    conv_out_ = nn::Conv2d(c2, dims.channels, 3, 1, 1, rng, true);
    gen_inc();
}

SynthesisGenerator::SynthesisGenerator(const SynthesisGenerator& o)
    : dims_(o.dims_),
      cfg_(o.cfg_),
      fc_(o.fc_.clone()),
      bn0_(o.bn0_.clone()),
      conv1_(o.conv1_.clone()),
      conv2_(o.conv2_.clone()),
      conv3_(o.conv3_.clone()),
      conv_out_(o.conv_out_.clone()),
      bn1_(o.bn1_.clone()),
      bn2_(o.bn2_.clone()),
      bn3_(o.bn3_.clone()) {
    gen_inc();
}

SynthesisGenerator::SynthesisGenerator(SynthesisGenerator&& o) noexcept
    : dims_(o.dims_),
      cfg_(o.cfg_),
      fc_(std::move(o.fc_)),
      bn0_(std::move(o.bn0_)),
      conv1_(std::move(o.conv1_)),
      conv2_(std::move(o.conv2_)),
      conv3_(std::move(o.conv3_)),
      conv_out_(std::move(o.conv_out_)),
      bn1_(std::move(o.bn1_)),
      bn2_(std::move(o.bn2_)),
      bn3_(std::move(o.bn3_)) {
    counted_ = o.counted_;
    o.counted_ = false;
}

SynthesisGenerator::~SynthesisGenerator() {
    if (counted_) --g_gen_live;
}

int SynthesisGenerator::live_instances() { return g_gen_live.load(); }
int SynthesisGenerator::peak_instances() { return g_gen_peak.load(); }
void SynthesisGenerator::reset_peak() { g_gen_peak.store(g_gen_live.load()); }

ad::Var SynthesisGenerator::forward(const ad::Var& z, bool update_running) {
    if (z->val.ndim() != 2 || z->val.dim(1) != cfg_.z_dim) {
        throw std::invalid_argument("SynthesisGenerator: expected z[B x " +
                                    std::to_string(cfg_.z_dim) + "], given " + z->val.shape_str());
    }
    const int B = z->val.dim(0);
    const int c0 = cfg_.base_channels;
    const int h0 = dims_.height / 4, w0 = dims_.width / 4;
    auto h = ad::reshape(fc_.forward(z), {B, c0, h0, w0});
    h = bn0_.forward(h, true, update_running);
    h = ad::upsample_nearest2x(h);
    h = ad::leaky_relu(bn1_.forward(conv1_.forward(h), true, update_running), 0.2);
    h = ad::upsample_nearest2x(h);
    h = ad::leaky_relu(bn2_.forward(conv2_.forward(h), true, update_running), 0.2);
    h = ad::leaky_relu(bn3_.forward(conv3_.forward(h), true, update_running), 0.2);
    return ad::scale(ad::tanh_op(conv_out_.forward(h)), cfg_.output_scale);
}

Tensor SynthesisGenerator::sample_images(int batch, Rng& rng) {
    Tensor z = Tensor::randn({batch, cfg_.z_dim}, rng);
    return forward(ad::constant(std::move(z)), false)->val;
}

size_t SynthesisGenerator::param_count() const {
    size_t n = 0;
    for (const auto& p : parameters()) n += p->val.numel();
    return n;
}

std::vector<ad::Var> SynthesisGenerator::parameters() const {
    std::vector<ad::Var> out;
    fc_.params(out);
    bn0_.params(out);
    conv1_.params(out);
    bn1_.params(out);
    conv2_.params(out);
    bn2_.params(out);
    conv3_.params(out);
    bn3_.params(out);
    conv_out_.params(out);
    return out;
}

void SynthesisGenerator::tensors(std::vector<nn::NamedTensor>& out) {
    fc_.tensors("gen.fc", out);
    bn0_.tensors("gen.bn0", out);
    conv1_.tensors("gen.conv1", out);
    bn1_.tensors("gen.bn1", out);
    conv2_.tensors("gen.conv2", out);
    bn2_.tensors("gen.bn2", out);
    conv3_.tensors("gen.conv3", out);
    bn3_.tensors("gen.bn3", out);
    conv_out_.tensors("gen.conv_out", out);
}

ad::Var diversity_loss(const ad::Var& probs) {
    if (probs->val.ndim() != 2) throw std::invalid_argument("diversity_loss: expected [B x K]");
    const int B = probs->val.dim(0), K = probs->val.dim(1);
    for (int r = 0; r < B; ++r) {
        double sum = 0.0;
        for (int k = 0; k < K; ++k) {
            const double p = probs->val.v[static_cast<size_t>(r) * K + k];
            if (p < 0.0) {
                throw std::invalid_argument("diversity_loss: negative probability in row " +
                                            std::to_string(r));
            }
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-6) {
            throw std::invalid_argument("diversity_loss: row " + std::to_string(r) + " sums to " +
                                        std::to_string(sum));
        }
    }
    return ad::neg_entropy(ad::mean_rows(probs));
}

ContentLoss content_loss_from_logits(const ad::Var& teacher_logits, double alpha_temp) {
    if (alpha_temp <= 0.0) {
        throw std::invalid_argument("content_loss: alpha_temp must be positive, got " +
                                    std::to_string(alpha_temp));
    }
    const int B = teacher_logits->val.dim(0), K = teacher_logits->val.dim(1);
    ContentLoss out;
    out.labels.resize(static_cast<size_t>(B));
    for (int r = 0; r < B; ++r) {
        const double* row = teacher_logits->val.data() + static_cast<size_t>(r) * K;
        int best = 0;
        for (int k = 1; k < K; ++k) {
            if (row[k] > row[best]) best = k;
        }
        out.labels[static_cast<size_t>(r)] = best;
    }
    auto logp = ad::log_softmax_rows(ad::scale(teacher_logits, 1.0 / alpha_temp));
    out.loss = ad::nll_rows(logp, out.labels, {});
    return out;
}

ContentLoss content_loss(const model::ModelSnapshot& teacher, const ad::Var& x_hat,
                         double alpha_temp) {
    return content_loss_from_logits(teacher.logits(x_hat), alpha_temp);
}

ad::Var stat_alignment_loss(const model::BatchNormStats& ref,
                            const std::vector<ad::Var>& batch_stats) {
    const size_t L = ref.layers.size();
    if (L == 0 || batch_stats.size() != L) {
        throw std::invalid_argument("stat_alignment_loss: layer count mismatch (" +
                                    std::to_string(L) + " reference vs " +
                                    std::to_string(batch_stats.size()) + " batch)");
    }
    std::vector<ad::Var> terms;
    terms.reserve(L);
    for (size_t l = 0; l < L; ++l) {
        terms.push_back(
            ad::gaussian_kl_to_batch(batch_stats[l], ref.layers[l].mean, ref.layers[l].std));
    }
    return ad::weighted_sum(terms, std::vector<double>(L, 1.0 / static_cast<double>(L)));
}

double stat_alignment_value(
    const model::BatchNormStats& ref,
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& batch_stats) {
    std::vector<ad::Var> vars;
    for (const auto& [mean, stdev] : batch_stats) {
        const int C = static_cast<int>(mean.size());
        Tensor t({2, C});
        for (int c = 0; c < C; ++c) {
            if (stdev[static_cast<size_t>(c)] <= 0.0) {
                throw std::invalid_argument("stat_alignment_value: nonpositive batch std");
            }
            t.v[static_cast<size_t>(c)] = mean[static_cast<size_t>(c)];
            t.v[static_cast<size_t>(C + c)] = stdev[static_cast<size_t>(c)];
        }
        vars.push_back(ad::constant(std::move(t)));
    }
    return stat_alignment_loss(ref, vars)->val.v[0];
}

const double* smoothness_kernel() {
    static const std::array<double, 9> kernel = [] {
        std::array<double, 9> k{};
        double sum = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const double w = std::exp(-(dy * dy + dx * dx) / 2.0);
                k[static_cast<size_t>((dy + 1) * 3 + dx + 1)] = w;
                sum += w;
            }
        }
        for (auto& w : k) w /= sum;
        return k;
    }();
    return kernel.data();
}

ad::Var smoothness_prior_loss(const ad::Var& x_hat) {
    return ad::sq_diff_mean_rows(x_hat, ad::blur3x3_reflect(x_hat, smoothness_kernel()));
}

GeneratorTrainResult train_generator(const model::ModelSnapshot& teacher,
                                     const InversionWeights& weights, const GeneratorConfig& cfg,
                                     int steps, int batch, uint64_t seed) {
    if (steps <= 0) throw std::invalid_argument("train_generator: steps must be positive");
    if (weights.temp <= 0.0) throw std::invalid_argument("train_generator: temp must be positive");
    const model::BatchNormStats ref = teacher.bn_stats();  // throws without BN layers

    GeneratorTrainResult result{
        SynthesisGenerator(teacher.model().backbone().input_dims(), cfg, mix_seed(seed, 0x17eb)),
        {}};
    nn::Adam opt(result.generator.parameters(), cfg.lr);
    Rng noise(mix_seed(seed, 0x01d5e));

    result.loss_trace.reserve(static_cast<size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        auto z = ad::constant(Tensor::randn({batch, result.generator.z_dim()}, noise));
        auto x_hat = result.generator.forward(z, true);
        nn::BnCapture cap;
        auto logits = teacher.logits(x_hat, &cap);
        auto content = content_loss_from_logits(logits, weights.temp);
        auto div = diversity_loss(ad::softmax_rows(logits));
        auto stat = stat_alignment_loss(ref, cap.per_layer);
        auto prior = smoothness_prior_loss(x_hat);
        auto total = ad::weighted_sum({content.loss, div, stat, prior},
                                      {weights.con, weights.div, weights.stat, weights.prior});
        opt.zero_grad();
        ad::backward(total);
        opt.step();
        result.loss_trace.push_back(total->val.v[0]);
    }
    return result;
}

namespace {
std::vector<int> argmax_global_labels(const model::ModelSnapshot& teacher, const Tensor& logits) {
    const int B = logits.dim(0), K = logits.dim(1);
    const auto& registry = teacher.model().class_registry();
    std::vector<int> labels(static_cast<size_t>(B));
    for (int r = 0; r < B; ++r) {
        const double* row = logits.data() + static_cast<size_t>(r) * K;
        int best = 0;
        for (int k = 1; k < K; ++k) {
            if (row[k] > row[best]) best = k;
        }
        labels[static_cast<size_t>(r)] = registry[static_cast<size_t>(best)];
    }
    return labels;
}
}  // namespace

std::pair<Tensor, std::vector<int>> sample_synthetic(SynthesisGenerator& gen,
                                                     const model::ModelSnapshot& teacher, int batch,
                                                     Rng& rng) {
    Tensor x_hat = gen.sample_images(batch, rng);
    Tensor logits = teacher.logits_eval(x_hat);
    return {std::move(x_hat), argmax_global_labels(teacher, logits)};
}

std::pair<Tensor, std::vector<int>> DirectOptSource::sample(int batch, Rng& rng) {
    const model::BatchNormStats ref = teacher_->bn_stats();
    const auto dims = teacher_->model().backbone().input_dims();
    auto x = ad::leaf(Tensor::randn({batch, dims.channels, dims.height, dims.width}, rng));
    nn::Adam opt({x}, lr_);
    for (int step = 0; step < steps_; ++step) {
        nn::BnCapture cap;
        auto logits = teacher_->logits(x, &cap);
        auto content = content_loss_from_logits(logits, weights_.temp);
        auto div = diversity_loss(ad::softmax_rows(logits));
        auto stat = stat_alignment_loss(ref, cap.per_layer);
        auto prior = smoothness_prior_loss(x);
        auto total = ad::weighted_sum({content.loss, div, stat, prior},
                                      {weights_.con, weights_.div, weights_.stat, weights_.prior});
        opt.zero_grad();
        ad::backward(total);
        opt.step();
    }
    Tensor images = x->val;
    Tensor logits = teacher_->logits_eval(images);
    return {std::move(images), argmax_global_labels(*teacher_, logits)};
}

}  // namespace dfcil::synthesis
