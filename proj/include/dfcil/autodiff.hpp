#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dfcil/tensor.hpp"

namespace dfcil::ad {

// Reverse-mode autodiff on a dynamic graph. Ops are coarse-grained (linear,
// conv2d, batchnorm, ...) with hand-written backward passes; the gradient
// test suite validates every one of them against central finite differences.
class Node {
public:
    Tensor val;
    Tensor grad;  // allocated on first use during backward
    bool requires_grad = false;  // leaf flag (parameters, optimized inputs)
    bool needs_grad = false;     // this or some ancestor requires grad
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // scatter this->grad into parents

    Node() = default;
    explicit Node(Tensor v) : val(std::move(v)) {}

    void ensure_grad() {
        if (grad.v.size() != val.v.size()) {
            grad = Tensor(val.shape);
        }
    }
    void zero_grad() { grad.fill(0.0); }
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor v, bool requires_grad = true);
Var constant(Tensor v);

// Seeds root->grad with ones and propagates in reverse topological order.
void backward(const Var& root);
void zero_grads(const std::vector<Var>& vars);

// ---- elementwise / structural ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var tanh_op(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
Var detach(const Var& a);
// Weighted sum of scalar losses.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

// ---- dense / conv layers ----
// x: [B x I], W: [O x I], b: [O] or empty Var.
Var linear(const Var& x, const Var& W, const Var& b);
// x: [B,C,H,W], W: [O,C,kh,kw], b: [O] or empty Var. Zero padding.
Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad);
// BN over [B,C,H,W]. use_batch_stats chooses batch vs running statistics for
// normalization; update_running folds the batch statistics into the running
// buffers (unbiased variance, standard momentum convention).
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* running_mean,
                Tensor* running_var, bool use_batch_stats, bool update_running, double momentum,
                double eps);
Var global_avg_pool(const Var& x);       // [B,C,H,W] -> [B,C]
Var upsample_nearest2x(const Var& x);    // [B,C,H,W] -> [B,C,2H,2W]
Var concat_cols(const std::vector<Var>& xs);  // [B x Ki] -> [B x sum(Ki)]
Var concat_rows(const Var& a, const Var& b);  // stack along dim 0
Var slice_rows(const Var& x, int row0, int row1);  // rows [row0, row1) along dim 0

// ---- probabilistic heads ----
Var log_softmax_rows(const Var& x);  // [B x K]
Var softmax_rows(const Var& x);
// -(1/B) sum_b w_b * logp[b, y_b]. Weights may be empty (all ones).
Var nll_rows(const Var& logp, const std::vector<int>& labels, const std::vector<double>& weights);
// (1/B) sum_b sum_k p_bk (log p_bk - logq_bk), target probs constant, 0 log 0 = 0.
Var kl_const_target(const Var& logq, const Tensor& target_probs);
Var mean_rows(const Var& x);         // [B x K] -> [K]
Var neg_entropy(const Var& p);       // sum_k p log p (scalar), 0 log 0 = 0
// (1/B) * sum over all elements of (a - b)^2, batch along dim 0.
Var sq_diff_mean_rows(const Var& a, const Var& b);

// ---- synthesis-specific ----
// Per-channel mean and std over (B,H,W) of a [B,C,H,W] input, packed as
// [2 x C] (row 0 mean, row 1 std). Biased variance; std = sqrt(var + eps).
Var channel_mean_std(const Var& x, double eps);
// Mean over channels of KL(N(mean,std^2) || N(stats.mean, stats.std^2)) where
// stats is the [2 x C] output of channel_mean_std and (mean, std) are constants.
Var gaussian_kl_to_batch(const Var& stats, const std::vector<double>& ref_mean,
                         const std::vector<double>& ref_std);
// Depthwise 3x3 convolution with a fixed kernel and reflect padding.
Var blur3x3_reflect(const Var& x, const double kernel[9]);

}  // namespace dfcil::ad
