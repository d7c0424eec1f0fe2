#include "doctest.h"

#include "dfcil/autodiff.hpp"
#include "dfcil/nn.hpp"
#include "dfcil/synthesis.hpp"
#include "test_support.hpp"

using namespace dfcil;
using testsup::max_rel_grad_err;

namespace {
Tensor randn(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, scale);
}
}  // namespace

TEST_CASE("gemm kernels match naive multiplication") {
    const int M = 7, K = 13, N = 9;
    Tensor A = randn({M, K}, 1), B = randn({K, N}, 2), Bt = randn({N, K}, 4), At = randn({K, M}, 5);
    std::vector<double> C1(M * N, 0.0), C2(M * N, 0.0), C3(M * N, 0.0);
    gemm_nn(A.data(), B.data(), C1.data(), M, K, N);
    gemm_nt(A.data(), Bt.data(), C2.data(), M, K, N);
    gemm_tn(At.data(), B.data(), C3.data(), M, K, N);
    for (int m = 0; m < M; ++m) {
        for (int n = 0; n < N; ++n) {
            double e1 = 0, e2 = 0, e3 = 0;
            for (int k = 0; k < K; ++k) {
                e1 += A.v[m * K + k] * B.v[k * N + n];
                e2 += A.v[m * K + k] * Bt.v[n * K + k];
                e3 += At.v[k * M + m] * B.v[k * N + n];
            }
            CHECK(C1[m * N + n] == doctest::Approx(e1).epsilon(1e-12));
            CHECK(C2[m * N + n] == doctest::Approx(e2).epsilon(1e-12));
            CHECK(C3[m * N + n] == doctest::Approx(e3).epsilon(1e-12));
        }
    }
}

TEST_CASE("linear layer gradients") {
    Rng rng(11);
    nn::Linear lin(5, 3, rng);
    auto x = ad::leaf(randn({4, 5}, 21));
    std::vector<int> labels = {0, 2, 1, 0};
    auto f = [&] { return ad::nll_rows(ad::log_softmax_rows(lin.forward(x)), labels, {}); };
    CHECK(max_rel_grad_err(f, {x, lin.weight, lin.bias}) < 1e-6);
}

TEST_CASE("conv2d gradients, stride 1 and 2") {
    for (int stride : {1, 2}) {
        CAPTURE(stride);
        Rng rng(13 + stride);
        nn::Conv2d conv(2, 3, 3, stride, 1, rng);
        auto x = ad::leaf(randn({2, 2, 6, 6}, 31));
        auto target = ad::constant(Tensor({2, 3 * ((6 + 2 - 3) / stride + 1) *
                                                  ((6 + 2 - 3) / stride + 1)}));
        auto f = [&] {
            auto y = conv.forward(x);
            auto flat = ad::reshape(y, {2, static_cast<int>(y->val.numel() / 2)});
            return ad::sq_diff_mean_rows(flat, target);
        };
        CHECK(max_rel_grad_err(f, {x, conv.weight, conv.bias}, 30) < 1e-6);
    }
}

TEST_CASE("batchnorm2d gradients in batch-stats mode") {
    nn::BatchNorm2d bn(3);
    // Non-trivial gamma/beta.
    bn.gamma->val = randn({3}, 41, 0.5);
    for (auto& g : bn.gamma->val.v) g += 1.0;
    bn.beta->val = randn({3}, 42, 0.3);
    auto x = ad::leaf(randn({4, 3, 3, 3}, 43));
    auto target = ad::constant(Tensor({4, 27}));
    auto f = [&] {
        auto y = bn.forward(x, true, false);
        return ad::sq_diff_mean_rows(ad::reshape(y, {4, 27}), target);
    };
    CHECK(max_rel_grad_err(f, {x, bn.gamma, bn.beta}, 40) < 1e-6);
}

TEST_CASE("batchnorm2d eval mode uses running stats") {
    nn::BatchNorm2d bn(2);
    bn.running_mean.v = {1.0, -1.0};
    bn.running_var.v = {4.0, 0.25};
    auto x = ad::constant(Tensor({1, 2, 1, 1}, {3.0, 0.0}));
    auto y = bn.forward(x, false, false);
    CHECK(y->val.v[0] == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + 1e-5)));
    CHECK(y->val.v[1] == doctest::Approx((0.0 + 1.0) / std::sqrt(0.25 + 1e-5)));
}

TEST_CASE("batchnorm running stat update") {
    nn::BatchNorm2d bn(1);
    Tensor xt({2, 1, 1, 2});
    xt.v = {1.0, 3.0, 5.0, 7.0};  // mean 4, biased var 5, unbiased 20/3
    bn.forward(ad::constant(xt), true, true);
    CHECK(bn.running_mean.v[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 4.0));
    CHECK(bn.running_var.v[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 * 4.0 / 3.0)));
}

TEST_CASE("softmax, log_softmax, kl and entropy gradients") {
    auto x = ad::leaf(randn({3, 5}, 51));
    Tensor target({3, 5});
    {
        Rng rng(52);
        for (int r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int k = 0; k < 5; ++k) {
                target.v[r * 5 + k] = std::exp(rng.normal());
                sum += target.v[r * 5 + k];
            }
            for (int k = 0; k < 5; ++k) target.v[r * 5 + k] /= sum;
        }
    }
    auto f_kl = [&] { return ad::kl_const_target(ad::log_softmax_rows(x), target); };
    CHECK(max_rel_grad_err(f_kl, {x}) < 1e-6);

    auto f_ent = [&] { return ad::neg_entropy(ad::mean_rows(ad::softmax_rows(x))); };
    CHECK(max_rel_grad_err(f_ent, {x}) < 1e-6);
}

TEST_CASE("channel_mean_std and gaussian_kl_to_batch gradients") {
    auto x = ad::leaf(randn({3, 2, 2, 2}, 61));
    std::vector<double> ref_mean = {0.2, -0.1};
    std::vector<double> ref_std = {1.1, 0.7};
    auto f = [&] {
        return ad::gaussian_kl_to_batch(ad::channel_mean_std(x, 1e-8), ref_mean, ref_std);
    };
    CHECK(max_rel_grad_err(f, {x}) < 1e-6);
}

TEST_CASE("blur, upsample, pooling gradients") {
    auto x = ad::leaf(randn({2, 2, 4, 4}, 71));
    const double* k = dfcil::synthesis::smoothness_kernel();
    auto target = ad::constant(Tensor({2, 32}));
    auto f_blur = [&] {
        auto y = ad::blur3x3_reflect(x, k);
        return ad::sq_diff_mean_rows(ad::reshape(y, {2, 32}), target);
    };
    CHECK(max_rel_grad_err(f_blur, {x}) < 1e-6);

    auto t2 = ad::constant(Tensor({2, 2 * 8 * 8}));
    auto f_up = [&] {
        auto y = ad::upsample_nearest2x(x);
        return ad::sq_diff_mean_rows(ad::reshape(y, {2, 2 * 8 * 8}), t2);
    };
    CHECK(max_rel_grad_err(f_up, {x}) < 1e-6);

    auto t3 = ad::constant(Tensor({2, 2}));
    auto f_pool = [&] { return ad::sq_diff_mean_rows(ad::global_avg_pool(x), t3); };
    CHECK(max_rel_grad_err(f_pool, {x}) < 1e-6);
}

TEST_CASE("backward requires scalar root") {
    auto x = ad::leaf(randn({2, 2}, 81));
    auto y = ad::relu(x);
    CHECK_THROWS_AS(ad::backward(y), std::invalid_argument);
}

TEST_CASE("detach blocks gradient flow") {
    auto x = ad::leaf(randn({2, 3}, 91));
    auto target = ad::constant(Tensor({2, 3}));
    auto loss = ad::sq_diff_mean_rows(ad::detach(x), target);
    ad::zero_grads({x});
    ad::backward(loss);
    for (double g : x->grad.v) CHECK(g == 0.0);
}
