#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dfcil/model.hpp"
#include "dfcil/rng.hpp"

namespace testsup {

using namespace dfcil;

// Central finite differences against the analytic gradient. f rebuilds the
// loss graph from the same parameter nodes on every call; returns the max
// relative error over sampled coordinates.
inline double max_rel_grad_err(const std::function<ad::Var()>& f,
                               const std::vector<ad::Var>& params, int max_coords_per_param = 40,
                               double h = 1e-5, uint64_t seed = 99) {
    auto root = f();
    ad::zero_grads(params);
    ad::backward(root);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(p->grad);

    Rng rng(seed);
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const size_t n = p->val.numel();
        std::vector<size_t> coords;
        if (static_cast<int>(n) <= max_coords_per_param) {
            for (size_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.below(n));
        }
        for (size_t c : coords) {
            const double saved = p->val.v[c];
            const double step = h * std::max(1.0, std::fabs(saved));
            p->val.v[c] = saved + step;
            const double fp = f()->val.v[0];
            p->val.v[c] = saved - step;
            const double fm = f()->val.v[0];
            p->val.v[c] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = grads[pi].numel() ? grads[pi].v[c] : 0.0;
            const double err = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Tiny classifiers for loss-level tests (feature dim 8, no normalization
// layers so train/eval behavior coincides).
inline model::IncrementalClassifier make_mlp_classifier(const std::vector<std::vector<int>>& tasks,
                                                        uint64_t seed = 7,
                                                        model::ImageDims dims = {1, 4, 4}) {
    model::IncrementalClassifier m(model::BackboneKind::tiny_mlp, dims, seed);
    uint64_t s = seed;
    for (const auto& t : tasks) m.grow_heads(t, ++s);
    return m;
}

inline model::IncrementalClassifier make_conv_classifier(const std::vector<std::vector<int>>& tasks,
                                                         uint64_t seed = 7, int width = 2,
                                                         model::ImageDims dims = {3, 8, 8}) {
    model::IncrementalClassifier m(model::BackboneKind::small_conv, dims, seed, width);
    uint64_t s = seed;
    for (const auto& t : tasks) m.grow_heads(t, ++s);
    return m;
}

inline Tensor random_images(int batch, model::ImageDims dims, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn({batch, dims.channels, dims.height, dims.width}, rng, scale);
}

// Independent oracle: information entropy of a distribution, natural log.
inline double entropy_oracle(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0.0) h -= x * std::log(x);
    }
    return h;
}

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.numel(); ++i) {
        if (a.v[i] != b.v[i]) return false;
    }
    return true;
}

}  // namespace testsup
