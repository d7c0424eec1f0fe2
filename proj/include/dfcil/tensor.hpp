#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dfcil/rng.hpp"

namespace dfcil {

// Dense row-major tensor of doubles. The whole library computes in double:
// training at desk scale stays fast enough and gradient checks against
// central finite differences are meaningful.
class Tensor {
public:
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel_of(shape), 0.0); }
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)) { v.assign(numel_of(shape), fill); }
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {}

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double x) { return Tensor(std::move(s), x); }
    static Tensor randn(std::vector<int> s, Rng& rng, double std = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = rng.normal(0.0, std);
        return t;
    }

    size_t numel() const { return v.size(); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    std::string shape_str() const;
};

bool all_finite(const Tensor& t);

// C[M x N] += A[M x K] * B[K x N], row-major. The mkn loop order streams B and
// C rows so the inner loop auto-vectorizes.
void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N);
// C[M x N] += A[M x K] * B[N x K]^T
void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N);
// C[M x N] += A[K x M]^T * B[K x N]
void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N);

// FNV-1a over raw tensor bytes; used for bitwise immutability checks.
uint64_t tensor_hash(const Tensor& t);
uint64_t fnv1a(const void* data, size_t bytes, uint64_t h = 0xcbf29ce484222325ull);

}  // namespace dfcil
