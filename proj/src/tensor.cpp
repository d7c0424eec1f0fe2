#include "dfcil/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace dfcil {

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool all_finite(const Tensor& t) {
    for (double x : t.v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        double* crow = C + static_cast<size_t>(m) * N;
        const double* arow = A + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const double a = arow[k];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* arow = A + static_cast<size_t>(m) * K;
        double* crow = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* brow = B + static_cast<size_t>(n) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[n] += acc;
        }
    }
}

void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int k = 0; k < K; ++k) {
        const double* arow = A + static_cast<size_t>(k) * M;
        const double* brow = B + static_cast<size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const double a = arow[m];
            if (a == 0.0) continue;
            double* crow = C + static_cast<size_t>(m) * N;
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

uint64_t fnv1a(const void* data, size_t bytes, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t tensor_hash(const Tensor& t) {
    return fnv1a(t.v.data(), t.v.size() * sizeof(double));
}

}  // namespace dfcil
