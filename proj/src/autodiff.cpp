#include "dfcil/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dfcil::ad {

namespace {

Var make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>(std::move(v));
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->needs_grad) {
            n->needs_grad = true;
            break;
        }
    }
    if (n->needs_grad) n->backfn = std::move(fn);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->val.shape_str() +
                                    " vs " + b->val.shape_str());
    }
}

// Reflect index into [0, n). Only single-step reflection is needed for 3x3.
inline int reflect(int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

// Column block for one image inside a [C*kh*kw x row_stride] matrix; the
// block starts at `cols` and spans OH*OW of each row.
void im2col_strided(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                    int OH, int OW, double* cols, size_t row_stride) {
    for (int c = 0; c < C; ++c) {
        const double* xc = x + static_cast<size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                double* row = cols + (static_cast<size_t>(c) * kh * kw + i * kw + j) * row_stride;
                for (int oy = 0; oy < OH; ++oy) {
                    const int y = oy * stride + i - pad;
                    double* dst = row + static_cast<size_t>(oy) * OW;
                    if (y < 0 || y >= H) {
                        std::fill(dst, dst + OW, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<size_t>(y) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int xcoord = ox * stride + j - pad;
                        dst[ox] = (xcoord >= 0 && xcoord < W) ? src[xcoord] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add_strided(const double* cols, int C, int H, int W, int kh, int kw, int stride,
                        int pad, int OH, int OW, size_t row_stride, double* dx) {
    for (int c = 0; c < C; ++c) {
        double* xc = dx + static_cast<size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const double* row =
                    cols + (static_cast<size_t>(c) * kh * kw + i * kw + j) * row_stride;
                for (int oy = 0; oy < OH; ++oy) {
                    const int y = oy * stride + i - pad;
                    if (y < 0 || y >= H) continue;
                    const double* src = row + static_cast<size_t>(oy) * OW;
                    double* dst = xc + static_cast<size_t>(y) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int xcoord = ox * stride + j - pad;
                        if (xcoord >= 0 && xcoord < W) dst[xcoord] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>(std::move(v));
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

void backward(const Var& root) {
    if (root->val.numel() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got " + root->val.shape_str());
    }
    // Iterative post-order DFS over nodes that need gradient.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    if (root->needs_grad) stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        bool descended = false;
        while (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(node);
        stack.pop_back();
    }
    root->ensure_grad();
    root->grad.fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn && n->grad.numel() == n->val.numel()) n->backfn(*n);
    }
}

void zero_grads(const std::vector<Var>& vars) {
    for (const auto& v : vars) {
        v->ensure_grad();
        v->zero_grad();
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = a->val.v[i] + b->val.v[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        for (int side = 0; side < 2; ++side) {
            auto& p = n.parents[side];
            if (!p->needs_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = a->val.v[i] - b->val.v[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad.v[i] += n.grad.v[i];
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pb->grad.v[i] -= n.grad.v[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = a->val.v[i] * b->val.v[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad.v[i] += n.grad.v[i] * pb->val.v[i];
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pb->grad.v[i] += n.grad.v[i] * pa->val.v[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = a->val.v[i] * s;
    return make(std::move(out), {a}, [s](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i] * s;
    });
}

Var relu(const Var& a) {
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = a->val.v[i] > 0.0 ? a->val.v[i] : 0.0;
    return make(std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            if (p->val.v[i] > 0.0) p->grad.v[i] += n.grad.v[i];
        }
    });
}

Var leaky_relu(const Var& a, double slope) {
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = a->val.v[i] > 0.0 ? a->val.v[i] : slope * a->val.v[i];
    }
    return make(std::move(out), {a}, [slope](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            p->grad.v[i] += n.grad.v[i] * (p->val.v[i] > 0.0 ? 1.0 : slope);
        }
    });
}

Var tanh_op(const Var& a) {
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.v[i] = std::tanh(a->val.v[i]);
    return make(std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            p->grad.v[i] += n.grad.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
        }
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a->val.numel()) {
        throw std::invalid_argument("reshape: size mismatch");
    }
    Tensor out(std::move(shape), a->val.v);
    return make(std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) p->grad.v[i] += n.grad.v[i];
    });
}

Var detach(const Var& a) { return constant(a->val); }

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
    if (terms.empty() || terms.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: terms/weights size mismatch");
    }
    double acc = 0.0;
    for (size_t i = 0; i < terms.size(); ++i) {
        if (terms[i]->val.numel() != 1) throw std::invalid_argument("weighted_sum: non-scalar term");
        acc += weights[i] * terms[i]->val.v[0];
    }
    Tensor out({1});
    out.v[0] = acc;
    return make(std::move(out), terms, [weights](Node& n) {
        for (size_t i = 0; i < n.parents.size(); ++i) {
            auto& p = n.parents[i];
            if (!p->needs_grad) continue;
            p->ensure_grad();
            p->grad.v[0] += weights[i] * n.grad.v[0];
        }
    });
}

Var linear(const Var& x, const Var& W, const Var& b) {
    if (x->val.ndim() != 2 || W->val.ndim() != 2 || x->val.dim(1) != W->val.dim(1)) {
        throw std::invalid_argument("linear: expected x[B x I] and W[O x I], got " +
                                    x->val.shape_str() + " and " + W->val.shape_str());
    }
    const int B = x->val.dim(0), I = x->val.dim(1), O = W->val.dim(0);
    const bool has_bias = b && b->val.numel() > 0;
    Tensor out({B, O});
    gemm_nt(x->val.data(), W->val.data(), out.data(), B, I, O);
    if (has_bias) {
        for (int r = 0; r < B; ++r) {
            double* row = out.data() + static_cast<size_t>(r) * O;
            for (int o = 0; o < O; ++o) row[o] += b->val.v[o];
        }
    }
    std::vector<Var> parents = {x, W};
    if (has_bias) parents.push_back(b);
    return make(std::move(out), std::move(parents), [B, I, O, has_bias](Node& n) {
        auto& px = n.parents[0];
        auto& pw = n.parents[1];
        if (px->needs_grad) {
            px->ensure_grad();
            gemm_nn(n.grad.data(), pw->val.data(), px->grad.data(), B, O, I);
        }
        if (pw->needs_grad) {
            pw->ensure_grad();
            gemm_tn(n.grad.data(), px->val.data(), pw->grad.data(), O, B, I);
        }
        if (has_bias && n.parents[2]->needs_grad) {
            auto& pb = n.parents[2];
            pb->ensure_grad();
            for (int r = 0; r < B; ++r) {
                const double* row = n.grad.data() + static_cast<size_t>(r) * O;
                for (int o = 0; o < O; ++o) pb->grad.v[o] += row[o];
            }
        }
    });
}

Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad) {
    if (x->val.ndim() != 4 || W->val.ndim() != 4 || x->val.dim(1) != W->val.dim(1)) {
        throw std::invalid_argument("conv2d: expected x[B,C,H,W] and W[O,C,kh,kw], got " +
                                    x->val.shape_str() + " and " + W->val.shape_str());
    }
    const int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), Wd = x->val.dim(3);
    const int O = W->val.dim(0), kh = W->val.dim(2), kw = W->val.dim(3);
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (Wd + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: output would be empty");
    const int K = C * kh * kw;
    const int N = OH * OW;
    const bool has_bias = b && b->val.numel() > 0;

    // Per-image im2col + GEMM keeps every tile cache-resident.
    Tensor out({B, O, OH, OW});
    std::vector<double> cols(static_cast<size_t>(K) * N);
    for (int bi = 0; bi < B; ++bi) {
        im2col_strided(x->val.data() + static_cast<size_t>(bi) * C * H * Wd, C, H, Wd, kh, kw,
                       stride, pad, OH, OW, cols.data(), static_cast<size_t>(N));
        double* ob = out.data() + static_cast<size_t>(bi) * O * N;
        gemm_nn(W->val.data(), cols.data(), ob, O, K, N);
        if (has_bias) {
            for (int o = 0; o < O; ++o) {
                double* orow = ob + static_cast<size_t>(o) * N;
                const double bias = b->val.v[o];
                for (int i = 0; i < N; ++i) orow[i] += bias;
            }
        }
    }

    std::vector<Var> parents = {x, W};
    if (has_bias) parents.push_back(b);
    return make(std::move(out), std::move(parents),
                [B, C, H, Wd, O, kh, kw, stride, pad, OH, OW, K, N, has_bias](Node& n) {
                    auto& px = n.parents[0];
                    auto& pw = n.parents[1];
                    const bool need_x = px->needs_grad;
                    const bool need_w = pw->needs_grad;
                    if (need_x) px->ensure_grad();
                    if (need_w) pw->ensure_grad();
                    std::vector<double> cols(static_cast<size_t>(K) * N);
                    std::vector<double> dcols(need_x ? static_cast<size_t>(K) * N : 0);
                    for (int bi = 0; bi < B; ++bi) {
                        const double* dyb = n.grad.data() + static_cast<size_t>(bi) * O * N;
                        if (need_w) {
                            im2col_strided(px->val.data() + static_cast<size_t>(bi) * C * H * Wd, C,
                                           H, Wd, kh, kw, stride, pad, OH, OW, cols.data(),
                                           static_cast<size_t>(N));
                            gemm_nt(dyb, cols.data(), pw->grad.data(), O, N, K);
                        }
                        if (need_x) {
                            std::fill(dcols.begin(), dcols.end(), 0.0);
                            gemm_tn(pw->val.data(), dyb, dcols.data(), K, O, N);
                            col2im_add_strided(dcols.data(), C, H, Wd, kh, kw, stride, pad, OH, OW,
                                               static_cast<size_t>(N),
                                               px->grad.data() + static_cast<size_t>(bi) * C * H * Wd);
                        }
                    }
                    if (has_bias && n.parents[2]->needs_grad) {
                        auto& pb = n.parents[2];
                        pb->ensure_grad();
                        for (int bi = 0; bi < B; ++bi) {
                            const double* dyb = n.grad.data() + static_cast<size_t>(bi) * O * N;
                            for (int o = 0; o < O; ++o) {
                                const double* row = dyb + static_cast<size_t>(o) * N;
                                double acc = 0.0;
                                for (int i = 0; i < N; ++i) acc += row[i];
                                pb->grad.v[o] += acc;
                            }
                        }
                    }
                });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* running_mean,
                Tensor* running_var, bool use_batch_stats, bool update_running, double momentum,
                double eps) {
    if (x->val.ndim() != 4) throw std::invalid_argument("batchnorm2d: expected [B,C,H,W]");
    const int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    const int HW = H * W;
    const size_t plane = static_cast<size_t>(HW);
    const double N = static_cast<double>(B) * HW;

    std::vector<double> mean(C, 0.0), var(C, 0.0);
    if (use_batch_stats) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int bi = 0; bi < B; ++bi) {
                const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * plane;
                for (int i = 0; i < HW; ++i) acc += p[i];
            }
            mean[c] = acc / N;
            double vacc = 0.0;
            for (int bi = 0; bi < B; ++bi) {
                const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * plane;
                for (int i = 0; i < HW; ++i) {
                    const double d = p[i] - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc / N;  // biased, used for normalization
        }
        if (update_running) {
            const double unbias = N > 1.0 ? N / (N - 1.0) : 1.0;
            for (int c = 0; c < C; ++c) {
                running_mean->v[c] = (1.0 - momentum) * running_mean->v[c] + momentum * mean[c];
                running_var->v[c] =
                    (1.0 - momentum) * running_var->v[c] + momentum * var[c] * unbias;
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running_mean->v[c];
            var[c] = running_var->v[c];
        }
    }

    std::vector<double> invstd(C);
    for (int c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);

    Tensor out(x->val.shape);
    for (int bi = 0; bi < B; ++bi) {
        for (int c = 0; c < C; ++c) {
            const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * plane;
            double* o = out.data() + (static_cast<size_t>(bi) * C + c) * plane;
            const double g = gamma->val.v[c], be = beta->val.v[c], m = mean[c], is = invstd[c];
            for (int i = 0; i < HW; ++i) o[i] = g * (p[i] - m) * is + be;
        }
    }

    return make(std::move(out), {x, gamma, beta},
                [B, C, HW, N, mean, invstd, use_batch_stats](Node& n) {
                    auto& px = n.parents[0];
                    auto& pg = n.parents[1];
                    auto& pb = n.parents[2];
                    const size_t plane = static_cast<size_t>(HW);
                    // Per-channel reductions of dy and dy * xhat.
                    std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
                    for (int bi = 0; bi < B; ++bi) {
                        for (int c = 0; c < C; ++c) {
                            const double* dy = n.grad.data() + (static_cast<size_t>(bi) * C + c) * plane;
                            const double* xv = px->val.data() + (static_cast<size_t>(bi) * C + c) * plane;
                            const double m = mean[c], is = invstd[c];
                            double a = 0.0, b2 = 0.0;
                            for (int i = 0; i < HW; ++i) {
                                a += dy[i];
                                b2 += dy[i] * (xv[i] - m) * is;
                            }
                            sum_dy[c] += a;
                            sum_dy_xhat[c] += b2;
                        }
                    }
                    if (pg->needs_grad) {
                        pg->ensure_grad();
                        for (int c = 0; c < C; ++c) pg->grad.v[c] += sum_dy_xhat[c];
                    }
                    if (pb->needs_grad) {
                        pb->ensure_grad();
                        for (int c = 0; c < C; ++c) pb->grad.v[c] += sum_dy[c];
                    }
                    if (!px->needs_grad) return;
                    px->ensure_grad();
                    for (int bi = 0; bi < B; ++bi) {
                        for (int c = 0; c < C; ++c) {
                            const double* dy = n.grad.data() + (static_cast<size_t>(bi) * C + c) * plane;
                            const double* xv = px->val.data() + (static_cast<size_t>(bi) * C + c) * plane;
                            double* dx = px->grad.data() + (static_cast<size_t>(bi) * C + c) * plane;
                            const double g = pg->val.v[c], m = mean[c], is = invstd[c];
                            if (use_batch_stats) {
                                const double mdy = sum_dy[c] / N;
                                const double mdyx = sum_dy_xhat[c] / N;
                                for (int i = 0; i < HW; ++i) {
                                    const double xhat = (xv[i] - m) * is;
                                    dx[i] += g * is * (dy[i] - mdy - xhat * mdyx);
                                }
                            } else {
                                for (int i = 0; i < HW; ++i) dx[i] += g * is * dy[i];
                            }
                        }
                    }
                });
}

Var global_avg_pool(const Var& x) {
    if (x->val.ndim() != 4) throw std::invalid_argument("global_avg_pool: expected [B,C,H,W]");
    const int B = x->val.dim(0), C = x->val.dim(1), HW = x->val.dim(2) * x->val.dim(3);
    Tensor out({B, C});
    for (int bi = 0; bi < B; ++bi) {
        for (int c = 0; c < C; ++c) {
            const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * HW;
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += p[i];
            out.v[static_cast<size_t>(bi) * C + c] = acc / HW;
        }
    }
    return make(std::move(out), {x}, [B, C, HW](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int bi = 0; bi < B; ++bi) {
            for (int c = 0; c < C; ++c) {
                const double g = n.grad.v[static_cast<size_t>(bi) * C + c] / HW;
                double* dx = p->grad.data() + (static_cast<size_t>(bi) * C + c) * HW;
                for (int i = 0; i < HW; ++i) dx[i] += g;
            }
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    if (x->val.ndim() != 4) throw std::invalid_argument("upsample_nearest2x: expected [B,C,H,W]");
    const int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.data() + static_cast<size_t>(bc) * H * W;
        double* dst = out.data() + static_cast<size_t>(bc) * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y) {
            const double* srow = src + static_cast<size_t>(y / 2) * W;
            double* drow = dst + static_cast<size_t>(y) * 2 * W;
            for (int xx = 0; xx < 2 * W; ++xx) drow[xx] = srow[xx / 2];
        }
    }
    return make(std::move(out), {x}, [B, C, H, W](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int bc = 0; bc < B * C; ++bc) {
            double* dx = p->grad.data() + static_cast<size_t>(bc) * H * W;
            const double* dy = n.grad.data() + static_cast<size_t>(bc) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y) {
                double* drow = dx + static_cast<size_t>(y / 2) * W;
                const double* srow = dy + static_cast<size_t>(y) * 2 * W;
                for (int xx = 0; xx < 2 * W; ++xx) drow[xx / 2] += srow[xx];
            }
        }
    });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    const int B = xs[0]->val.dim(0);
    int total = 0;
    for (const auto& x : xs) {
        if (x->val.ndim() != 2 || x->val.dim(0) != B) {
            throw std::invalid_argument("concat_cols: inconsistent shapes");
        }
        total += x->val.dim(1);
    }
    Tensor out({B, total});
    std::vector<int> offsets(xs.size());
    int off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        offsets[i] = off;
        const int K = xs[i]->val.dim(1);
        for (int r = 0; r < B; ++r) {
            std::copy_n(xs[i]->val.data() + static_cast<size_t>(r) * K, K,
                        out.data() + static_cast<size_t>(r) * total + off);
        }
        off += K;
    }
    return make(std::move(out), xs, [B, total, offsets](Node& n) {
        for (size_t i = 0; i < n.parents.size(); ++i) {
            auto& p = n.parents[i];
            if (!p->needs_grad) continue;
            p->ensure_grad();
            const int K = p->val.dim(1);
            for (int r = 0; r < B; ++r) {
                const double* src = n.grad.data() + static_cast<size_t>(r) * total + offsets[i];
                double* dst = p->grad.data() + static_cast<size_t>(r) * K;
                for (int k = 0; k < K; ++k) dst[k] += src[k];
            }
        }
    });
}

Var concat_rows(const Var& a, const Var& b) {
    if (a->val.ndim() != b->val.ndim()) throw std::invalid_argument("concat_rows: rank mismatch");
    for (int i = 1; i < a->val.ndim(); ++i) {
        if (a->val.dim(i) != b->val.dim(i)) {
            throw std::invalid_argument("concat_rows: trailing dims differ");
        }
    }
    std::vector<int> shape = a->val.shape;
    shape[0] = a->val.dim(0) + b->val.dim(0);
    Tensor out(std::move(shape));
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.numel());
    const size_t na = a->val.numel();
    return make(std::move(out), {a, b}, [na](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < na; ++i) pa->grad.v[i] += n.grad.v[i];
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < pb->val.numel(); ++i) pb->grad.v[i] += n.grad.v[na + i];
        }
    });
}

Var slice_rows(const Var& x, int row0, int row1) {
    if (row0 < 0 || row1 > x->val.dim(0) || row0 >= row1) {
        throw std::invalid_argument("slice_rows: bad range [" + std::to_string(row0) + "," +
                                    std::to_string(row1) + ") for dim0 " +
                                    std::to_string(x->val.dim(0)));
    }
    std::vector<int> shape = x->val.shape;
    shape[0] = row1 - row0;
    const size_t stride = x->val.numel() / static_cast<size_t>(x->val.dim(0));
    Tensor out(std::move(shape));
    std::copy_n(x->val.data() + static_cast<size_t>(row0) * stride, out.numel(), out.data());
    return make(std::move(out), {x}, [row0, stride](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        double* dst = p->grad.data() + static_cast<size_t>(row0) * stride;
        for (size_t i = 0; i < n.grad.numel(); ++i) dst[i] += n.grad.v[i];
    });
}

Var log_softmax_rows(const Var& x) {
    if (x->val.ndim() != 2) throw std::invalid_argument("log_softmax_rows: expected [B x K]");
    const int B = x->val.dim(0), K = x->val.dim(1);
    Tensor out({B, K});
    for (int r = 0; r < B; ++r) {
        const double* row = x->val.data() + static_cast<size_t>(r) * K;
        double* o = out.data() + static_cast<size_t>(r) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
        const double lz = m + std::log(z);
        for (int k = 0; k < K; ++k) o[k] = row[k] - lz;
    }
    return make(std::move(out), {x}, [B, K](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < B; ++r) {
            const double* dy = n.grad.data() + static_cast<size_t>(r) * K;
            const double* lp = n.val.data() + static_cast<size_t>(r) * K;
            double* dx = p->grad.data() + static_cast<size_t>(r) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += dy[k];
            for (int k = 0; k < K; ++k) dx[k] += dy[k] - std::exp(lp[k]) * s;
        }
    });
}

Var softmax_rows(const Var& x) {
    if (x->val.ndim() != 2) throw std::invalid_argument("softmax_rows: expected [B x K]");
    const int B = x->val.dim(0), K = x->val.dim(1);
    Tensor out({B, K});
    for (int r = 0; r < B; ++r) {
        const double* row = x->val.data() + static_cast<size_t>(r) * K;
        double* o = out.data() + static_cast<size_t>(r) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            o[k] = std::exp(row[k] - m);
            z += o[k];
        }
        for (int k = 0; k < K; ++k) o[k] /= z;
    }
    return make(std::move(out), {x}, [B, K](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < B; ++r) {
            const double* dy = n.grad.data() + static_cast<size_t>(r) * K;
            const double* pv = n.val.data() + static_cast<size_t>(r) * K;
            double* dx = p->grad.data() + static_cast<size_t>(r) * K;
            double dot = 0.0;
            for (int k = 0; k < K; ++k) dot += dy[k] * pv[k];
            for (int k = 0; k < K; ++k) dx[k] += pv[k] * (dy[k] - dot);
        }
    });
}

Var nll_rows(const Var& logp, const std::vector<int>& labels, const std::vector<double>& weights) {
    const int B = logp->val.dim(0), K = logp->val.dim(1);
    if (static_cast<int>(labels.size()) != B) {
        throw std::invalid_argument("nll_rows: labels size mismatch");
    }
    if (!weights.empty() && static_cast<int>(weights.size()) != B) {
        throw std::invalid_argument("nll_rows: weights size mismatch");
    }
    double acc = 0.0;
    for (int r = 0; r < B; ++r) {
        if (labels[r] < 0 || labels[r] >= K) {
            throw std::invalid_argument("nll_rows: label " + std::to_string(labels[r]) +
                                        " out of range [0," + std::to_string(K) + ")");
        }
        const double w = weights.empty() ? 1.0 : weights[r];
        acc -= w * logp->val.v[static_cast<size_t>(r) * K + labels[r]];
    }
    Tensor out({1});
    out.v[0] = acc / B;
    return make(std::move(out), {logp}, [B, K, labels, weights](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const double g = n.grad.v[0] / B;
        for (int r = 0; r < B; ++r) {
            const double w = weights.empty() ? 1.0 : weights[r];
            p->grad.v[static_cast<size_t>(r) * K + labels[r]] -= w * g;
        }
    });
}

Var kl_const_target(const Var& logq, const Tensor& target_probs) {
    if (!logq->val.same_shape(target_probs)) {
        throw std::invalid_argument("kl_const_target: shape mismatch");
    }
    const int B = logq->val.dim(0), K = logq->val.dim(1);
    double acc = 0.0;
    for (int r = 0; r < B; ++r) {
        for (int k = 0; k < K; ++k) {
            const double pv = target_probs.v[static_cast<size_t>(r) * K + k];
            if (pv > 0.0) {
                acc += pv * (std::log(pv) - logq->val.v[static_cast<size_t>(r) * K + k]);
            }
        }
    }
    Tensor out({1});
    out.v[0] = acc / B;
    return make(std::move(out), {logq}, [B, K, target_probs](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const double g = n.grad.v[0] / B;
        for (size_t i = 0; i < p->grad.numel(); ++i) p->grad.v[i] -= g * target_probs.v[i];
    });
}

Var mean_rows(const Var& x) {
    const int B = x->val.dim(0), K = x->val.dim(1);
    Tensor out({K});
    for (int r = 0; r < B; ++r) {
        for (int k = 0; k < K; ++k) out.v[k] += x->val.v[static_cast<size_t>(r) * K + k];
    }
    for (int k = 0; k < K; ++k) out.v[k] /= B;
    return make(std::move(out), {x}, [B, K](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < B; ++r) {
            for (int k = 0; k < K; ++k) {
                p->grad.v[static_cast<size_t>(r) * K + k] += n.grad.v[k] / B;
            }
        }
    });
}

Var neg_entropy(const Var& p) {
    double acc = 0.0;
    for (double x : p->val.v) {
        if (x > 0.0) acc += x * std::log(x);
    }
    Tensor out({1});
    out.v[0] = acc;
    return make(std::move(out), {p}, [](Node& n) {
        auto& pp = n.parents[0];
        if (!pp->needs_grad) return;
        pp->ensure_grad();
        const double g = n.grad.v[0];
        for (size_t i = 0; i < pp->val.numel(); ++i) {
            const double x = pp->val.v[i];
            if (x > 0.0) pp->grad.v[i] += g * (std::log(x) + 1.0);
        }
    });
}

Var sq_diff_mean_rows(const Var& a, const Var& b) {
    check_same_shape(a, b, "sq_diff_mean_rows");
    const int B = a->val.dim(0);
    double acc = 0.0;
    for (size_t i = 0; i < a->val.numel(); ++i) {
        const double d = a->val.v[i] - b->val.v[i];
        acc += d * d;
    }
    Tensor out({1});
    out.v[0] = acc / B;
    return make(std::move(out), {a, b}, [B](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        const double g = 2.0 * n.grad.v[0] / B;
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < pa->val.numel(); ++i) {
                pa->grad.v[i] += g * (pa->val.v[i] - pb->val.v[i]);
            }
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < pb->val.numel(); ++i) {
                pb->grad.v[i] -= g * (pa->val.v[i] - pb->val.v[i]);
            }
        }
    });
}

Var channel_mean_std(const Var& x, double eps) {
    if (x->val.ndim() != 4) throw std::invalid_argument("channel_mean_std: expected [B,C,H,W]");
    const int B = x->val.dim(0), C = x->val.dim(1), HW = x->val.dim(2) * x->val.dim(3);
    const double N = static_cast<double>(B) * HW;
    Tensor out({2, C});
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int bi = 0; bi < B; ++bi) {
            const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * HW;
            for (int i = 0; i < HW; ++i) acc += p[i];
        }
        const double m = acc / N;
        double vacc = 0.0;
        for (int bi = 0; bi < B; ++bi) {
            const double* p = x->val.data() + (static_cast<size_t>(bi) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                const double d = p[i] - m;
                vacc += d * d;
            }
        }
        out.v[c] = m;
        out.v[C + c] = std::sqrt(vacc / N + eps);
    }
    return make(std::move(out), {x}, [B, C, HW, N](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const double m = n.val.v[c];
            const double s = n.val.v[C + c];
            const double dmean = n.grad.v[c];
            const double dstd = n.grad.v[C + c];
            const double dvar = dstd / (2.0 * s);
            for (int bi = 0; bi < B; ++bi) {
                const double* xv = p->val.data() + (static_cast<size_t>(bi) * C + c) * HW;
                double* dx = p->grad.data() + (static_cast<size_t>(bi) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    dx[i] += dmean / N + dvar * 2.0 * (xv[i] - m) / N;
                }
            }
        }
    });
}

Var gaussian_kl_to_batch(const Var& stats, const std::vector<double>& ref_mean,
                         const std::vector<double>& ref_std) {
    const int C = stats->val.dim(1);
    if (static_cast<int>(ref_mean.size()) != C || static_cast<int>(ref_std.size()) != C) {
        throw std::invalid_argument("gaussian_kl_to_batch: channel count mismatch");
    }
    double acc = 0.0;
    for (int c = 0; c < C; ++c) {
        const double mu = ref_mean[c], sig = ref_std[c];
        const double mh = stats->val.v[c], sh = stats->val.v[C + c];
        if (sig <= 0.0 || sh <= 0.0) {
            throw std::invalid_argument("gaussian_kl_to_batch: nonpositive std at channel " +
                                        std::to_string(c));
        }
        const double d = mu - mh;
        acc += std::log(sh / sig) - 0.5 * (1.0 - (sig * sig + d * d) / (sh * sh));
    }
    Tensor out({1});
    out.v[0] = acc / C;
    return make(std::move(out), {stats}, [C, ref_mean, ref_std](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const double g = n.grad.v[0] / C;
        for (int c = 0; c < C; ++c) {
            const double mu = ref_mean[c], sig = ref_std[c];
            const double mh = p->val.v[c], sh = p->val.v[C + c];
            const double d = mu - mh;
            p->grad.v[c] += g * (mh - mu) / (sh * sh);
            p->grad.v[C + c] += g * (1.0 / sh - (sig * sig + d * d) / (sh * sh * sh));
        }
    });
}

Var blur3x3_reflect(const Var& x, const double kernel[9]) {
    if (x->val.ndim() != 4) throw std::invalid_argument("blur3x3_reflect: expected [B,C,H,W]");
    const int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    std::vector<double> k(kernel, kernel + 9);
    Tensor out(x->val.shape);
    for (int bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.data() + static_cast<size_t>(bc) * H * W;
        double* dst = out.data() + static_cast<size_t>(bc) * H * W;
        for (int y = 0; y < H; ++y) {
            for (int xx = 0; xx < W; ++xx) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = reflect(y + dy, H);
                    for (int dx = -1; dx <= 1; ++dx) {
                        acc += k[(dy + 1) * 3 + dx + 1] * src[yy * W + reflect(xx + dx, W)];
                    }
                }
                dst[y * W + xx] = acc;
            }
        }
    }
    return make(std::move(out), {x}, [B, C, H, W, k](Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int bc = 0; bc < B * C; ++bc) {
            const double* dy_ = n.grad.data() + static_cast<size_t>(bc) * H * W;
            double* dx_ = p->grad.data() + static_cast<size_t>(bc) * H * W;
            for (int y = 0; y < H; ++y) {
                for (int xx = 0; xx < W; ++xx) {
                    const double g = dy_[y * W + xx];
                    for (int dyk = -1; dyk <= 1; ++dyk) {
                        const int yy = reflect(y + dyk, H);
                        for (int dxk = -1; dxk <= 1; ++dxk) {
                            dx_[yy * W + reflect(xx + dxk, W)] += g * k[(dyk + 1) * 3 + dxk + 1];
                        }
                    }
                }
            }
        }
    });
}

}  // namespace dfcil::ad
