#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ske2grid/tensor.hpp"

namespace ske2grid::core {

namespace diag {
// Minimum |x| seen by relu since the last reset. Finite-difference checks use
// this to reject sample points sitting on the kink.
inline thread_local double relu_kink_margin = std::numeric_limits<double>::infinity();
inline void reset_relu_kink_margin() {
    relu_kink_margin = std::numeric_limits<double>::infinity();
}
}  // namespace diag

template <typename T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    auto res = Tensor<T>::create(a->shape, std::move(out));
    attach_tape(res, "add", {a, b}, [a, b](Tensor<T>* o) {
        return [a, b, o]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) b->grad[i] += o->grad[i];
            }
        };
    });
    return res;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    auto res = Tensor<T>::create(a->shape, std::move(out));
    attach_tape(res, "mul", {a, b}, [a, b](Tensor<T>* o) {
        return [a, b, o]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    a->grad[i] += o->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    b->grad[i] += o->grad[i] * a->data[i];
            }
        };
    });
    return res;
}

template <typename T>
TensorPtr<T> sum(const TensorPtr<T>& x) {
    T acc = T(0);
    for (T v : x->data) acc += v;
    auto res = Tensor<T>::create({1}, {acc});
    attach_tape(res, "sum", {x}, [x](Tensor<T>* o) {
        return [x, o]() {
            x->ensure_grad();
            const T g = o->grad[0];
            for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
        };
    });
    return res;
}

// Weighted sum against a constant weight vector; the standard scalarizer for
// gradient checks of non-scalar ops.
template <typename T>
TensorPtr<T> wsum(const TensorPtr<T>& x, std::vector<T> w) {
    if (w.size() != x->data.size())
        throw DimensionError("wsum: weight length mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x->data[i];
    auto res = Tensor<T>::create({1}, {acc});
    attach_tape(res, "wsum", {x}, [x, w = std::move(w)](Tensor<T>* o) {
        return [x, w, o]() {
            x->ensure_grad();
            const T g = o->grad[0];
            for (std::size_t i = 0; i < w.size(); ++i) x->grad[i] += g * w[i];
        };
    });
    return res;
}

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& x) {
    std::vector<T> out(x->data.size());
    double margin = diag::relu_kink_margin;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x->data[i];
        out[i] = v > T(0) ? v : T(0);
        const double a = std::abs(static_cast<double>(v));
        if (a < margin) margin = a;
    }
    diag::relu_kink_margin = margin;
    auto res = Tensor<T>::create(x->shape, std::move(out));
    attach_tape(res, "relu", {x}, [x](Tensor<T>* o) {
        return [x, o]() {
            x->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                if (x->data[i] > T(0)) x->grad[i] += o->grad[i];
        };
    });
    return res;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, std::vector<std::int64_t> new_shape) {
    if (shape_numel(new_shape) != x->numel())
        throw DimensionError("reshape: cannot view " + shape_str(x->shape) + " as " +
                             shape_str(new_shape));
    auto res = Tensor<T>::create(std::move(new_shape), x->data);
    attach_tape(res, "reshape", {x}, [x](Tensor<T>* o) {
        return [x, o]() {
            x->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i];
        };
    });
    return res;
}

// out[perm(idx)] = x[idx]; dims[i] names the source axis placed at output axis i.
template <typename T>
TensorPtr<T> permute(const TensorPtr<T>& x, const std::vector<std::int64_t>& dims) {
    const auto r = x->rank();
    if (static_cast<std::int64_t>(dims.size()) != r)
        throw DimensionError("permute: dims rank mismatch");
    std::vector<std::int64_t> out_shape(r);
    for (std::int64_t i = 0; i < r; ++i) out_shape[i] = x->shape[dims[i]];

    // Strides of the source tensor, re-ordered to output axis order.
    std::vector<std::int64_t> src_strides(r, 1);
    for (std::int64_t i = r - 2; i >= 0; --i)
        src_strides[i] = src_strides[i + 1] * x->shape[i + 1];
    std::vector<std::int64_t> step(r);
    for (std::int64_t i = 0; i < r; ++i) step[i] = src_strides[dims[i]];

    const std::int64_t n = x->numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        out[static_cast<std::size_t>(o)] = x->data[static_cast<std::size_t>(src)];
        for (std::int64_t ax = r - 1; ax >= 0; --ax) {
            src += step[ax];
            if (++idx[ax] < out_shape[ax]) break;
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }

    auto res = Tensor<T>::create(std::move(out_shape), std::move(out));
    attach_tape(res, "permute", {x}, [x, step, shape = res->shape, r](Tensor<T>* o) {
        return [x, step, shape, r, o]() {
            x->ensure_grad();
            std::vector<std::int64_t> idx(r, 0);
            std::int64_t src = 0;
            const std::int64_t n = o->numel();
            for (std::int64_t k = 0; k < n; ++k) {
                x->grad[static_cast<std::size_t>(src)] += o->grad[static_cast<std::size_t>(k)];
                for (std::int64_t ax = r - 1; ax >= 0; --ax) {
                    src += step[ax];
                    if (++idx[ax] < shape[ax]) break;
                    src -= step[ax] * shape[ax];
                    idx[ax] = 0;
                }
            }
        };
    });
    return res;
}

// a: (M,K)  b: (K,N)  ->  (M,N)
template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2)
        throw DimensionError("matmul: expects rank-2 operands");
    const std::int64_t M = a->shape[0], K = a->shape[1], N = b->shape[1];
    if (b->shape[0] != K)
        throw DimensionError("matmul: inner extents disagree, " + shape_str(a->shape) + " x " +
                             shape_str(b->shape));
    std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = a->data.data() + i * K;
        T* orow = out.data() + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b->data.data() + k * N;
            for (std::int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
    auto res = Tensor<T>::create({M, N}, std::move(out));
    attach_tape(res, "matmul", {a, b}, [a, b, M, K, N](Tensor<T>* o) {
        return [a, b, M, K, N, o]() {
            // grad_a = go . b^T ; grad_b = a^T . go
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < M; ++i) {
                    const T* go = o->grad.data() + i * N;
                    T* ga = a->grad.data() + i * K;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const T* brow = b->data.data() + k * N;
                        T acc = T(0);
                        for (std::int64_t j = 0; j < N; ++j) acc += go[j] * brow[j];
                        ga[k] += acc;
                    }
                }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < M; ++i) {
                    const T* arow = a->data.data() + i * K;
                    const T* go = o->grad.data() + i * N;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const T av = arow[k];
                        T* gb = b->grad.data() + k * N;
                        for (std::int64_t j = 0; j < N; ++j) gb[j] += av * go[j];
                    }
                }
            }
        };
    });
    return res;
}

// Same-padded square convolution.
// x: (B,Cin,H,W)  k: (Cout,Cin,K,K) with K odd  bias: (Cout)  ->  (B,Cout,H,W)
template <typename T>
TensorPtr<T> conv2d_same(const TensorPtr<T>& x, const TensorPtr<T>& k, const TensorPtr<T>& bias) {
    if (x->rank() != 4 || k->rank() != 4)
        throw DimensionError("conv2d_same: expects x rank 4 and kernel rank 4");
    const std::int64_t B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const std::int64_t O = k->shape[0], K = k->shape[2];
    if (k->shape[1] != C)
        throw DimensionError("conv2d_same: channel mismatch");
    if (k->shape[3] != K)
        throw DimensionError("conv2d_same: kernel must be square");
    if (K % 2 == 0) throw ConfigError("conv2d_same: kernel size must be odd");
    if (bias->numel() != O) throw DimensionError("conv2d_same: bias length mismatch");
    const std::int64_t P = (K - 1) / 2;
    const std::int64_t HW = H * W;

    std::vector<T> out(static_cast<std::size_t>(B * O * HW));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < O; ++o) {
            T* op = out.data() + (b * O + o) * HW;
            const T bv = bias->data[static_cast<std::size_t>(o)];
            for (std::int64_t i = 0; i < HW; ++i) op[i] = bv;
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xp = x->data.data() + (b * C + c) * HW;
                const T* kp = k->data.data() + (o * C + c) * K * K;
                for (std::int64_t m = 0; m < K; ++m) {
                    const std::int64_t i0 = std::max<std::int64_t>(0, P - m);
                    const std::int64_t i1 = std::min<std::int64_t>(H, H + P - m);
                    for (std::int64_t n = 0; n < K; ++n) {
                        const T w = kp[m * K + n];
                        const std::int64_t j0 = std::max<std::int64_t>(0, P - n);
                        const std::int64_t j1 = std::min<std::int64_t>(W, W + P - n);
                        for (std::int64_t i = i0; i < i1; ++i) {
                            const T* xrow = xp + (i + m - P) * W + (n - P);
                            T* orow = op + i * W;
                            for (std::int64_t j = j0; j < j1; ++j) orow[j] += w * xrow[j];
                        }
                    }
                }
            }
        }
    }

    auto res = Tensor<T>::create({B, O, H, W}, std::move(out));
    attach_tape(res, "conv2d_same", {x, k, bias}, [=](Tensor<T>* out_node) {
        return [=]() {
            const auto& go = out_node->grad;
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = go.data() + (b * O + o) * HW;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < HW; ++i) acc += gp[i];
                        bias->grad[static_cast<std::size_t>(o)] += acc;
                    }
            }
            if (k->requires_grad) {
                k->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = go.data() + (b * O + o) * HW;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const T* xp = x->data.data() + (b * C + c) * HW;
                            T* gk = k->grad.data() + (o * C + c) * K * K;
                            for (std::int64_t m = 0; m < K; ++m) {
                                const std::int64_t i0 = std::max<std::int64_t>(0, P - m);
                                const std::int64_t i1 = std::min<std::int64_t>(H, H + P - m);
                                for (std::int64_t n = 0; n < K; ++n) {
                                    const std::int64_t j0 = std::max<std::int64_t>(0, P - n);
                                    const std::int64_t j1 = std::min<std::int64_t>(W, W + P - n);
                                    T acc = T(0);
                                    for (std::int64_t i = i0; i < i1; ++i) {
                                        const T* xrow = xp + (i + m - P) * W + (n - P);
                                        const T* grow = gp + i * W;
                                        for (std::int64_t j = j0; j < j1; ++j)
                                            acc += grow[j] * xrow[j];
                                    }
                                    gk[m * K + n] += acc;
                                }
                            }
                        }
                    }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = go.data() + (b * O + o) * HW;
                        for (std::int64_t c = 0; c < C; ++c) {
                            T* gx = x->grad.data() + (b * C + c) * HW;
                            const T* kp = k->data.data() + (o * C + c) * K * K;
                            for (std::int64_t m = 0; m < K; ++m) {
                                const std::int64_t i0 = std::max<std::int64_t>(0, P - m);
                                const std::int64_t i1 = std::min<std::int64_t>(H, H + P - m);
                                for (std::int64_t n = 0; n < K; ++n) {
                                    const T w = kp[m * K + n];
                                    const std::int64_t j0 = std::max<std::int64_t>(0, P - n);
                                    const std::int64_t j1 = std::min<std::int64_t>(W, W + P - n);
                                    for (std::int64_t i = i0; i < i1; ++i) {
                                        T* gxrow = gx + (i + m - P) * W + (n - P);
                                        const T* grow = gp + i * W;
                                        for (std::int64_t j = j0; j < j1; ++j)
                                            gxrow[j] += w * grow[j];
                                    }
                                }
                            }
                        }
                    }
            }
        };
    });
    return res;
}

// 1-D convolution along T at every grid cell.
// x: (B,C,T,H,W)  k: (Cout,C,Kt) with Kt odd  ->  (B,Cout,T',H,W), T' = ceil(T/stride)
template <typename T>
TensorPtr<T> temporal_conv(const TensorPtr<T>& x, const TensorPtr<T>& k, std::int64_t stride) {
    if (x->rank() != 5 || k->rank() != 3)
        throw DimensionError("temporal_conv: expects x rank 5 and kernel rank 3");
    if (stride < 1) throw ConfigError("temporal_conv: stride must be >= 1");
    const std::int64_t B = x->shape[0], C = x->shape[1], Tn = x->shape[2], H = x->shape[3],
                       W = x->shape[4];
    const std::int64_t O = k->shape[0], Kt = k->shape[2];
    if (k->shape[1] != C) throw DimensionError("temporal_conv: channel mismatch");
    if (Kt % 2 == 0) throw ConfigError("temporal_conv: kernel size must be odd");
    const std::int64_t P = (Kt - 1) / 2;
    const std::int64_t To = (Tn - 1) / stride + 1;
    const std::int64_t HW = H * W;

    std::vector<T> out(static_cast<std::size_t>(B * O * To * HW), T(0));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t to = 0; to < To; ++to) {
                T* op = out.data() + ((b * O + o) * To + to) * HW;
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* kp = k->data.data() + (o * C + c) * Kt;
                    for (std::int64_t dt = 0; dt < Kt; ++dt) {
                        const std::int64_t ti = to * stride + dt - P;
                        if (ti < 0 || ti >= Tn) continue;
                        const T w = kp[dt];
                        const T* xp = x->data.data() + ((b * C + c) * Tn + ti) * HW;
                        for (std::int64_t s = 0; s < HW; ++s) op[s] += w * xp[s];
                    }
                }
            }

    auto res = Tensor<T>::create({B, O, To, H, W}, std::move(out));
    attach_tape(res, "temporal_conv", {x, k}, [=](Tensor<T>* out_node) {
        return [=]() {
            const auto& go = out_node->grad;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t o = 0; o < O; ++o)
                    for (std::int64_t to = 0; to < To; ++to) {
                        const T* gp = go.data() + ((b * O + o) * To + to) * HW;
                        for (std::int64_t c = 0; c < C; ++c) {
                            for (std::int64_t dt = 0; dt < Kt; ++dt) {
                                const std::int64_t ti = to * stride + dt - P;
                                if (ti < 0 || ti >= Tn) continue;
                                if (k->requires_grad) {
                                    k->ensure_grad();
                                    const T* xp =
                                        x->data.data() + ((b * C + c) * Tn + ti) * HW;
                                    T acc = T(0);
                                    for (std::int64_t s = 0; s < HW; ++s) acc += gp[s] * xp[s];
                                    k->grad[static_cast<std::size_t>((o * C + c) * Kt + dt)] +=
                                        acc;
                                }
                                if (x->requires_grad) {
                                    x->ensure_grad();
                                    const T w =
                                        k->data[static_cast<std::size_t>((o * C + c) * Kt + dt)];
                                    T* gx = x->grad.data() + ((b * C + c) * Tn + ti) * HW;
                                    for (std::int64_t s = 0; s < HW; ++s) gx[s] += w * gp[s];
                                }
                            }
                        }
                    }
        };
    });
    return res;
}

// Picks every stride-th frame; the residual path's counterpart of a strided
// temporal convolution.
template <typename T>
TensorPtr<T> temporal_subsample(const TensorPtr<T>& x, std::int64_t stride) {
    if (x->rank() != 5) throw DimensionError("temporal_subsample: expects rank 5");
    if (stride < 1) throw ConfigError("temporal_subsample: stride must be >= 1");
    if (stride == 1) return x;
    const std::int64_t B = x->shape[0], C = x->shape[1], Tn = x->shape[2], H = x->shape[3],
                       W = x->shape[4];
    const std::int64_t To = (Tn - 1) / stride + 1;
    const std::int64_t HW = H * W;
    std::vector<T> out(static_cast<std::size_t>(B * C * To * HW));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t to = 0; to < To; ++to) {
                const T* xp = x->data.data() + ((b * C + c) * Tn + to * stride) * HW;
                T* op = out.data() + ((b * C + c) * To + to) * HW;
                for (std::int64_t s = 0; s < HW; ++s) op[s] = xp[s];
            }
    auto res = Tensor<T>::create({B, C, To, H, W}, std::move(out));
    attach_tape(res, "temporal_subsample", {x}, [=](Tensor<T>* out_node) {
        return [=]() {
            x->ensure_grad();
            const auto& go = out_node->grad;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t to = 0; to < To; ++to) {
                        T* gx = x->grad.data() + ((b * C + c) * Tn + to * stride) * HW;
                        const T* gp = go.data() + ((b * C + c) * To + to) * HW;
                        for (std::int64_t s = 0; s < HW; ++s) gx[s] += gp[s];
                    }
        };
    });
    return res;
}

// Per-channel batch normalization over all non-channel axes (channel axis 1).
// Train mode uses batch statistics (biased variance) and folds them into the
// running buffers with momentum 0.9; eval mode reads the running buffers.
template <typename T>
TensorPtr<T> batchnorm(const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                       std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                       T momentum = T(0.9), T eps = T(1e-5)) {
    if (x->rank() < 2) throw DimensionError("batchnorm: expects rank >= 2");
    const std::int64_t B = x->shape[0], C = x->shape[1];
    std::int64_t inner = 1;
    for (std::int64_t i = 2; i < x->rank(); ++i) inner *= x->shape[i];
    if (gamma->numel() != C || beta->numel() != C ||
        static_cast<std::int64_t>(running_mean.size()) != C ||
        static_cast<std::int64_t>(running_var.size()) != C)
        throw DimensionError("batchnorm: per-channel parameter length mismatch");
    const std::int64_t m = B * inner;

    std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    if (training) {
        for (std::int64_t c = 0; c < C; ++c) {
            T mu = T(0);
            for (std::int64_t b = 0; b < B; ++b) {
                const T* xp = x->data.data() + (b * C + c) * inner;
                for (std::int64_t s = 0; s < inner; ++s) mu += xp[s];
            }
            mu /= static_cast<T>(m);
            T var = T(0);
            for (std::int64_t b = 0; b < B; ++b) {
                const T* xp = x->data.data() + (b * C + c) * inner;
                for (std::int64_t s = 0; s < inner; ++s) {
                    const T d = xp[s] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            mean[static_cast<std::size_t>(c)] = mu;
            invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
            running_mean[static_cast<std::size_t>(c)] =
                momentum * running_mean[static_cast<std::size_t>(c)] + (T(1) - momentum) * mu;
            running_var[static_cast<std::size_t>(c)] =
                momentum * running_var[static_cast<std::size_t>(c)] + (T(1) - momentum) * var;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
            invstd[static_cast<std::size_t>(c)] =
                T(1) / std::sqrt(running_var[static_cast<std::size_t>(c)] + eps);
        }
    }

    std::vector<T> out(x->data.size());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const T mu = mean[static_cast<std::size_t>(c)];
            const T is = invstd[static_cast<std::size_t>(c)];
            const T g = gamma->data[static_cast<std::size_t>(c)];
            const T bt = beta->data[static_cast<std::size_t>(c)];
            const T* xp = x->data.data() + (b * C + c) * inner;
            T* op = out.data() + (b * C + c) * inner;
            for (std::int64_t s = 0; s < inner; ++s) op[s] = g * (xp[s] - mu) * is + bt;
        }

    auto res = Tensor<T>::create(x->shape, std::move(out));
    attach_tape(res, "batchnorm", {x, gamma, beta},
                [=, mean = std::move(mean), invstd = std::move(invstd)](Tensor<T>* out_node) {
        return [=]() {
            const auto& go = out_node->grad;
            for (std::int64_t c = 0; c < C; ++c) {
                const T mu = mean[static_cast<std::size_t>(c)];
                const T is = invstd[static_cast<std::size_t>(c)];
                const T g = gamma->data[static_cast<std::size_t>(c)];
                // Channel-wise reductions of dy and dy*xhat.
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* xp = x->data.data() + (b * C + c) * inner;
                    const T* gp = go.data() + (b * C + c) * inner;
                    for (std::int64_t s = 0; s < inner; ++s) {
                        sum_dy += gp[s];
                        sum_dy_xhat += gp[s] * (xp[s] - mu) * is;
                    }
                }
                if (gamma->requires_grad) {
                    gamma->ensure_grad();
                    gamma->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
                }
                if (beta->requires_grad) {
                    beta->ensure_grad();
                    beta->grad[static_cast<std::size_t>(c)] += sum_dy;
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    if (training) {
                        const T inv_m = T(1) / static_cast<T>(m);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* xp = x->data.data() + (b * C + c) * inner;
                            const T* gp = go.data() + (b * C + c) * inner;
                            T* gx = x->grad.data() + (b * C + c) * inner;
                            for (std::int64_t s = 0; s < inner; ++s) {
                                const T xhat = (xp[s] - mu) * is;
                                gx[s] += g * is *
                                         (gp[s] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                            }
                        }
                    } else {
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* gp = go.data() + (b * C + c) * inner;
                            T* gx = x->grad.data() + (b * C + c) * inner;
                            for (std::int64_t s = 0; s < inner; ++s) gx[s] += g * is * gp[s];
                        }
                    }
                }
            }
        };
    });
    return res;
}

// Mean over all axes past the channel axis: (B,C,...) -> (B,C).
template <typename T>
TensorPtr<T> global_avg_pool(const TensorPtr<T>& x) {
    if (x->rank() < 3) throw DimensionError("global_avg_pool: expects rank >= 3");
    const std::int64_t B = x->shape[0], C = x->shape[1];
    std::int64_t inner = 1;
    for (std::int64_t i = 2; i < x->rank(); ++i) inner *= x->shape[i];
    std::vector<T> out(static_cast<std::size_t>(B * C));
    const T inv = T(1) / static_cast<T>(inner);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xp = x->data.data() + (b * C + c) * inner;
            T acc = T(0);
            for (std::int64_t s = 0; s < inner; ++s) acc += xp[s];
            out[static_cast<std::size_t>(b * C + c)] = acc * inv;
        }
    auto res = Tensor<T>::create({B, C}, std::move(out));
    attach_tape(res, "global_avg_pool", {x}, [=](Tensor<T>* out_node) {
        return [=]() {
            x->ensure_grad();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T g = out_node->grad[static_cast<std::size_t>(b * C + c)] * inv;
                    T* gx = x->grad.data() + (b * C + c) * inner;
                    for (std::int64_t s = 0; s < inner; ++s) gx[s] += g;
                }
        };
    });
    return res;
}

// x: (B,In)  w: (Out,In)  b: (Out)  ->  (B,Out)
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b) {
    if (x->rank() != 2 || w->rank() != 2)
        throw DimensionError("linear: expects rank-2 input and weight");
    const std::int64_t B = x->shape[0], In = x->shape[1], Out = w->shape[0];
    if (w->shape[1] != In || b->numel() != Out)
        throw DimensionError("linear: weight/bias shape mismatch");
    std::vector<T> out(static_cast<std::size_t>(B * Out));
    for (std::int64_t i = 0; i < B; ++i) {
        const T* xp = x->data.data() + i * In;
        T* op = out.data() + i * Out;
        for (std::int64_t o = 0; o < Out; ++o) {
            const T* wp = w->data.data() + o * In;
            T acc = b->data[static_cast<std::size_t>(o)];
            for (std::int64_t j = 0; j < In; ++j) acc += xp[j] * wp[j];
            op[o] = acc;
        }
    }
    auto res = Tensor<T>::create({B, Out}, std::move(out));
    attach_tape(res, "linear", {x, w, b}, [=](Tensor<T>* out_node) {
        return [=]() {
            const auto& go = out_node->grad;
            for (std::int64_t i = 0; i < B; ++i) {
                const T* gp = go.data() + i * Out;
                const T* xp = x->data.data() + i * In;
                for (std::int64_t o = 0; o < Out; ++o) {
                    const T g = gp[o];
                    if (w->requires_grad) {
                        w->ensure_grad();
                        T* gw = w->grad.data() + o * In;
                        for (std::int64_t j = 0; j < In; ++j) gw[j] += g * xp[j];
                    }
                    if (x->requires_grad) {
                        x->ensure_grad();
                        const T* wp = w->data.data() + o * In;
                        T* gx = x->grad.data() + i * In;
                        for (std::int64_t j = 0; j < In; ++j) gx[j] += g * wp[j];
                    }
                    if (b->requires_grad) {
                        b->ensure_grad();
                        b->grad[static_cast<std::size_t>(o)] += g;
                    }
                }
            }
        };
    });
    return res;
}

// Mean cross-entropy over the batch from raw logits. labels[i] in [0,K).
template <typename T>
TensorPtr<T> softmax_cross_entropy(const TensorPtr<T>& logits,
                                   const std::vector<std::int64_t>& labels) {
    if (logits->rank() != 2) throw DimensionError("softmax_cross_entropy: expects rank 2");
    const std::int64_t B = logits->shape[0], K = logits->shape[1];
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw DimensionError("softmax_cross_entropy: label count mismatch");
    for (auto l : labels)
        if (l < 0 || l >= K)
            throw DataError("softmax_cross_entropy: label " + std::to_string(l) +
                            " out of range [0," + std::to_string(K) + ")");

    std::vector<T> probs(logits->data.size());
    T loss = T(0);
    for (std::int64_t i = 0; i < B; ++i) {
        const T* lp = logits->data.data() + i * K;
        T mx = lp[0];
        for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, lp[j]);
        T denom = T(0);
        T* pp = probs.data() + i * K;
        for (std::int64_t j = 0; j < K; ++j) {
            pp[j] = std::exp(lp[j] - mx);
            denom += pp[j];
        }
        for (std::int64_t j = 0; j < K; ++j) pp[j] /= denom;
        loss -= std::log(pp[labels[static_cast<std::size_t>(i)]]);
    }
    loss /= static_cast<T>(B);

    auto res = Tensor<T>::create({1}, {loss});
    attach_tape(res, "softmax_cross_entropy", {logits},
                [logits, labels, probs = std::move(probs), B, K](Tensor<T>* out_node) {
        return [=]() {
            logits->ensure_grad();
            const T g = out_node->grad[0] / static_cast<T>(B);
            for (std::int64_t i = 0; i < B; ++i) {
                const T* pp = probs.data() + i * K;
                T* gl = logits->grad.data() + i * K;
                const std::int64_t lab = labels[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < K; ++j)
                    gl[j] += g * (pp[j] - (j == lab ? T(1) : T(0)));
            }
        };
    });
    return res;
}

}  // namespace ske2grid::core
