#pragma once

// Dense tensor operations with tape-based reverse-mode differentiation.
// Conventions:
//   - images are N x C x H x W, token sequences are B x S x D, row-major
//   - reductions (conv sums, norm statistics, softmax denominators, losses)
//     accumulate in double regardless of the storage type
//   - an op is recorded on the tape iff a tape is supplied and any input
//     requires a gradient; the output then requires a gradient as well

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "mutr/parallel.hpp"
#include "mutr/tape.hpp"
#include "mutr/tensor.hpp"

namespace mutr {

namespace detail {

template <typename T>
inline bool wants_grad(const TensorT<T>& t) {
    return t.requires_grad();
}

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

inline void check_arg(bool ok, const std::string& msg) {
    if (!ok) throw ArgumentError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const std::type_identity_t<TensorT<T>>* bias, int stride,
                  int padding, int groups, TapeT<T>* tape = nullptr) {
    detail::check_arg(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
    detail::check_arg(padding >= 0, "conv2d: padding must be non-negative");
    detail::check_arg(groups >= 1, "conv2d: groups must be positive");
    detail::check(x.ndim() == 4, "conv2d: input must be N,C,H,W, got " + shape_str(x.shape()));
    detail::check(weight.ndim() == 4, "conv2d: weight must be Cout,Cin/g,K,K, got " + shape_str(weight.shape()));
    const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = weight.dim(0), Cw = weight.dim(1), Kh = weight.dim(2), Kw = weight.dim(3);
    detail::check(Kh == Kw, "conv2d: only square kernels are supported");
    detail::check(Cin % groups == 0,
                  "conv2d: input channels " + std::to_string(Cin) + " not divisible by groups " + std::to_string(groups));
    detail::check(Cout % groups == 0,
                  "conv2d: output channels " + std::to_string(Cout) + " not divisible by groups " + std::to_string(groups));
    detail::check(Cw == Cin / groups, "conv2d: weight shape " + shape_str(weight.shape()) +
                                          " does not match input channels " + std::to_string(Cin) + " with groups " +
                                          std::to_string(groups));
    const std::int64_t K = Kh;
    detail::check(K <= H + 2 * padding && K <= W + 2 * padding,
                  "conv2d: kernel " + std::to_string(K) + " larger than padded input " + shape_str(x.shape()));
    if (bias) {
        detail::check(bias->ndim() == 1 && bias->dim(0) == Cout,
                      "conv2d: bias shape " + shape_str(bias->shape()) + " must be [" + std::to_string(Cout) + "]");
    }
    const std::int64_t Hout = (H + 2 * padding - K) / stride + 1;
    const std::int64_t Wout = (W + 2 * padding - K) / stride + 1;
    const std::int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;

    TensorT<T> y({N, Cout, Hout, Wout});
    {
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        const T* bd = bias ? bias->data().data() : nullptr;
        T* yd = y.data().data();
        parallel_for(N * Cout, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t nc = lo; nc < hi; ++nc) {
                const std::int64_t n = nc / Cout, co = nc % Cout;
                const std::int64_t g = co / cpg_out;
                const T* wbase = wd + co * cpg_in * K * K;
                for (std::int64_t oh = 0; oh < Hout; ++oh) {
                    for (std::int64_t ow = 0; ow < Wout; ++ow) {
                        double acc = bd ? static_cast<double>(bd[co]) : 0.0;
                        for (std::int64_t cg = 0; cg < cpg_in; ++cg) {
                            const std::int64_t ci = g * cpg_in + cg;
                            const T* xplane = xd + (n * Cin + ci) * H * W;
                            const T* wk = wbase + cg * K * K;
                            for (std::int64_t kh = 0; kh < K; ++kh) {
                                const std::int64_t ih = oh * stride - padding + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (std::int64_t kw = 0; kw < K; ++kw) {
                                    const std::int64_t iw = ow * stride - padding + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += static_cast<double>(xplane[ih * W + iw]) *
                                           static_cast<double>(wk[kh * K + kw]);
                                }
                            }
                        }
                        yd[((n * Cout + co) * Hout + oh) * Wout + ow] = static_cast<T>(acc);
                    }
                }
            }
        });
    }

    const bool rec = tape && (x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad()));
    if (rec) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, wc = weight, yc = y;
        TensorT<T> bc = bias ? *bias : TensorT<T>();
        std::vector<TensorT<T>> ins = {x, weight};
        if (bias) ins.push_back(*bias);
        tape->record("conv2d", std::move(ins), y, [xc, wc, bc, yc, stride, padding, groups]() mutable {
            const std::int64_t N = xc.dim(0), Cin = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
            const std::int64_t Cout = wc.dim(0), K = wc.dim(2);
            const std::int64_t Hout = yc.dim(2), Wout = yc.dim(3);
            const std::int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;
            const T* gy = yc.impl()->grad.data();
            const T* xd = xc.data().data();
            const T* wd = wc.data().data();
            if (xc.requires_grad()) {
                T* gx = xc.grad().data();
                parallel_for(N * Cin, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t nc = lo; nc < hi; ++nc) {
                        const std::int64_t n = nc / Cin, ci = nc % Cin;
                        const std::int64_t g = ci / cpg_in, cg = ci % cpg_in;
                        for (std::int64_t ih = 0; ih < H; ++ih) {
                            for (std::int64_t iw = 0; iw < W; ++iw) {
                                double acc = 0.0;
                                for (std::int64_t cog = 0; cog < cpg_out; ++cog) {
                                    const std::int64_t co = g * cpg_out + cog;
                                    const T* wk = wd + (co * cpg_in + cg) * K * K;
                                    const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                                    for (std::int64_t kh = 0; kh < K; ++kh) {
                                        const std::int64_t ohs = ih + padding - kh;
                                        if (ohs < 0 || ohs % stride != 0) continue;
                                        const std::int64_t oh = ohs / stride;
                                        if (oh >= Hout) continue;
                                        for (std::int64_t kw = 0; kw < K; ++kw) {
                                            const std::int64_t ows = iw + padding - kw;
                                            if (ows < 0 || ows % stride != 0) continue;
                                            const std::int64_t ow = ows / stride;
                                            if (ow >= Wout) continue;
                                            acc += static_cast<double>(wk[kh * K + kw]) *
                                                   static_cast<double>(gplane[oh * Wout + ow]);
                                        }
                                    }
                                }
                                gx[((n * Cin + ci) * H + ih) * W + iw] += static_cast<T>(acc);
                            }
                        }
                    }
                });
            }
            if (wc.requires_grad()) {
                T* gw = wc.grad().data();
                parallel_for(Cout, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t co = lo; co < hi; ++co) {
                        const std::int64_t g = co / cpg_out;
                        for (std::int64_t cg = 0; cg < cpg_in; ++cg) {
                            const std::int64_t ci = g * cpg_in + cg;
                            for (std::int64_t kh = 0; kh < K; ++kh) {
                                for (std::int64_t kw = 0; kw < K; ++kw) {
                                    double acc = 0.0;
                                    for (std::int64_t n = 0; n < N; ++n) {
                                        const T* xplane = xd + (n * Cin + ci) * H * W;
                                        const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                                        for (std::int64_t oh = 0; oh < Hout; ++oh) {
                                            const std::int64_t ih = oh * stride - padding + kh;
                                            if (ih < 0 || ih >= H) continue;
                                            for (std::int64_t ow = 0; ow < Wout; ++ow) {
                                                const std::int64_t iw = ow * stride - padding + kw;
                                                if (iw < 0 || iw >= W) continue;
                                                acc += static_cast<double>(xplane[ih * W + iw]) *
                                                       static_cast<double>(gplane[oh * Wout + ow]);
                                            }
                                        }
                                    }
                                    gw[((co * cpg_in + cg) * K + kh) * K + kw] += static_cast<T>(acc);
                                }
                            }
                        }
                    }
                });
            }
            if (bc.defined() && bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                        for (std::int64_t i = 0; i < Hout * Wout; ++i) acc += static_cast<double>(gplane[i]);
                    }
                    gb[co] += static_cast<T>(acc);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// transpose_conv2d (kernel layout Cin x Cout x K x K)

template <typename T>
TensorT<T> transpose_conv2d(const TensorT<T>& x, const TensorT<T>& weight, const std::type_identity_t<TensorT<T>>* bias,
                            int stride, int padding, TapeT<T>* tape = nullptr) {
    detail::check_arg(stride >= 1, "transpose_conv2d: stride must be positive");
    detail::check_arg(padding >= 0, "transpose_conv2d: padding must be non-negative");
    detail::check(x.ndim() == 4, "transpose_conv2d: input must be N,C,H,W");
    detail::check(weight.ndim() == 4, "transpose_conv2d: weight must be Cin,Cout,K,K");
    const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::check(weight.dim(0) == Cin, "transpose_conv2d: weight Cin " + std::to_string(weight.dim(0)) +
                                            " does not match input channels " + std::to_string(Cin));
    const std::int64_t Cout = weight.dim(1), K = weight.dim(2);
    detail::check(weight.dim(3) == K, "transpose_conv2d: only square kernels are supported");
    const std::int64_t Hout = (H - 1) * stride - 2 * padding + K;
    const std::int64_t Wout = (W - 1) * stride - 2 * padding + K;
    detail::check(Hout > 0 && Wout > 0, "transpose_conv2d: output would be empty");
    if (bias) {
        detail::check(bias->ndim() == 1 && bias->dim(0) == Cout, "transpose_conv2d: bias must be [Cout]");
    }

    TensorT<T> y({N, Cout, Hout, Wout});
    {
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        const T* bd = bias ? bias->data().data() : nullptr;
        T* yd = y.data().data();
        parallel_for(N * Cout, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t nc = lo; nc < hi; ++nc) {
                const std::int64_t n = nc / Cout, co = nc % Cout;
                for (std::int64_t oh = 0; oh < Hout; ++oh) {
                    for (std::int64_t ow = 0; ow < Wout; ++ow) {
                        double acc = bd ? static_cast<double>(bd[co]) : 0.0;
                        for (std::int64_t kh = 0; kh < K; ++kh) {
                            const std::int64_t ihs = oh + padding - kh;
                            if (ihs < 0 || ihs % stride != 0) continue;
                            const std::int64_t ih = ihs / stride;
                            if (ih >= H) continue;
                            for (std::int64_t kw = 0; kw < K; ++kw) {
                                const std::int64_t iws = ow + padding - kw;
                                if (iws < 0 || iws % stride != 0) continue;
                                const std::int64_t iw = iws / stride;
                                if (iw >= W) continue;
                                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                                    acc += static_cast<double>(xd[((n * Cin + ci) * H + ih) * W + iw]) *
                                           static_cast<double>(wd[((ci * Cout + co) * K + kh) * K + kw]);
                                }
                            }
                        }
                        yd[((n * Cout + co) * Hout + oh) * Wout + ow] = static_cast<T>(acc);
                    }
                }
            }
        });
    }

    const bool rec = tape && (x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad()));
    if (rec) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, wc = weight, yc = y;
        TensorT<T> bc = bias ? *bias : TensorT<T>();
        std::vector<TensorT<T>> ins = {x, weight};
        if (bias) ins.push_back(*bias);
        tape->record("transpose_conv2d", std::move(ins), y, [xc, wc, bc, yc, stride, padding]() mutable {
            const std::int64_t N = xc.dim(0), Cin = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
            const std::int64_t Cout = wc.dim(1), K = wc.dim(2);
            const std::int64_t Hout = yc.dim(2), Wout = yc.dim(3);
            const T* gy = yc.impl()->grad.data();
            const T* xd = xc.data().data();
            const T* wd = wc.data().data();
            if (xc.requires_grad()) {
                T* gx = xc.grad().data();
                parallel_for(N * Cin, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t nc = lo; nc < hi; ++nc) {
                        const std::int64_t n = nc / Cin, ci = nc % Cin;
                        for (std::int64_t ih = 0; ih < H; ++ih) {
                            for (std::int64_t iw = 0; iw < W; ++iw) {
                                double acc = 0.0;
                                for (std::int64_t co = 0; co < Cout; ++co) {
                                    const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                                    const T* wk = wd + (ci * Cout + co) * K * K;
                                    for (std::int64_t kh = 0; kh < K; ++kh) {
                                        const std::int64_t oh = ih * stride - padding + kh;
                                        if (oh < 0 || oh >= Hout) continue;
                                        for (std::int64_t kw = 0; kw < K; ++kw) {
                                            const std::int64_t ow = iw * stride - padding + kw;
                                            if (ow < 0 || ow >= Wout) continue;
                                            acc += static_cast<double>(gplane[oh * Wout + ow]) *
                                                   static_cast<double>(wk[kh * K + kw]);
                                        }
                                    }
                                }
                                gx[((n * Cin + ci) * H + ih) * W + iw] += static_cast<T>(acc);
                            }
                        }
                    }
                });
            }
            if (wc.requires_grad()) {
                T* gw = wc.grad().data();
                parallel_for(Cin, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t ci = lo; ci < hi; ++ci) {
                        for (std::int64_t co = 0; co < Cout; ++co) {
                            for (std::int64_t kh = 0; kh < K; ++kh) {
                                for (std::int64_t kw = 0; kw < K; ++kw) {
                                    double acc = 0.0;
                                    for (std::int64_t n = 0; n < N; ++n) {
                                        const T* xplane = xd + (n * Cin + ci) * H * W;
                                        const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                                        for (std::int64_t ih = 0; ih < H; ++ih) {
                                            const std::int64_t oh = ih * stride - padding + kh;
                                            if (oh < 0 || oh >= Hout) continue;
                                            for (std::int64_t iw = 0; iw < W; ++iw) {
                                                const std::int64_t ow = iw * stride - padding + kw;
                                                if (ow < 0 || ow >= Wout) continue;
                                                acc += static_cast<double>(xplane[ih * W + iw]) *
                                                       static_cast<double>(gplane[oh * Wout + ow]);
                                            }
                                        }
                                    }
                                    gw[((ci * Cout + co) * K + kh) * K + kw] += static_cast<T>(acc);
                                }
                            }
                        }
                    }
                });
            }
            if (bc.defined() && bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const T* gplane = gy + (n * Cout + co) * Hout * Wout;
                        for (std::int64_t i = 0; i < Hout * Wout; ++i) acc += static_cast<double>(gplane[i]);
                    }
                    gb[co] += static_cast<T>(acc);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// matmul with batch-dimension broadcasting (each batch dim equal or 1)

namespace detail {

struct BatchMap {
    std::int64_t cells = 1;                // number of output batch cells
    std::vector<std::int64_t> out_dims;    // output batch dims
    std::vector<std::int64_t> a_strides;   // strides into a's batch cells (0 where broadcast)
    std::vector<std::int64_t> b_strides;
};

inline BatchMap broadcast_batch(const Shape& a, const Shape& b, const std::string& who) {
    const int abatch = static_cast<int>(a.size()) - 2;
    const int bbatch = static_cast<int>(b.size()) - 2;
    const int nbatch = std::max(abatch, bbatch);
    BatchMap m;
    m.out_dims.resize(static_cast<std::size_t>(nbatch), 1);
    for (int i = 0; i < nbatch; ++i) {
        const std::int64_t da = i < nbatch - abatch ? 1 : a[static_cast<std::size_t>(i - (nbatch - abatch))];
        const std::int64_t db = i < nbatch - bbatch ? 1 : b[static_cast<std::size_t>(i - (nbatch - bbatch))];
        check(da == db || da == 1 || db == 1,
              who + ": batch dims not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
        m.out_dims[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    m.a_strides.assign(static_cast<std::size_t>(nbatch), 0);
    m.b_strides.assign(static_cast<std::size_t>(nbatch), 0);
    std::int64_t astride = 1, bstride = 1;
    for (int i = nbatch - 1; i >= 0; --i) {
        const std::int64_t da = i < nbatch - abatch ? 1 : a[static_cast<std::size_t>(i - (nbatch - abatch))];
        const std::int64_t db = i < nbatch - bbatch ? 1 : b[static_cast<std::size_t>(i - (nbatch - bbatch))];
        m.a_strides[static_cast<std::size_t>(i)] = da == 1 ? 0 : astride;
        m.b_strides[static_cast<std::size_t>(i)] = db == 1 ? 0 : bstride;
        astride *= da;
        bstride *= db;
    }
    for (auto d : m.out_dims) m.cells *= d;
    return m;
}

inline std::pair<std::int64_t, std::int64_t> batch_offsets(const BatchMap& m, std::int64_t cell) {
    std::int64_t ao = 0, bo = 0, rem = cell;
    for (std::size_t i = 0; i < m.out_dims.size(); ++i) {
        std::int64_t block = 1;
        for (std::size_t j = i + 1; j < m.out_dims.size(); ++j) block *= m.out_dims[j];
        const std::int64_t idx = rem / block;
        rem %= block;
        ao += idx * m.a_strides[i];
        bo += idx * m.b_strides[i];
    }
    return {ao, bo};
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    detail::check(a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must have at least 2 dims");
    const std::int64_t M = a.dim(a.ndim() - 2), Ka = a.dim(a.ndim() - 1);
    const std::int64_t Kb = b.dim(b.ndim() - 2), P = b.dim(b.ndim() - 1);
    detail::check(Ka == Kb, "matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
    const auto map = detail::broadcast_batch(a.shape(), b.shape(), "matmul");
    Shape out_shape = map.out_dims;
    out_shape.push_back(M);
    out_shape.push_back(P);

    TensorT<T> y(out_shape);
    {
        const T* ad = a.data().data();
        const T* bd = b.data().data();
        T* yd = y.data().data();
        parallel_for(map.cells * M, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t cm = lo; cm < hi; ++cm) {
                const std::int64_t cell = cm / M, m = cm % M;
                const auto [ao, bo] = detail::batch_offsets(map, cell);
                const T* arow = ad + ao * M * Ka + m * Ka;
                const T* bmat = bd + bo * Ka * P;
                T* yrow = yd + cell * M * P + m * P;
                for (std::int64_t p = 0; p < P; ++p) {
                    double acc = 0.0;
                    for (std::int64_t k = 0; k < Ka; ++k) {
                        acc += static_cast<double>(arow[k]) * static_cast<double>(bmat[k * P + p]);
                    }
                    yrow[p] = static_cast<T>(acc);
                }
            }
        });
    }

    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        TensorT<T> ac = a, bc = b, yc = y;
        tape->record("matmul", {a, b}, y, [ac, bc, yc, map, M, P, Ka]() mutable {
            const T* gy = yc.impl()->grad.data();
            const T* ad = ac.data().data();
            const T* bd = bc.data().data();
            // Broadcast cells can alias the same input block, so the cell loop
            // stays sequential; rows within a cell are independent.
            if (ac.requires_grad()) {
                T* ga = ac.grad().data();
                for (std::int64_t cell = 0; cell < map.cells; ++cell) {
                    const auto [ao, bo] = detail::batch_offsets(map, cell);
                    const T* bmat = bd + bo * Ka * P;
                    parallel_for(M, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t m = lo; m < hi; ++m) {
                            const T* grow = gy + cell * M * P + m * P;
                            T* garow = ga + ao * M * Ka + m * Ka;
                            for (std::int64_t k = 0; k < Ka; ++k) {
                                double acc = 0.0;
                                for (std::int64_t p = 0; p < P; ++p) {
                                    acc += static_cast<double>(grow[p]) * static_cast<double>(bmat[k * P + p]);
                                }
                                garow[k] += static_cast<T>(acc);
                            }
                        }
                    });
                }
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t cell = 0; cell < map.cells; ++cell) {
                    const auto [ao, bo] = detail::batch_offsets(map, cell);
                    const T* amat = ad + ao * M * Ka;
                    const T* gmat = gy + cell * M * P;
                    T* gbmat = gb + bo * Ka * P;
                    parallel_for(Ka, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t k = lo; k < hi; ++k) {
                            for (std::int64_t p = 0; p < P; ++p) {
                                double acc = 0.0;
                                for (std::int64_t m = 0; m < M; ++m) {
                                    acc += static_cast<double>(amat[m * Ka + k]) * static_cast<double>(gmat[m * P + p]);
                                }
                                gbmat[k * P + p] += static_cast<T>(acc);
                            }
                        }
                    });
                }
            }
        });
    }
    return y;
}

// Swap the last two dimensions.
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() >= 2, "transpose_last2: needs at least 2 dims");
    const std::int64_t M = x.dim(x.ndim() - 2), P = x.dim(x.ndim() - 1);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    const std::int64_t cells = x.numel() / (M * P);
    TensorT<T> y(out_shape);
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t c = 0; c < cells; ++c) {
        for (std::int64_t m = 0; m < M; ++m) {
            for (std::int64_t p = 0; p < P; ++p) {
                yd[c * M * P + p * M + m] = xd[c * M * P + m * P + p];
            }
        }
    }
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("transpose_last2", {x}, y, [xc, yc, cells, M, P]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gx = xc.grad().data();
            for (std::int64_t c = 0; c < cells; ++c) {
                for (std::int64_t m = 0; m < M; ++m) {
                    for (std::int64_t p = 0; p < P; ++p) {
                        gx[c * M * P + m * P + p] += gy[c * M * P + p * M + m];
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear: y[..., Dout] = x[..., Din] . w[Din, Dout] + b

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight, const std::type_identity_t<TensorT<T>>* bias,
                  TapeT<T>* tape = nullptr) {
    detail::check(weight.ndim() == 2, "linear: weight must be [Din, Dout]");
    const std::int64_t Din = weight.dim(0), Dout = weight.dim(1);
    detail::check(x.dim(x.ndim() - 1) == Din, "linear: input feature dim " + std::to_string(x.dim(x.ndim() - 1)) +
                                                  " does not match weight " + shape_str(weight.shape()));
    if (bias) detail::check(bias->ndim() == 1 && bias->dim(0) == Dout, "linear: bias must be [Dout]");
    const std::int64_t rows = x.numel() / Din;
    Shape out_shape = x.shape();
    out_shape.back() = Dout;

    TensorT<T> y(out_shape);
    {
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        const T* bd = bias ? bias->data().data() : nullptr;
        T* yd = y.data().data();
        parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                const T* xrow = xd + r * Din;
                T* yrow = yd + r * Dout;
                for (std::int64_t j = 0; j < Dout; ++j) {
                    double acc = bd ? static_cast<double>(bd[j]) : 0.0;
                    for (std::int64_t i = 0; i < Din; ++i) {
                        acc += static_cast<double>(xrow[i]) * static_cast<double>(wd[i * Dout + j]);
                    }
                    yrow[j] = static_cast<T>(acc);
                }
            }
        });
    }

    const bool rec = tape && (x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad()));
    if (rec) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, wc = weight, yc = y;
        TensorT<T> bc = bias ? *bias : TensorT<T>();
        std::vector<TensorT<T>> ins = {x, weight};
        if (bias) ins.push_back(*bias);
        tape->record("linear", std::move(ins), y, [xc, wc, bc, yc, rows, Din, Dout]() mutable {
            const T* gy = yc.impl()->grad.data();
            const T* xd = xc.data().data();
            const T* wd = wc.data().data();
            if (xc.requires_grad()) {
                T* gx = xc.grad().data();
                parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t r = lo; r < hi; ++r) {
                        const T* grow = gy + r * Dout;
                        T* gxrow = gx + r * Din;
                        for (std::int64_t i = 0; i < Din; ++i) {
                            double acc = 0.0;
                            for (std::int64_t j = 0; j < Dout; ++j) {
                                acc += static_cast<double>(grow[j]) * static_cast<double>(wd[i * Dout + j]);
                            }
                            gxrow[i] += static_cast<T>(acc);
                        }
                    }
                });
            }
            if (wc.requires_grad()) {
                T* gw = wc.grad().data();
                parallel_for(Din, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) {
                        for (std::int64_t j = 0; j < Dout; ++j) {
                            double acc = 0.0;
                            for (std::int64_t r = 0; r < rows; ++r) {
                                acc += static_cast<double>(xd[r * Din + i]) * static_cast<double>(gy[r * Dout + j]);
                            }
                            gw[i * Dout + j] += static_cast<T>(acc);
                        }
                    }
                });
            }
            if (bc.defined() && bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t j = 0; j < Dout; ++j) {
                    double acc = 0.0;
                    for (std::int64_t r = 0; r < rows; ++r) acc += static_cast<double>(gy[r * Dout + j]);
                    gb[j] += static_cast<T>(acc);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax along an arbitrary axis, max-subtracted for stability

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis, TapeT<T>* tape = nullptr) {
    if (axis < 0) axis += x.ndim();
    detail::check_arg(axis >= 0 && axis < x.ndim(),
                      "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const std::int64_t A = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);

    TensorT<T> y(x.shape());
    {
        const T* xd = x.data().data();
        T* yd = y.data().data();
        parallel_for(outer * inner, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t oi = lo; oi < hi; ++oi) {
                const std::int64_t o = oi / inner, i = oi % inner;
                const std::int64_t base = o * A * inner + i;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t a = 0; a < A; ++a) mx = std::max(mx, static_cast<double>(xd[base + a * inner]));
                double denom = 0.0;
                for (std::int64_t a = 0; a < A; ++a) {
                    denom += std::exp(static_cast<double>(xd[base + a * inner]) - mx);
                }
                for (std::int64_t a = 0; a < A; ++a) {
                    yd[base + a * inner] =
                        static_cast<T>(std::exp(static_cast<double>(xd[base + a * inner]) - mx) / denom);
                }
            }
        });
    }

    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("softmax", {x}, y, [xc, yc, outer, inner, A]() mutable {
            const T* gy = yc.impl()->grad.data();
            const T* yd = yc.data().data();
            T* gx = xc.grad().data();
            parallel_for(outer * inner, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t oi = lo; oi < hi; ++oi) {
                    const std::int64_t o = oi / inner, i = oi % inner;
                    const std::int64_t base = o * A * inner + i;
                    double dot = 0.0;
                    for (std::int64_t a = 0; a < A; ++a) {
                        dot += static_cast<double>(gy[base + a * inner]) * static_cast<double>(yd[base + a * inner]);
                    }
                    for (std::int64_t a = 0; a < A; ++a) {
                        const double g = static_cast<double>(gy[base + a * inner]);
                        const double v = static_cast<double>(yd[base + a * inner]);
                        gx[base + a * inner] += static_cast<T>(v * (g - dot));
                    }
                }
            });
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps,
                      TapeT<T>* tape = nullptr) {
    const std::int64_t D = x.dim(x.ndim() - 1);
    detail::check(gamma.ndim() == 1 && gamma.dim(0) == D,
                  "layer_norm: gamma shape " + shape_str(gamma.shape()) + " must be [" + std::to_string(D) + "]");
    detail::check(beta.ndim() == 1 && beta.dim(0) == D,
                  "layer_norm: beta shape " + shape_str(beta.shape()) + " must be [" + std::to_string(D) + "]");
    const std::int64_t rows = x.numel() / D;

    TensorT<T> y(x.shape());
    std::vector<T> saved_mean(static_cast<std::size_t>(rows));
    std::vector<T> saved_inv(static_cast<std::size_t>(rows));
    {
        const T* xd = x.data().data();
        const T* gd = gamma.data().data();
        const T* bd = beta.data().data();
        T* yd = y.data().data();
        parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                const T* xrow = xd + r * D;
                double mean = 0.0;
                for (std::int64_t d = 0; d < D; ++d) mean += static_cast<double>(xrow[d]);
                mean /= static_cast<double>(D);
                double var = 0.0;
                for (std::int64_t d = 0; d < D; ++d) {
                    const double c = static_cast<double>(xrow[d]) - mean;
                    var += c * c;
                }
                var /= static_cast<double>(D);
                const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
                saved_mean[static_cast<std::size_t>(r)] = static_cast<T>(mean);
                saved_inv[static_cast<std::size_t>(r)] = static_cast<T>(inv);
                T* yrow = yd + r * D;
                for (std::int64_t d = 0; d < D; ++d) {
                    const double xhat = (static_cast<double>(xrow[d]) - mean) * inv;
                    yrow[d] = static_cast<T>(static_cast<double>(gd[d]) * xhat + static_cast<double>(bd[d]));
                }
            }
        });
    }

    const bool rec = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (rec) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, gc = gamma, bc = beta, yc = y;
        tape->record("layer_norm", {x, gamma, beta}, y,
                     [xc, gc, bc, yc, rows, D, sm = std::move(saved_mean), si = std::move(saved_inv)]() mutable {
            const T* gy = yc.impl()->grad.data();
            const T* xd = xc.data().data();
            const T* gd = gc.data().data();
            if (xc.requires_grad()) {
                T* gx = xc.grad().data();
                parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t r = lo; r < hi; ++r) {
                        const T* xrow = xd + r * D;
                        const T* grow = gy + r * D;
                        const double mean = static_cast<double>(sm[static_cast<std::size_t>(r)]);
                        const double inv = static_cast<double>(si[static_cast<std::size_t>(r)]);
                        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                        for (std::int64_t d = 0; d < D; ++d) {
                            const double dxhat = static_cast<double>(grow[d]) * static_cast<double>(gd[d]);
                            const double xhat = (static_cast<double>(xrow[d]) - mean) * inv;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        const double invD = 1.0 / static_cast<double>(D);
                        T* gxrow = gx + r * D;
                        for (std::int64_t d = 0; d < D; ++d) {
                            const double dxhat = static_cast<double>(grow[d]) * static_cast<double>(gd[d]);
                            const double xhat = (static_cast<double>(xrow[d]) - mean) * inv;
                            gxrow[d] += static_cast<T>(inv * (dxhat - invD * sum_dxhat - xhat * invD * sum_dxhat_xhat));
                        }
                    }
                });
            }
            if (gc.requires_grad() || bc.requires_grad()) {
                T* gg = gc.requires_grad() ? gc.grad().data() : nullptr;
                T* gb = bc.requires_grad() ? bc.grad().data() : nullptr;
                for (std::int64_t d = 0; d < D; ++d) {
                    double accg = 0.0, accb = 0.0;
                    for (std::int64_t r = 0; r < rows; ++r) {
                        const double g = static_cast<double>(gy[r * D + d]);
                        const double mean = static_cast<double>(sm[static_cast<std::size_t>(r)]);
                        const double inv = static_cast<double>(si[static_cast<std::size_t>(r)]);
                        accg += g * (static_cast<double>(xd[r * D + d]) - mean) * inv;
                        accb += g;
                    }
                    if (gg) gg[d] += static_cast<T>(accg);
                    if (gb) gb[d] += static_cast<T>(accb);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// batch_norm2d; training mode updates running stats in place:
// running = (1 - momentum) * running + momentum * batch

template <typename T>
TensorT<T> batch_norm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                        TensorT<T>& running_mean, TensorT<T>& running_var, bool training, T momentum,
                        T eps, TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() == 4, "batch_norm2d: input must be N,C,H,W");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const TensorT<T>* p :
         {&gamma, &beta, const_cast<const TensorT<T>*>(&running_mean), const_cast<const TensorT<T>*>(&running_var)}) {
        detail::check(p->ndim() == 1 && p->dim(0) == C,
                      "batch_norm2d: per-channel parameter shape " + shape_str(p->shape()) + " must be [" +
                          std::to_string(C) + "]");
    }
    const std::int64_t M = N * H * W;
    if (training && M == 1) {
        throw DegenerateBatchError("batch_norm2d: cannot compute batch statistics over a single element");
    }

    std::vector<T> use_mean(static_cast<std::size_t>(C)), use_inv(static_cast<std::size_t>(C));
    const T* xd = x.data().data();
    if (training) {
        T* rm = running_mean.data().data();
        T* rv = running_var.data().data();
        for (std::int64_t c = 0; c < C; ++c) {
            double mean = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const T* plane = xd + (n * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) mean += static_cast<double>(plane[i]);
            }
            mean /= static_cast<double>(M);
            double var = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const T* plane = xd + (n * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double d = static_cast<double>(plane[i]) - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(M);
            use_mean[static_cast<std::size_t>(c)] = static_cast<T>(mean);
            use_inv[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double mom = static_cast<double>(momentum);
            rm[c] = static_cast<T>((1.0 - mom) * static_cast<double>(rm[c]) + mom * mean);
            rv[c] = static_cast<T>((1.0 - mom) * static_cast<double>(rv[c]) + mom * var);
        }
    } else {
        const T* rm = running_mean.data().data();
        const T* rv = running_var.data().data();
        for (std::int64_t c = 0; c < C; ++c) {
            use_mean[static_cast<std::size_t>(c)] = rm[c];
            use_inv[static_cast<std::size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + static_cast<double>(eps)));
        }
    }

    TensorT<T> y(x.shape());
    {
        const T* gd = gamma.data().data();
        const T* bd = beta.data().data();
        T* yd = y.data().data();
        parallel_for(N * C, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t nc = lo; nc < hi; ++nc) {
                const std::int64_t c = nc % C;
                const double mean = static_cast<double>(use_mean[static_cast<std::size_t>(c)]);
                const double inv = static_cast<double>(use_inv[static_cast<std::size_t>(c)]);
                const double g = static_cast<double>(gd[c]);
                const double b = static_cast<double>(bd[c]);
                const T* xplane = xd + nc * H * W;
                T* yplane = yd + nc * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    yplane[i] = static_cast<T>(g * (static_cast<double>(xplane[i]) - mean) * inv + b);
                }
            }
        });
    }

    const bool rec = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (rec) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, gc = gamma, bc = beta, yc = y;
        tape->record("batch_norm2d", {x, gamma, beta}, y,
                     [xc, gc, bc, yc, training, N, C, H, W, um = std::move(use_mean), ui = std::move(use_inv)]() mutable {
            const std::int64_t M = N * H * W;
            const T* gy = yc.impl()->grad.data();
            const T* xd = xc.data().data();
            const T* gd = gc.data().data();
            // Per-channel reductions of dy and dy * xhat feed every formula below.
            std::vector<double> sum_dy(static_cast<std::size_t>(C), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(C), 0.0);
            for (std::int64_t c = 0; c < C; ++c) {
                const double mean = static_cast<double>(um[static_cast<std::size_t>(c)]);
                const double inv = static_cast<double>(ui[static_cast<std::size_t>(c)]);
                double sdy = 0.0, sdyx = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* gplane = gy + (n * C + c) * H * W;
                    const T* xplane = xd + (n * C + c) * H * W;
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        const double g = static_cast<double>(gplane[i]);
                        sdy += g;
                        sdyx += g * (static_cast<double>(xplane[i]) - mean) * inv;
                    }
                }
                sum_dy[static_cast<std::size_t>(c)] = sdy;
                sum_dy_xhat[static_cast<std::size_t>(c)] = sdyx;
            }
            if (xc.requires_grad()) {
                T* gx = xc.grad().data();
                parallel_for(N * C, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t nc = lo; nc < hi; ++nc) {
                        const std::int64_t c = nc % C;
                        const double mean = static_cast<double>(um[static_cast<std::size_t>(c)]);
                        const double inv = static_cast<double>(ui[static_cast<std::size_t>(c)]);
                        const double g = static_cast<double>(gd[c]);
                        const T* gplane = gy + nc * H * W;
                        const T* xplane = xd + nc * H * W;
                        T* gxplane = gx + nc * H * W;
                        if (training) {
                            const double mdy = sum_dy[static_cast<std::size_t>(c)] / static_cast<double>(M);
                            const double mdyx = sum_dy_xhat[static_cast<std::size_t>(c)] / static_cast<double>(M);
                            for (std::int64_t i = 0; i < H * W; ++i) {
                                const double xhat = (static_cast<double>(xplane[i]) - mean) * inv;
                                gxplane[i] += static_cast<T>(
                                    g * inv * (static_cast<double>(gplane[i]) - mdy - xhat * mdyx));
                            }
                        } else {
                            for (std::int64_t i = 0; i < H * W; ++i) {
                                gxplane[i] += static_cast<T>(g * inv * static_cast<double>(gplane[i]));
                            }
                        }
                    }
                });
            }
            if (gc.requires_grad()) {
                T* gg = gc.grad().data();
                for (std::int64_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[static_cast<std::size_t>(c)]);
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[static_cast<std::size_t>(c)]);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> unary_elementwise(const char* kind, const TensorT<T>& x, TapeT<T>* tape, FwdFn fwd, BwdFn dfdx) {
    TensorT<T> y(x.shape());
    const T* xd = x.data().data();
    T* yd = y.data().data();
    const std::int64_t n = x.numel();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = static_cast<T>(fwd(static_cast<double>(xd[i])));
    });
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record(kind, {x}, y, [xc, yc, dfdx]() mutable {
            const T* gy = yc.impl()->grad.data();
            const T* xd2 = xc.data().data();
            T* gx = xc.grad().data();
            const std::int64_t m = xc.numel();
            parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) {
                    gx[i] += static_cast<T>(static_cast<double>(gy[i]) * dfdx(static_cast<double>(xd2[i])));
                }
            });
        });
    }
    return y;
}

inline double sigmoid_d(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace detail

template <typename T>
TensorT<T> silu(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    auto fwd = [](double v) { return v * detail::sigmoid_d(v); };
    auto bwd = [](double v) {
        const double s = detail::sigmoid_d(v);
#ifdef MUTR_FAULT_INJECT_SILU_BACKWARD
        return -(s * (1.0 + v * (1.0 - s)));  // deliberately wrong; used to prove the oracle bites
#else
        return s * (1.0 + v * (1.0 - s));
#endif
    };
    return detail::unary_elementwise("silu", x, tape, fwd, bwd);
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    auto fwd = [](double v) { return detail::sigmoid_d(v); };
    auto bwd = [](double v) {
        const double s = detail::sigmoid_d(v);
        return s * (1.0 - s);
    };
    return detail::unary_elementwise("sigmoid", x, tape, fwd, bwd);
}

template <typename T>
TensorT<T> relu6(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    auto fwd = [](double v) { return std::min(std::max(v, 0.0), 6.0); };
    auto bwd = [](double v) { return (v > 0.0 && v < 6.0) ? 1.0 : 0.0; };
    return detail::unary_elementwise("relu6", x, tape, fwd, bwd);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T factor, TapeT<T>* tape = nullptr) {
    const double f = static_cast<double>(factor);
    auto fwd = [f](double v) { return f * v; };
    auto bwd = [f](double) { return f; };
    return detail::unary_elementwise("scale", x, tape, fwd, bwd);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    detail::check(a.shape() == b.shape(),
                  "add: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<T> y(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* yd = y.data().data();
    const std::int64_t n = a.numel();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] + bd[i];
    });
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        TensorT<T> ac = a, bc = b, yc = y;
        tape->record("add", {a, b}, y, [ac, bc, yc]() mutable {
            const T* gy = yc.impl()->grad.data();
            const std::int64_t m = yc.numel();
            if (ac.requires_grad()) {
                T* ga = ac.grad().data();
                for (std::int64_t i = 0; i < m; ++i) ga[i] += gy[i];
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad().data();
                for (std::int64_t i = 0; i < m; ++i) gb[i] += gy[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    detail::check(a.shape() == b.shape(),
                  "mul: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<T> y(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* yd = y.data().data();
    const std::int64_t n = a.numel();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] * bd[i];
    });
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        TensorT<T> ac = a, bc = b, yc = y;
        tape->record("mul", {a, b}, y, [ac, bc, yc]() mutable {
            const T* gy = yc.impl()->grad.data();
            const std::int64_t m = yc.numel();
            if (ac.requires_grad()) {
                T* ga = ac.grad().data();
                const T* bd2 = bc.data().data();
                for (std::int64_t i = 0; i < m; ++i) ga[i] += gy[i] * bd2[i];
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad().data();
                const T* ad2 = ac.data().data();
                for (std::int64_t i = 0; i < m; ++i) gb[i] += gy[i] * ad2[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis, TapeT<T>* tape = nullptr) {
    detail::check_arg(!parts.empty(), "concat: needs at least one tensor");
    const int nd = parts[0].ndim();
    if (axis < 0) axis += nd;
    detail::check_arg(axis >= 0 && axis < nd, "concat: axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i) {
            if (i == axis) continue;
            detail::check(p.dim(i) == parts[0].dim(i),
                          "concat: non-axis dims disagree: " + shape_str(p.shape()) + " vs " +
                              shape_str(parts[0].shape()));
        }
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= parts[0].dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= parts[0].dim(i);

    TensorT<T> y(out_shape);
    {
        T* yd = y.data().data();
        std::int64_t offset = 0;
        for (const auto& p : parts) {
            const std::int64_t a = p.dim(axis);
            const T* pd = p.data().data();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy(pd + o * a * inner, pd + (o + 1) * a * inner,
                          yd + (o * axis_total + offset) * inner);
            }
            offset += a;
        }
    }

    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        y.set_requires_grad(true);
        TensorT<T> yc = y;
        std::vector<TensorT<T>> pc = parts;
        tape->record("concat", parts, y, [pc, yc, outer, inner, axis_total, axis]() mutable {
            const T* gy = yc.impl()->grad.data();
            std::int64_t offset = 0;
            for (auto& p : pc) {
                const std::int64_t a = p.dim(axis);
                if (p.requires_grad()) {
                    T* gp = p.grad().data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = gy + (o * axis_total + offset) * inner;
                        T* dst = gp + o * a * inner;
                        for (std::int64_t i = 0; i < a * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += a;
            }
        });
    }
    return y;
}

// Nearest-neighbour spatial resize (floor index mapping).
template <typename T>
TensorT<T> resize_nearest(const TensorT<T>& x, std::int64_t out_h, std::int64_t out_w,
                          TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() == 4, "resize_nearest: input must be N,C,H,W");
    detail::check_arg(out_h > 0 && out_w > 0, "resize_nearest: output size must be positive");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> y({N, C, out_h, out_w});
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* xplane = xd + nc * H * W;
        T* yplane = yd + nc * out_h * out_w;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
            const std::int64_t ih = oh * H / out_h;
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
                yplane[oh * out_w + ow] = xplane[ih * W + ow * W / out_w];
            }
        }
    }
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("resize_nearest", {x}, y, [xc, yc, N, C, H, W, out_h, out_w]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gx = xc.grad().data();
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                const T* gplane = gy + nc * out_h * out_w;
                T* gxplane = gx + nc * H * W;
                for (std::int64_t oh = 0; oh < out_h; ++oh) {
                    const std::int64_t ih = oh * H / out_h;
                    for (std::int64_t ow = 0; ow < out_w; ++ow) {
                        gxplane[ih * W + ow * W / out_w] += gplane[oh * out_w + ow];
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// patch unfold / fold (pure rearrangement, exact inverses)
//
// unfold maps pixel (n, d, h, w) to
//   batch    n*ph*pw + (h % ph)*pw + (w % pw)
//   sequence (h / ph)*(W/pw) + (w / pw)
//   feature  d

template <typename T>
TensorT<T> unfold_patches(const TensorT<T>& x, int ph, int pw, TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() == 4, "unfold_patches: input must be N,D,H,W");
    detail::check_arg(ph >= 1 && pw >= 1, "unfold_patches: patch size must be positive");
    const std::int64_t N = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % ph != 0 || W % pw != 0) {
        throw PatchSizeError("unfold_patches: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
    }
    const std::int64_t S = (H / ph) * (W / pw);
    TensorT<T> y({N * ph * pw, S, D});
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t d = 0; d < D; ++d) {
            const T* xplane = xd + (n * D + d) * H * W;
            for (std::int64_t h = 0; h < H; ++h) {
                for (std::int64_t w = 0; w < W; ++w) {
                    const std::int64_t b = n * ph * pw + (h % ph) * pw + (w % pw);
                    const std::int64_t s = (h / ph) * (W / pw) + (w / pw);
                    yd[(b * S + s) * D + d] = xplane[h * W + w];
                }
            }
        }
    }
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("unfold_patches", {x}, y, [xc, yc, N, D, H, W, ph, pw, S]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gx = xc.grad().data();
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t d = 0; d < D; ++d) {
                    T* gxplane = gx + (n * D + d) * H * W;
                    for (std::int64_t h = 0; h < H; ++h) {
                        for (std::int64_t w = 0; w < W; ++w) {
                            const std::int64_t b = n * ph * pw + (h % ph) * pw + (w % pw);
                            const std::int64_t s = (h / ph) * (W / pw) + (w / pw);
                            gxplane[h * W + w] += gy[(b * S + s) * D + d];
                        }
                    }
                }
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> fold_patches(const TensorT<T>& seq, int ph, int pw, std::int64_t H, std::int64_t W,
                        TapeT<T>* tape = nullptr) {
    detail::check(seq.ndim() == 3, "fold_patches: input must be B,S,D");
    detail::check_arg(ph >= 1 && pw >= 1, "fold_patches: patch size must be positive");
    const std::int64_t B = seq.dim(0), S = seq.dim(1), D = seq.dim(2);
    detail::check(B % (static_cast<std::int64_t>(ph) * pw) == 0,
                  "fold_patches: batch " + std::to_string(B) + " not a multiple of patch area");
    const std::int64_t N = B / (ph * pw);
    if (H % ph != 0 || W % pw != 0 || S != (H / ph) * (W / pw)) {
        throw DimensionError("fold_patches: sequence length " + std::to_string(S) +
                             " inconsistent with target " + std::to_string(H) + "x" + std::to_string(W) +
                             " and patch " + std::to_string(ph) + "x" + std::to_string(pw));
    }
    TensorT<T> y({N, D, H, W});
    const T* sd = seq.data().data();
    T* yd = y.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t d = 0; d < D; ++d) {
            T* yplane = yd + (n * D + d) * H * W;
            for (std::int64_t h = 0; h < H; ++h) {
                for (std::int64_t w = 0; w < W; ++w) {
                    const std::int64_t b = n * ph * pw + (h % ph) * pw + (w % pw);
                    const std::int64_t s = (h / ph) * (W / pw) + (w / pw);
                    yplane[h * W + w] = sd[(b * S + s) * D + d];
                }
            }
        }
    }
    if (tape && seq.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> sc = seq, yc = y;
        tape->record("fold_patches", {seq}, y, [sc, yc, N, D, H, W, ph, pw, S]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gs = sc.grad().data();
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t d = 0; d < D; ++d) {
                    const T* gplane = gy + (n * D + d) * H * W;
                    for (std::int64_t h = 0; h < H; ++h) {
                        for (std::int64_t w = 0; w < W; ++w) {
                            const std::int64_t b = n * ph * pw + (h % ph) * pw + (w % pw);
                            const std::int64_t s = (h / ph) * (W / pw) + (w / pw);
                            gs[(b * S + s) * D + d] += gplane[h * W + w];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// attention head split/merge: [B, S, h*dh] <-> [B*h, S, dh]

template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, int heads, TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() == 3, "split_heads: input must be B,S,D");
    const std::int64_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
    detail::check(D % heads == 0,
                  "split_heads: dim " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
    const std::int64_t dh = D / heads;
    TensorT<T> y({B * heads, S, dh});
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t s = 0; s < S; ++s) {
            const T* xrow = xd + (b * S + s) * D;
            for (std::int64_t h = 0; h < heads; ++h) {
                std::copy(xrow + h * dh, xrow + (h + 1) * dh, yd + ((b * heads + h) * S + s) * dh);
            }
        }
    }
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("split_heads", {x}, y, [xc, yc, B, S, D, heads, dh]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gx = xc.grad().data();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t s = 0; s < S; ++s) {
                    T* gxrow = gx + (b * S + s) * D;
                    for (std::int64_t h = 0; h < heads; ++h) {
                        const T* grow = gy + ((b * heads + h) * S + s) * dh;
                        for (std::int64_t j = 0; j < dh; ++j) gxrow[h * dh + j] += grow[j];
                    }
                }
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x, int heads, TapeT<T>* tape = nullptr) {
    detail::check(x.ndim() == 3, "merge_heads: input must be B*h,S,dh");
    const std::int64_t Bh = x.dim(0), S = x.dim(1), dh = x.dim(2);
    detail::check(Bh % heads == 0, "merge_heads: batch not divisible by heads");
    const std::int64_t B = Bh / heads, D = dh * heads;
    TensorT<T> y({B, S, D});
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t s = 0; s < S; ++s) {
            T* yrow = yd + (b * S + s) * D;
            for (std::int64_t h = 0; h < heads; ++h) {
                const T* xrow = xd + ((b * heads + h) * S + s) * dh;
                std::copy(xrow, xrow + dh, yrow + h * dh);
            }
        }
    }
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("merge_heads", {x}, y, [xc, yc, B, S, D, heads, dh]() mutable {
            const T* gy = yc.impl()->grad.data();
            T* gx = xc.grad().data();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t s = 0; s < S; ++s) {
                    const T* grow = gy + (b * S + s) * D;
                    for (std::int64_t h = 0; h < heads; ++h) {
                        T* gxrow = gx + ((b * heads + h) * S + s) * dh;
                        for (std::int64_t j = 0; j < dh; ++j) gxrow[j] += grow[h * dh + j];
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    TensorT<T> y = TensorT<T>::scalar(static_cast<T>(acc));
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("sum", {x}, y, [xc, yc]() mutable {
            const T g = yc.impl()->grad[0];
            T* gx = xc.grad().data();
            for (std::int64_t i = 0; i < xc.numel(); ++i) gx[i] += g;
        });
    }
    return y;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    const std::int64_t n = x.numel();
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    TensorT<T> y = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> xc = x, yc = y;
        tape->record("mean", {x}, y, [xc, yc, n]() mutable {
            const T g = static_cast<T>(static_cast<double>(yc.impl()->grad[0]) / static_cast<double>(n));
            T* gx = xc.grad().data();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// segmentation loss: 0.5 * BCE-with-logits + 0.5 * soft-Dice (eps = 1)

template <typename T>
TensorT<T> bce_dice_loss(const TensorT<T>& logits, const TensorT<T>& masks, TapeT<T>* tape = nullptr) {
    detail::check(logits.shape() == masks.shape(), "loss: logits shape " + shape_str(logits.shape()) +
                                                       " does not match masks " + shape_str(masks.shape()));
    const std::int64_t n = logits.numel();
    const T* zd = logits.data().data();
    const T* gd = masks.data().data();
    static constexpr double kDiceEps = 1.0;

    double bce = 0.0, sum_pg = 0.0, sum_p = 0.0, sum_g = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = static_cast<double>(zd[i]);
        const double g = static_cast<double>(gd[i]);
        const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        bce += softplus - g * z;
        const double p = detail::sigmoid_d(z);
        sum_pg += p * g;
        sum_p += p;
        sum_g += g;
    }
    bce /= static_cast<double>(n);
    const double dice = (2.0 * sum_pg + kDiceEps) / (sum_p + sum_g + kDiceEps);
    TensorT<T> y = TensorT<T>::scalar(static_cast<T>(0.5 * bce + 0.5 * (1.0 - dice)));

    if (tape && logits.requires_grad()) {
        y.set_requires_grad(true);
        TensorT<T> zc = logits, mc = masks, yc = y;
        tape->record("bce_dice_loss", {logits, masks}, y, [zc, mc, yc, n, sum_pg, sum_p, sum_g]() mutable {
            const double denom = sum_p + sum_g + kDiceEps;
            const double numer = 2.0 * sum_pg + kDiceEps;
            const double gy = static_cast<double>(yc.impl()->grad[0]);
            const T* zd2 = zc.data().data();
            const T* gd2 = mc.data().data();
            T* gz = zc.grad().data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double z = static_cast<double>(zd2[i]);
                const double g = static_cast<double>(gd2[i]);
                const double p = detail::sigmoid_d(z);
                const double dbce_dz = (p - g) / static_cast<double>(n);
                // d(1 - dice)/dp = -(2 g denom - numer) / denom^2
                const double ddice_dp = -(2.0 * g * denom - numer) / (denom * denom);
                const double dz = 0.5 * dbce_dz + 0.5 * ddice_dp * p * (1.0 - p);
                gz[i] += static_cast<T>(gy * dz);
            }
        });
    }
    return y;
}

}  // namespace mutr
