#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "ctm/blas.hpp"
#include "ctm/parallel.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

// ---------------------------------------------------------------------------
// Elementwise ops with one-sided broadcasting: b must match a's rank and each
// axis extent is either equal or 1 (stretched). Adjoints for b sum over the
// stretched axes.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline std::vector<std::int64_t> bcast_strides(const Shape& a, const Shape& b,
                                               const char* op) {
    if (a.size() != b.size())
        throw_shape(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    std::vector<std::int64_t> strides(b.size());
    std::int64_t s = 1;
    for (int i = static_cast<int>(b.size()) - 1; i >= 0; --i) {
        strides[static_cast<size_t>(i)] = s;
        s *= b[static_cast<size_t>(i)];
    }
    for (size_t i = 0; i < a.size(); ++i) {
        if (b[i] == a[i]) continue;
        if (b[i] == 1)
            strides[i] = 0;
        else
            throw_shape(op, "cannot broadcast " + shape_str(b) + " to " + shape_str(a));
    }
    return strides;
}

// Iterates a's flat order while tracking b's broadcast index.
template <class T, class Fn>
inline void bcast_loop(const Shape& ash, const std::vector<std::int64_t>& bstr, Fn fn) {
    const int rank = static_cast<int>(ash.size());
    const std::int64_t n = numel_of(ash);
    std::vector<std::int64_t> idx(static_cast<size_t>(rank), 0);
    std::int64_t bi = 0;
    for (std::int64_t ai = 0; ai < n; ++ai) {
        fn(ai, bi);
        for (int d = rank - 1; d >= 0; --d) {
            auto ud = static_cast<size_t>(d);
            ++idx[ud];
            bi += bstr[ud];
            if (idx[ud] < ash[ud]) break;
            bi -= bstr[ud] * ash[ud];
            idx[ud] = 0;
        }
    }
}

enum class Ew { add, sub, mul, div };

template <class T, Ew op>
Tensor<T> ewise(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
    auto bstr = bcast_strides<T>(a.shape(), b.shape(), name);
    Tensor<T> y(a.shape());
    auto ad = a.data();
    auto bd = b.data();
    auto yd = y.data();
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            if constexpr (op == Ew::add) yd[i] = ad[i] + bd[i];
            if constexpr (op == Ew::sub) yd[i] = ad[i] - bd[i];
            if constexpr (op == Ew::mul) yd[i] = ad[i] * bd[i];
            if constexpr (op == Ew::div) yd[i] = ad[i] / bd[i];
        }
    } else {
        bcast_loop<T>(a.shape(), bstr, [&](std::int64_t ai, std::int64_t bi) {
            if constexpr (op == Ew::add) yd[ai] = ad[ai] + bd[bi];
            if constexpr (op == Ew::sub) yd[ai] = ad[ai] - bd[bi];
            if constexpr (op == Ew::mul) yd[ai] = ad[ai] * bd[bi];
            if constexpr (op == Ew::div) yd[ai] = ad[ai] / bd[bi];
        });
    }
    auto* tape = active_tape<T>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi_ = b.impl();
        auto yi = y.impl();
        Shape ash = a.shape();
        tape->record([ai, bi_, yi, bstr, ash] {
            const bool need_a = ai->requires_grad;
            const bool need_b = bi_->requires_grad;
            bcast_loop<T>(ash, bstr, [&](std::int64_t k, std::int64_t kb) {
                const T g = yi->grad[static_cast<size_t>(k)];
                if constexpr (op == Ew::add) {
                    if (need_a) ai->grad[static_cast<size_t>(k)] += g;
                    if (need_b) bi_->grad[static_cast<size_t>(kb)] += g;
                }
                if constexpr (op == Ew::sub) {
                    if (need_a) ai->grad[static_cast<size_t>(k)] += g;
                    if (need_b) bi_->grad[static_cast<size_t>(kb)] -= g;
                }
                if constexpr (op == Ew::mul) {
                    if (need_a)
                        ai->grad[static_cast<size_t>(k)] += g * bi_->data[static_cast<size_t>(kb)];
                    if (need_b)
                        bi_->grad[static_cast<size_t>(kb)] += g * ai->data[static_cast<size_t>(k)];
                }
                if constexpr (op == Ew::div) {
                    const T bv = bi_->data[static_cast<size_t>(kb)];
                    if (need_a) ai->grad[static_cast<size_t>(k)] += g / bv;
                    if (need_b)
                        bi_->grad[static_cast<size_t>(kb)] -=
                            g * ai->data[static_cast<size_t>(k)] / (bv * bv);
                }
            });
        });
    }
    debug_check_finite(y, name);
    return y;
}

template <class T, Ew op>
Tensor<T> ewise_scalar(const Tensor<T>& a, T s, const char* name) {
    Tensor<T> y(a.shape());
    auto ad = a.data();
    auto yd = y.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if constexpr (op == Ew::add) yd[i] = ad[i] + s;
        if constexpr (op == Ew::sub) yd[i] = ad[i] - s;
        if constexpr (op == Ew::mul) yd[i] = ad[i] * s;
        if constexpr (op == Ew::div) yd[i] = ad[i] / s;
    }
    auto* tape = active_tape<T>();
    if (tape && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto yi = y.impl();
        tape->record([ai, yi, s] {
            for (size_t k = 0; k < yi->grad.size(); ++k) {
                const T g = yi->grad[k];
                if constexpr (op == Ew::add || op == Ew::sub) ai->grad[k] += g;
                if constexpr (op == Ew::mul) ai->grad[k] += g * s;
                if constexpr (op == Ew::div) ai->grad[k] += g / s;
            }
        });
    }
    debug_check_finite(y, name);
    return y;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ewise<T, detail::Ew::add>(a, b, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ewise<T, detail::Ew::sub>(a, b, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ewise<T, detail::Ew::mul>(a, b, "mul");
}
template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ewise<T, detail::Ew::div>(a, b, "div");
}
template <class T>
Tensor<T> add(const Tensor<T>& a, T s) {
    return detail::ewise_scalar<T, detail::Ew::add>(a, s, "add_scalar");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, T s) {
    return detail::ewise_scalar<T, detail::Ew::sub>(a, s, "sub_scalar");
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::ewise_scalar<T, detail::Ew::mul>(a, s, "scale");
}
template <class T>
Tensor<T> divide(const Tensor<T>& a, T s) {
    return detail::ewise_scalar<T, detail::Ew::div>(a, s, "div_scalar");
}

// ---------------------------------------------------------------------------
// matmul: (m,k) x (k,n) -> (m,n). Adjoints da = g b^T, db = a^T g.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw_shape("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) +
                                  " and " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw_shape("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    Tensor<T> y({m, n});
    gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
            y.data().data(), n);
    auto* tape = active_tape<T>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        tape->record([ai, bi, yi, m, k, n] {
            if (ai->requires_grad)
                gemm<T>(false, true, m, k, n, T(1), yi->grad.data(), n, bi->data.data(), n,
                        T(1), ai->grad.data(), k);
            if (bi->requires_grad)
                gemm<T>(true, false, k, n, m, T(1), ai->data.data(), k, yi->grad.data(), n,
                        T(1), bi->grad.data(), n);
        });
    }
    debug_check_finite(y, "matmul");
    return y;
}

// Fully-connected layer: x (B,in) * w^T (in,out) + bias (out).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw_shape("linear", "bad ranks");
    const std::int64_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in || b.dim(0) != out)
        throw_shape("linear", "x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
    Tensor<T> y({batch, out});
    gemm<T>(false, true, batch, out, in, T(1), x.data().data(), in, w.data().data(), in,
            T(0), y.data().data(), out);
    {
        auto yd = y.data();
        auto bd = b.data();
        for (std::int64_t r = 0; r < batch; ++r)
            for (std::int64_t c = 0; c < out; ++c) yd[r * out + c] += bd[c];
    }
    auto* tape = active_tape<T>();
    if (tape && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        tape->record([xi, wi, bi, yi, batch, in, out] {
            if (xi->requires_grad)
                gemm<T>(false, false, batch, in, out, T(1), yi->grad.data(), out,
                        wi->data.data(), in, T(1), xi->grad.data(), in);
            if (wi->requires_grad)
                gemm<T>(true, false, out, in, batch, T(1), yi->grad.data(), out,
                        xi->data.data(), in, T(1), wi->grad.data(), in);
            if (bi->requires_grad)
                for (std::int64_t r = 0; r < batch; ++r)
                    for (std::int64_t c = 0; c < out; ++c)
                        bi->grad[static_cast<size_t>(c)] +=
                            yi->grad[static_cast<size_t>(r * out + c)];
        });
    }
    debug_check_finite(y, "linear");
    return y;
}

// ---------------------------------------------------------------------------
// conv2d: x (B,C,H,W), w (OC,C,KH,KW), bias (OC) -> (B,OC,OH,OW).
// im2col + GEMM; the column matrices are kept for the backward pass.
// Weight-gradient reduction uses partition-indexed buffers summed in index
// order, so results do not depend on the thread count.
// ---------------------------------------------------------------------------

namespace detail {

// Column matrices are batched: shape (C*KH*KW, B*OH*OW) with sample s owning
// columns [s*OH*OW, (s+1)*OH*OW). ldcols is the full row length B*OH*OW.

template <class T>
void im2col(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t oh, std::int64_t ow, T* cols, std::int64_t ldcols) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((c * kh + ki) * kw + kj) * ldcols;
                const T* src = x + c * h * w;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, std::int64_t c_in, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t oh, std::int64_t ow, T* x_grad, std::int64_t ldcols) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * ldcols;
                T* dst = x_grad + c * h * w;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[iy * w + ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

// (OC, B*span) channel-major scratch <-> (B, OC, span) sample-major tensor.
template <class T>
void scatter_rows(const T* packed, std::int64_t b, std::int64_t oc, std::int64_t span,
                  const T* bias, T* out) {
    parallel_for(b, 4, [&](std::int64_t s0, std::int64_t s1) {
        for (std::int64_t s = s0; s < s1; ++s)
            for (std::int64_t o = 0; o < oc; ++o) {
                const T* src = packed + o * b * span + s * span;
                T* dst = out + (s * oc + o) * span;
                if (bias) {
                    const T bv = bias[o];
                    for (std::int64_t i = 0; i < span; ++i) dst[i] = src[i] + bv;
                } else {
                    std::copy_n(src, span, dst);
                }
            }
    });
}

template <class T>
void gather_rows(const T* grad, std::int64_t b, std::int64_t oc, std::int64_t span,
                 T* packed) {
    parallel_for(b, 4, [&](std::int64_t s0, std::int64_t s1) {
        for (std::int64_t s = s0; s < s1; ++s)
            for (std::int64_t o = 0; o < oc; ++o)
                std::copy_n(grad + (s * oc + o) * span, span,
                            packed + o * b * span + s * span);
    });
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t pad) {
    if (x.rank() != 4 || w.rank() != 4) throw_shape("conv2d", "x and w must be rank 4");
    const std::int64_t b = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != c_in)
        throw_shape("conv2d", "in-channels differ: x " + shape_str(x.shape()) + " w " +
                                  shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != oc))
        throw_shape("conv2d", "bias must be (out_channels)");
    if (stride < 1) throw_shape("conv2d", "stride must be >= 1");
    if (pad < 0) throw_shape("conv2d", "pad must be >= 0");
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
        throw_shape("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " larger than padded input");
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    const std::int64_t ckk = c_in * kh * kw;
    const std::int64_t span = oh * ow;

    Tensor<T> y({b, oc, oh, ow});
    const std::int64_t cols_ld = b * span;
    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(ckk * cols_ld));
    {
        const T* xd = x.data().data();
        T* cd = cols->data();
        parallel_for(b, 1, [&](std::int64_t s0, std::int64_t s1) {
            for (std::int64_t s = s0; s < s1; ++s)
                detail::im2col(xd + s * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad,
                               oh, ow, cd + s * span, cols_ld);
        });
        std::vector<T> packed(static_cast<size_t>(oc * cols_ld));
        gemm<T>(false, false, oc, cols_ld, ckk, T(1), w.data().data(), ckk, cd, cols_ld,
                T(0), packed.data(), cols_ld);
        detail::scatter_rows(packed.data(), b, oc, span,
                             bias.defined() ? bias.data().data() : nullptr,
                             y.data().data());
    }

    auto* tape = active_tape<T>();
    if (tape && (x.requires_grad() || w.requires_grad() ||
                 (bias.defined() && bias.requires_grad()))) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        auto yi = y.impl();
        tape->record([xi, wi, bi, yi, cols, b, c_in, h, wd, oc, kh, kw, stride, pad, oh,
                      ow, ckk, span, cols_ld] {
            std::vector<T> packed(static_cast<size_t>(oc * cols_ld));
            detail::gather_rows(yi->grad.data(), b, oc, span, packed.data());
            if (wi->requires_grad)
                gemm<T>(false, true, oc, ckk, cols_ld, T(1), packed.data(), cols_ld,
                        cols->data(), cols_ld, T(1), wi->grad.data(), ckk);
            if (bi && bi->requires_grad) {
                for (std::int64_t o = 0; o < oc; ++o) {
                    double acc = 0.0;
                    const T* row = packed.data() + o * cols_ld;
                    for (std::int64_t i = 0; i < cols_ld; ++i)
                        acc += static_cast<double>(row[i]);
                    bi->grad[static_cast<size_t>(o)] += static_cast<T>(acc);
                }
            }
            if (xi->requires_grad) {
                std::vector<T> dcols(static_cast<size_t>(ckk * cols_ld));
                gemm<T>(true, false, ckk, cols_ld, oc, T(1), wi->data.data(), ckk,
                        packed.data(), cols_ld, T(0), dcols.data(), cols_ld);
                parallel_for(b, 1, [&](std::int64_t s0, std::int64_t s1) {
                    for (std::int64_t s = s0; s < s1; ++s)
                        detail::col2im_add(dcols.data() + s * span, c_in, h, wd, kh, kw,
                                           stride, pad, oh, ow,
                                           xi->grad.data() + s * c_in * h * wd, cols_ld);
                });
            }
        });
    }
    debug_check_finite(y, "conv2d");
    return y;
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 window, stride 2, ceil mode (odd edges behave as -inf pad).
// Ties go to the first element in scan order so adjoints are deterministic.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
    if (x.rank() != 4) throw_shape("maxpool2", "expects rank-4 input");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    Tensor<T> y({b, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<size_t>(y.numel()));
    const T* xd = x.data().data();
    T* yd = y.data().data();
    std::int32_t* am = argmax->data();
    for (std::int64_t s = 0; s < b * c; ++s) {
        const T* plane = xd + s * h * w;
        T* out = yd + s * oh * ow;
        std::int32_t* aidx = am + s * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                // seed with the window's first element so ties (and NaN)
                // resolve to the first scan position
                T best = plane[oy * 2 * w + ox * 2];
                std::int64_t best_i = oy * 2 * w + ox * 2;
                for (std::int64_t dy = 0; dy < 2; ++dy) {
                    const std::int64_t iy = oy * 2 + dy;
                    if (iy >= h) break;
                    for (std::int64_t dx = 0; dx < 2; ++dx) {
                        const std::int64_t ix = ox * 2 + dx;
                        if (ix >= w) break;
                        const T v = plane[iy * w + ix];
                        if (v > best) {
                            best = v;
                            best_i = iy * w + ix;
                        }
                    }
                }
                out[oy * ow + ox] = best;
                aidx[oy * ow + ox] = static_cast<std::int32_t>(best_i);
            }
        }
    }
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi, argmax, b, c, h, w, oh, ow] {
            for (std::int64_t s = 0; s < b * c; ++s) {
                const T* g = yi->grad.data() + s * oh * ow;
                const std::int32_t* aidx = argmax->data() + s * oh * ow;
                T* xg = xi->grad.data() + s * h * w;
                for (std::int64_t i = 0; i < oh * ow; ++i) xg[aidx[i]] += g[i];
            }
        });
    }
    debug_check_finite(y, "maxpool2");
    return y;
}

// ---------------------------------------------------------------------------
// relu / sigmoid
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    auto xd = x.data();
    auto yd = y.data();
    // std::max keeps NaN (comparison false -> first arg) so numeric failures
    // surface at the loss instead of silently clamping to zero
    for (std::int64_t i = 0; i < x.numel(); ++i) yd[i] = std::max(xd[i], T(0));
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi] {
            for (size_t i = 0; i < yi->grad.size(); ++i)
                if (xi->data[i] > T(0)) xi->grad[i] += yi->grad[i];
        });
    }
    debug_check_finite(y, "relu");
    return y;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    auto xd = x.data();
    auto yd = y.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) yd[i] = T(1) / (T(1) + std::exp(-xd[i]));
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi] {
            for (size_t i = 0; i < yi->grad.size(); ++i) {
                const T s = yi->data[i];
                xi->grad[i] += yi->grad[i] * s * (T(1) - s);
            }
        });
    }
    debug_check_finite(y, "sigmoid");
    return y;
}

// ---------------------------------------------------------------------------
// batchnorm2d over (sample, height, width) per channel.
// Training mode uses biased batch statistics and updates running stats with
// the given momentum; eval mode normalizes by the running stats.
// ---------------------------------------------------------------------------

namespace detail {
// Per-channel biased batch statistics in one streaming pass.
template <class T>
void batch_stats(const T* xd, std::int64_t b, std::int64_t c, std::int64_t plane,
                 std::vector<double>& mean, std::vector<double>& var) {
    const std::int64_t m = b * plane;
    std::vector<double> sum(static_cast<size_t>(c), 0.0);
    std::vector<double> sumsq(static_cast<size_t>(c), 0.0);
    for (std::int64_t s = 0; s < b; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* p = xd + (s * c + ch) * plane;
            double a0 = 0.0, a1 = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double v = static_cast<double>(p[i]);
                a0 += v;
                a1 += v * v;
            }
            sum[static_cast<size_t>(ch)] += a0;
            sumsq[static_cast<size_t>(ch)] += a1;
        }
    mean.resize(static_cast<size_t>(c));
    var.resize(static_cast<size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double mu = sum[static_cast<size_t>(ch)] / static_cast<double>(m);
        double v = sumsq[static_cast<size_t>(ch)] / static_cast<double>(m) - mu * mu;
        if (v < 0.0) v = 0.0;
        mean[static_cast<size_t>(ch)] = mu;
        var[static_cast<size_t>(ch)] = v;
    }
}
}  // namespace detail

// Folds the batch statistics of x into the running buffers without touching
// the autodiff tape (running stats are buffers, not differentiable state).
template <class T>
void batchnorm2d_update_stats(const Tensor<T>& x, Tensor<T>& running_mean,
                              Tensor<T>& running_var, T momentum) {
    if (x.rank() != 4) throw_shape("batchnorm2d_update_stats", "expects rank-4 input");
    const std::int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<double> mean, var;
    detail::batch_stats(x.data().data(), b, c, plane, mean, var);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] +
                                  momentum * static_cast<T>(mean[static_cast<size_t>(ch)]);
        running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] +
                                 momentum * static_cast<T>(var[static_cast<size_t>(ch)]);
    }
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.rank() != 4) throw_shape("batchnorm2d", "expects rank-4 input");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw_shape("batchnorm2d", "per-channel parameter size mismatch");
    const std::int64_t plane = h * w;
    const std::int64_t m = b * plane;

    std::vector<T> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    const T* xd = x.data().data();
    if (training) {
        std::vector<double> mu, var;
        detail::batch_stats(xd, b, c, plane, mu, var);
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = static_cast<T>(mu[static_cast<size_t>(ch)]);
            invstd[static_cast<size_t>(ch)] =
                T(1) / std::sqrt(static_cast<T>(var[static_cast<size_t>(ch)]) + eps);
            running_mean.data()[ch] =
                (T(1) - momentum) * running_mean.data()[ch] +
                momentum * static_cast<T>(mu[static_cast<size_t>(ch)]);
            running_var.data()[ch] =
                (T(1) - momentum) * running_var.data()[ch] +
                momentum * static_cast<T>(var[static_cast<size_t>(ch)]);
        }
    } else {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = running_mean.data()[ch];
            invstd[static_cast<size_t>(ch)] =
                T(1) / std::sqrt(running_var.data()[ch] + eps);
        }
    }

    Tensor<T> y(x.shape());
    {
        T* yd = y.data().data();
        const T* gm = gamma.data().data();
        const T* bt = beta.data().data();
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T mu = mean[static_cast<size_t>(ch)];
                const T is = invstd[static_cast<size_t>(ch)];
                const T g = gm[ch], bb = bt[ch];
                const T* px = xd + (s * c + ch) * plane;
                T* py = yd + (s * c + ch) * plane;
                for (std::int64_t i = 0; i < plane; ++i) py[i] = g * (px[i] - mu) * is + bb;
            }
    }

    auto* tape = active_tape<T>();
    if (tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto yi = y.impl();
        tape->record([xi, gi, bi, yi, mean, invstd, training, b, c, plane, m] {
            // streaming s1 = sum(g), s2 = sum(g * xhat) per channel
            std::vector<double> s1(static_cast<size_t>(c), 0.0);
            std::vector<double> s2(static_cast<size_t>(c), 0.0);
            for (std::int64_t s = 0; s < b; ++s)
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T mu = mean[static_cast<size_t>(ch)];
                    const T is = invstd[static_cast<size_t>(ch)];
                    const std::size_t off = static_cast<size_t>((s * c + ch) * plane);
                    double a0 = 0.0, a1 = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const T g = yi->grad[off + static_cast<size_t>(i)];
                        a0 += static_cast<double>(g);
                        a1 += static_cast<double>(g) *
                              static_cast<double>(
                                  (xi->data[off + static_cast<size_t>(i)] - mu) * is);
                    }
                    s1[static_cast<size_t>(ch)] += a0;
                    s2[static_cast<size_t>(ch)] += a1;
                }
            for (std::int64_t ch = 0; ch < c; ++ch) {
                if (gi->requires_grad)
                    gi->grad[static_cast<size_t>(ch)] += static_cast<T>(s2[static_cast<size_t>(ch)]);
                if (bi->requires_grad)
                    bi->grad[static_cast<size_t>(ch)] += static_cast<T>(s1[static_cast<size_t>(ch)]);
            }
            if (xi->requires_grad) {
                const T inv_m = T(1) / static_cast<T>(m);
                for (std::int64_t s = 0; s < b; ++s)
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        const T mu = mean[static_cast<size_t>(ch)];
                        const T is = invstd[static_cast<size_t>(ch)];
                        const T gm = gi->data[static_cast<size_t>(ch)];
                        const T c1 = static_cast<T>(s1[static_cast<size_t>(ch)]) * inv_m;
                        const T c2 = static_cast<T>(s2[static_cast<size_t>(ch)]) * inv_m;
                        const std::size_t off = static_cast<size_t>((s * c + ch) * plane);
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const T g = yi->grad[off + static_cast<size_t>(i)];
                            if (training) {
                                const T xh =
                                    (xi->data[off + static_cast<size_t>(i)] - mu) * is;
                                xi->grad[off + static_cast<size_t>(i)] +=
                                    gm * is * (g - c1 - xh * c2);
                            } else {
                                xi->grad[off + static_cast<size_t>(i)] += gm * is * g;
                            }
                        }
                    }
            }
        });
    }
    debug_check_finite(y, "batchnorm2d");
    return y;
}

// ---------------------------------------------------------------------------
// softmax along one axis; max-subtracted for stability.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_axis(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) throw_shape("softmax_axis", "axis out of range");
    std::int64_t outer = 1, inner = 1;
    const std::int64_t len = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<T> y(x.shape());
    const T* xd = x.data().data();
    T* yd = y.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t l = 0; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
            T sum = T(0);
            for (std::int64_t l = 0; l < len; ++l) {
                const T e = std::exp(xd[base + l * inner] - mx);
                yd[base + l * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::int64_t l = 0; l < len; ++l) yd[base + l * inner] *= inv;
        }
    }
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi, outer, len, inner] {
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::int64_t l = 0; l < len; ++l) {
                        const auto k = static_cast<size_t>(base + l * inner);
                        dot += yi->grad[k] * yi->data[k];
                    }
                    for (std::int64_t l = 0; l < len; ++l) {
                        const auto k = static_cast<size_t>(base + l * inner);
                        xi->grad[k] += (yi->grad[k] - dot) * yi->data[k];
                    }
                }
        });
    }
    debug_check_finite(y, "softmax_axis");
    return y;
}

// ---------------------------------------------------------------------------
// Shape ops: reshape (copy), transpose2d, narrow0, concat0, mean_axis,
// sum_all / mean_all.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw_shape("reshape", shape_str(x.shape()) + " -> " + shape_str(shape) +
                                   " changes element count");
    Tensor<T> y = Tensor<T>::from_data(std::move(shape),
                                       std::vector<T>(x.data().begin(), x.data().end()));
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi] {
            for (size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

// Flattens all axes after the first: (B, ...) -> (B, rest).
template <class T>
Tensor<T> flatten2(const Tensor<T>& x) {
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    if (x.rank() != 2) throw_shape("transpose2d", "expects rank-2 input");
    const std::int64_t r = x.dim(0), c = x.dim(1);
    Tensor<T> y({c, r});
    auto xd = x.data();
    auto yd = y.data();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) yd[j * r + i] = xd[i * c + j];
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi, r, c] {
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    xi->grad[static_cast<size_t>(i * c + j)] +=
                        yi->grad[static_cast<size_t>(j * r + i)];
        });
    }
    return y;
}

template <class T>
Tensor<T> narrow0(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
    if (start < 0 || len <= 0 || start + len > x.dim(0))
        throw_shape("narrow0", "range [" + std::to_string(start) + "," +
                                   std::to_string(start + len) + ") out of " +
                                   std::to_string(x.dim(0)));
    Shape os = x.shape();
    os[0] = len;
    const std::int64_t row = x.numel() / x.dim(0);
    Tensor<T> y(os);
    std::copy_n(x.data().data() + start * row, len * row, y.data().data());
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi, start, row] {
            for (size_t i = 0; i < yi->grad.size(); ++i)
                xi->grad[static_cast<size_t>(start * row) + i] += yi->grad[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw_shape("concat0", "empty input list");
    Shape os = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(os.size()))
            throw_shape("concat0", "rank mismatch");
        for (int i = 1; i < p.rank(); ++i)
            if (p.dim(i) != os[static_cast<size_t>(i)])
                throw_shape("concat0", "trailing extents differ");
        total += p.dim(0);
    }
    os[0] = total;
    Tensor<T> y(os);
    std::int64_t off = 0;
    bool rg = false;
    for (const auto& p : parts) {
        std::copy_n(p.data().data(), p.numel(), y.data().data() + off);
        off += p.numel();
        rg = rg || p.requires_grad();
    }
    auto* tape = active_tape<T>();
    if (tape && rg) {
        y.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        auto yi = y.impl();
        tape->record([impls, yi] {
            std::int64_t off2 = 0;
            for (const auto& pi : impls) {
                if (pi->requires_grad)
                    for (size_t i = 0; i < pi->data.size(); ++i)
                        pi->grad[i] += yi->grad[static_cast<size_t>(off2) + i];
                off2 += static_cast<std::int64_t>(pi->data.size());
            }
        });
    }
    return y;
}

// Mean over one axis, removing it.
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) throw_shape("mean_axis", "axis out of range");
    std::int64_t outer = 1, inner = 1;
    const std::int64_t len = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape os;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) os.push_back(x.dim(i));
    if (os.empty()) os.push_back(1);
    Tensor<T> y(os);
    const T* xd = x.data().data();
    T* yd = y.data().data();
    const T inv = T(1) / static_cast<T>(len);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            T acc = T(0);
            for (std::int64_t l = 0; l < len; ++l) acc += xd[(o * len + l) * inner + in];
            yd[o * inner + in] = acc * inv;
        }
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi, outer, len, inner, inv] {
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const T g = yi->grad[static_cast<size_t>(o * inner + in)] * inv;
                    for (std::int64_t l = 0; l < len; ++l)
                        xi->grad[static_cast<size_t>((o * len + l) * inner + in)] += g;
                }
        });
    }
    return y;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    auto* tape = active_tape<T>();
    if (tape && x.requires_grad()) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        tape->record([xi, yi] {
            const T g = yi->grad[0];
            for (auto& gv : xi->grad) gv += g;
        });
    }
    return y;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return divide(sum_all(x), static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Pairwise comparison kernels for metric heads.
// ---------------------------------------------------------------------------

// a (A,F), b (B,F) -> (A,B) with y_ij = sum_f (a_if - b_jf)^2.
template <class T>
Tensor<T> pairwise_sqdist(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw_shape("pairwise_sqdist", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t ra = a.dim(0), rb = b.dim(0), f = a.dim(1);
    Tensor<T> y({ra, rb});
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* yd = y.data().data();
    for (std::int64_t i = 0; i < ra; ++i)
        for (std::int64_t j = 0; j < rb; ++j) {
            T acc = T(0);
            const T* pa = ad + i * f;
            const T* pb = bd + j * f;
            for (std::int64_t k = 0; k < f; ++k) {
                const T d = pa[k] - pb[k];
                acc += d * d;
            }
            yd[i * rb + j] = acc;
        }
    auto* tape = active_tape<T>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        tape->record([ai, bi, yi, ra, rb, f] {
            for (std::int64_t i = 0; i < ra; ++i)
                for (std::int64_t j = 0; j < rb; ++j) {
                    const T g2 = T(2) * yi->grad[static_cast<size_t>(i * rb + j)];
                    if (g2 == T(0)) continue;
                    const T* pa = ai->data.data() + i * f;
                    const T* pb = bi->data.data() + j * f;
                    for (std::int64_t k = 0; k < f; ++k) {
                        const T d = g2 * (pa[k] - pb[k]);
                        if (ai->requires_grad) ai->grad[static_cast<size_t>(i * f + k)] += d;
                        if (bi->requires_grad) bi->grad[static_cast<size_t>(j * f + k)] -= d;
                    }
                }
        });
    }
    debug_check_finite(y, "pairwise_sqdist");
    return y;
}

// a (A,F), b (B,F) -> (A,B) cosine similarity, eps-guarded denominator.
template <class T>
Tensor<T> pairwise_cosine(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw_shape("pairwise_cosine", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t ra = a.dim(0), rb = b.dim(0), f = a.dim(1);
    auto norms = [f](const T* base, std::int64_t rows) {
        std::vector<T> out(static_cast<size_t>(rows));
        for (std::int64_t r = 0; r < rows; ++r) {
            T acc = T(0);
            for (std::int64_t k = 0; k < f; ++k) acc += base[r * f + k] * base[r * f + k];
            out[static_cast<size_t>(r)] = std::sqrt(acc);
        }
        return out;
    };
    std::vector<T> na = norms(a.data().data(), ra);
    std::vector<T> nb = norms(b.data().data(), rb);
    Tensor<T> y({ra, rb});
    {
        const T* ad = a.data().data();
        const T* bd = b.data().data();
        T* yd = y.data().data();
        for (std::int64_t i = 0; i < ra; ++i)
            for (std::int64_t j = 0; j < rb; ++j) {
                T dot = T(0);
                for (std::int64_t k = 0; k < f; ++k) dot += ad[i * f + k] * bd[j * f + k];
                yd[i * rb + j] =
                    dot / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(j)] + eps);
            }
    }
    auto* tape = active_tape<T>();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        tape->record([ai, bi, yi, na, nb, ra, rb, f, eps] {
            const T tiny = T(1e-12);
            for (std::int64_t i = 0; i < ra; ++i)
                for (std::int64_t j = 0; j < rb; ++j) {
                    const T g = yi->grad[static_cast<size_t>(i * rb + j)];
                    if (g == T(0)) continue;
                    const T nai = std::max(na[static_cast<size_t>(i)], tiny);
                    const T nbj = std::max(nb[static_cast<size_t>(j)], tiny);
                    const T den = na[static_cast<size_t>(i)] * nb[static_cast<size_t>(j)] + eps;
                    const T yv = yi->data[static_cast<size_t>(i * rb + j)];
                    const T* pa = ai->data.data() + i * f;
                    const T* pb = bi->data.data() + j * f;
                    for (std::int64_t k = 0; k < f; ++k) {
                        if (ai->requires_grad)
                            ai->grad[static_cast<size_t>(i * f + k)] +=
                                g * (pb[k] / den - yv * nbj * pa[k] / (nai * den));
                        if (bi->requires_grad)
                            bi->grad[static_cast<size_t>(j * f + k)] +=
                                g * (pa[k] / den - yv * nai * pb[k] / (nbj * den));
                    }
                }
        });
    }
    debug_check_finite(y, "pairwise_cosine");
    return y;
}

// s (S,C,H,W), q (Q,C,H,W) -> (S*Q, 2C, H, W); pair (i,j) sits at row i*Q+j
// with s_i in the first C channels and q_j in the last C.
template <class T>
Tensor<T> pair_concat(const Tensor<T>& s, const Tensor<T>& q) {
    if (s.rank() != 4 || q.rank() != 4 || s.dim(1) != q.dim(1) || s.dim(2) != q.dim(2) ||
        s.dim(3) != q.dim(3))
        throw_shape("pair_concat", shape_str(s.shape()) + " vs " + shape_str(q.shape()));
    const std::int64_t sn = s.dim(0), qn = q.dim(0), c = s.dim(1),
                       plane = s.dim(2) * s.dim(3);
    Tensor<T> y({sn * qn, 2 * c, s.dim(2), s.dim(3)});
    const std::int64_t map = c * plane;
    {
        const T* sd = s.data().data();
        const T* qd = q.data().data();
        T* yd = y.data().data();
        for (std::int64_t i = 0; i < sn; ++i)
            for (std::int64_t j = 0; j < qn; ++j) {
                T* row = yd + (i * qn + j) * 2 * map;
                std::copy_n(sd + i * map, map, row);
                std::copy_n(qd + j * map, map, row + map);
            }
    }
    auto* tape = active_tape<T>();
    if (tape && (s.requires_grad() || q.requires_grad())) {
        y.set_requires_grad(true);
        auto si = s.impl();
        auto qi = q.impl();
        auto yi = y.impl();
        tape->record([si, qi, yi, sn, qn, map] {
            for (std::int64_t i = 0; i < sn; ++i)
                for (std::int64_t j = 0; j < qn; ++j) {
                    const T* row = yi->grad.data() + (i * qn + j) * 2 * map;
                    if (si->requires_grad)
                        for (std::int64_t k = 0; k < map; ++k)
                            si->grad[static_cast<size_t>(i * map + k)] += row[k];
                    if (qi->requires_grad)
                        for (std::int64_t k = 0; k < map; ++k)
                            qi->grad[static_cast<size_t>(j * map + k)] += row[map + k];
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Losses. Cross-entropy fuses log-softmax for stability.
// ---------------------------------------------------------------------------

// logits (R,C), one target class per row -> scalar mean of -log p[target].
template <class T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw_shape("cross_entropy", "logits must be (rows, classes)");
    const std::int64_t r = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != r)
        throw_shape("cross_entropy", "target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= c)
            throw std::out_of_range("cross_entropy: target class " + std::to_string(t) +
                                    " out of range [0," + std::to_string(c) + ")");
    const T* zd = logits.data().data();
    auto softmax = std::make_shared<std::vector<T>>(static_cast<size_t>(r * c));
    T loss = T(0);
    for (std::int64_t i = 0; i < r; ++i) {
        const T* row = zd + i * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < c; ++j) {
            const T e = std::exp(row[j] - mx);
            (*softmax)[static_cast<size_t>(i * c + j)] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < c; ++j)
            (*softmax)[static_cast<size_t>(i * c + j)] *= inv;
        loss += mx + std::log(sum) - row[targets[static_cast<size_t>(i)]];
    }
    loss /= static_cast<T>(r);
    Tensor<T> y = Tensor<T>::scalar(loss);
    auto* tape = active_tape<T>();
    if (tape && logits.requires_grad()) {
        y.set_requires_grad(true);
        auto zi = logits.impl();
        auto yi = y.impl();
        tape->record([zi, yi, softmax, targets, r, c] {
            const T g = yi->grad[0] / static_cast<T>(r);
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j) {
                    T p = (*softmax)[static_cast<size_t>(i * c + j)];
                    if (j == targets[static_cast<size_t>(i)]) p -= T(1);
                    zi->grad[static_cast<size_t>(i * c + j)] += g * p;
                }
        });
    }
    debug_check_finite(y, "cross_entropy");
    return y;
}

// Single-sample convenience form over a logit vector.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int target) {
    return cross_entropy_rows(reshape(logits, {1, logits.numel()}), {target});
}

// Mean squared difference between same-shape tensors.
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw_shape("mse", shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    const T* pd = pred.data().data();
    const T* td = target.data().data();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = pd[i] - td[i];
        acc += d * d;
    }
    Tensor<T> y = Tensor<T>::scalar(acc / static_cast<T>(n));
    auto* tape = active_tape<T>();
    if (tape && (pred.requires_grad() || target.requires_grad())) {
        y.set_requires_grad(true);
        auto pi = pred.impl();
        auto ti = target.impl();
        auto yi = y.impl();
        tape->record([pi, ti, yi, n] {
            const T g = yi->grad[0] * T(2) / static_cast<T>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const T d = g * (pi->data[static_cast<size_t>(i)] -
                                 ti->data[static_cast<size_t>(i)]);
                if (pi->requires_grad) pi->grad[static_cast<size_t>(i)] += d;
                if (ti->requires_grad) ti->grad[static_cast<size_t>(i)] -= d;
            }
        });
    }
    return y;
}

}  // namespace ctm
