#pragma once

#include <cmath>
#include <vector>

#include "dfssm/parallel.hpp"
#include "dfssm/tensor.hpp"

namespace dfssm {

using detail::check_finite;
using detail::make_output;
using detail::recording;

namespace detail {

constexpr std::size_t kParallelCutoff = 1 << 14;

inline void pfor(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (count < kParallelCutoff) {
        fn(0, count);
    } else {
        parallel_for(count, fn);
    }
}

template <typename T>
inline std::size_t offset(const Shape& s, int n, int c, int h, int w) {
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with limited broadcasting: b may use size-1 dims
// against a's (n,c,h,w); output takes a's shape.

namespace detail {

inline bool broadcastable(const Shape& a, const Shape& b) {
    auto ok = [](int ad, int bd) { return bd == ad || bd == 1; };
    return ok(a.n, b.n) && ok(a.c, b.c) && ok(a.h, b.h) && ok(a.w, b.w);
}

// map index in a's space to b's flat index
struct BcastMap {
    Shape a, b;
    std::size_t operator()(std::size_t flat) const {
        int w = static_cast<int>(flat % a.w);
        flat /= a.w;
        int h = static_cast<int>(flat % a.h);
        flat /= a.h;
        int c = static_cast<int>(flat % a.c);
        int n = static_cast<int>(flat / a.c);
        return ((static_cast<std::size_t>(b.n == 1 ? 0 : n) * b.c + (b.c == 1 ? 0 : c)) * b.h +
                (b.h == 1 ? 0 : h)) *
                   b.w +
               (b.w == 1 ? 0 : w);
    }
    bool trivial() const { return a == b; }
};

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
    check(broadcastable(a.shape(), b.shape()),
          std::string(name) + ": shapes " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out = make_output<T>(a.shape(), {a, b});
    BcastMap map{a.shape(), b.shape()};
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    const std::size_t n = a.data().size();
    if (map.trivial()) {
        pfor(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) po[i] = fwd(pa[i], pb[i]);
        });
    } else {
        pfor(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) po[i] = fwd(pa[i], pb[map(i)]);
        });
    }
    if (recording(out)) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward = [an, bn, map, bwd](Node<T>& self) {
            const T* g = self.grad.data();
            const std::size_t n = self.value.size();
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            if (an->requires_grad) {
                T* da = an->grad.data();
                if (map.trivial()) {
                    pfor(n, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t i = lo; i < hi; ++i)
                            da[i] += bwd(g[i], pa[i], pb[i], true);
                    });
                } else {
                    for (std::size_t i = 0; i < n; ++i) da[i] += bwd(g[i], pa[i], pb[map(i)], true);
                }
            }
            if (bn->requires_grad) {
                T* db = bn->grad.data();
                if (map.trivial()) {
                    pfor(n, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t i = lo; i < hi; ++i)
                            db[i] += bwd(g[i], pa[i], pb[i], false);
                    });
                } else {
                    for (std::size_t i = 0; i < n; ++i)
                        db[map(i)] += bwd(g[i], pa[i], pb[map(i)], false);
                }
            }
        };
    }
    check_finite(*out.node(), name);
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "add", [](T x, T y) { return x + y; },
        [](T g, T, T, bool) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](T g, T, T, bool wrt_a) { return wrt_a ? g : -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](T g, T x, T y, bool wrt_a) { return wrt_a ? g * y : g * x; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Bwd bwd) {
    Tensor<T> out = make_output<T>(x.shape(), {x});
    const T* px = x.data().data();
    T* po = out.data().data();
    pfor(x.data().size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = fwd(px[i]);
    });
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, bwd](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->value.data();
            const T* po = self.value.data();
            T* dx = xn->grad.data();
            pfor(self.value.size(), [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) dx[i] += g[i] * bwd(px[i], po[i]);
            });
        };
    }
    check_finite(*out.node(), name);
    return out;
}

template <typename T>
inline T sigmoid_val(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary_op(
        x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary_op(
        x, "exp", [](T v) { return std::exp(v); }, [](T, T o) { return o; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary_op(
        x, "abs", [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary_op(
        x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary_op(
        x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

enum class Act { kSilu, kGelu, kSigmoid, kRelu };

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x, "sigmoid", [](T v) { return detail::sigmoid_val(v); },
        [](T, T o) { return o * (T(1) - o); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return detail::unary_op(
        x, "silu", [](T v) { return v * detail::sigmoid_val(v); },
        [](T v, T) {
            T s = detail::sigmoid_val(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

// Exact erf formulation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return detail::unary_op(
        x, "gelu",
        [](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
        },
        [](T v, T) {
            double d = static_cast<double>(v);
            double phi_big = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
            double phi_small = std::exp(-0.5 * d * d) * kInvSqrt2Pi;
            return static_cast<T>(phi_big + d * phi_small);
        });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
    switch (kind) {
        case Act::kSilu: return silu(x);
        case Act::kGelu: return gelu(x);
        case Act::kSigmoid: return sigmoid(x);
        case Act::kRelu: return relu(x);
    }
    throw UsageError("unknown activation kind");
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary_op(
        x, "softplus",
        [](T v) { return v > T(30) ? v : static_cast<T>(std::log1p(std::exp(static_cast<double>(v)))); },
        [](T v, T) { return detail::sigmoid_val(v); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = make_output<T>({1, 1, 1, 1}, {x});
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    out.data()[0] = static_cast<T>(acc);
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn](Node<T>& self) {
            T g = self.grad[0];
            T* dx = xn->grad.data();
            detail::pfor(xn->value.size(), [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) dx[i] += g;
            });
        };
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

// ---------------------------------------------------------------------------
// Convolutions

struct Pad {
    enum Mode { kZero, kReflect } mode = kZero;
    int h = 0, w = 0;
};

template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int pt, int pb, int pl, int pr) {
    const Shape s = x.shape();
    check(pt >= 0 && pb >= 0 && pl >= 0 && pr >= 0, "reflect_pad2d: negative padding");
    check(pt < s.h && pb < s.h && pl < s.w && pr < s.w,
          "reflect_pad2d: padding must be smaller than the spatial extent " + s.str());
    const Shape os{s.n, s.c, s.h + pt + pb, s.w + pl + pr};
    Tensor<T> out = make_output<T>(os, {x});
    auto refl = [](int i, int n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return i;
    };
    const T* px = x.data().data();
    T* po = out.data().data();
    const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
    detail::pfor(planes, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            const T* src = px + p * s.h * s.w;
            T* dst = po + p * os.h * os.w;
            for (int oy = 0; oy < os.h; ++oy) {
                int iy = refl(oy - pt, s.h);
                for (int ox = 0; ox < os.w; ++ox) {
                    dst[oy * os.w + ox] = src[iy * s.w + refl(ox - pl, s.w)];
                }
            }
        }
    });
    if (recording(out)) {
        auto xn = x.node();
        Shape is = s;
        out.node()->backward = [xn, is, os, pt, pl, refl](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const std::size_t planes = static_cast<std::size_t>(is.n) * is.c;
            detail::pfor(planes, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t p = lo; p < hi; ++p) {
                    const T* gp = g + p * os.h * os.w;
                    T* dp = dx + p * is.h * is.w;
                    for (int oy = 0; oy < os.h; ++oy) {
                        int iy = refl(oy - pt, is.h);
                        for (int ox = 0; ox < os.w; ++ox) {
                            dp[iy * is.w + refl(ox - pl, is.w)] += gp[oy * os.w + ox];
                        }
                    }
                }
            });
        };
    }
    check_finite(*out.node(), "reflect_pad2d");
    return out;
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int top, int left, int oh, int ow) {
    const Shape s = x.shape();
    check(top >= 0 && left >= 0 && oh >= 1 && ow >= 1 && top + oh <= s.h && left + ow <= s.w,
          "crop2d: window out of bounds for " + s.str());
    const Shape os{s.n, s.c, oh, ow};
    Tensor<T> out = make_output<T>(os, {x});
    const T* px = x.data().data();
    T* po = out.data().data();
    const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = px + p * s.h * s.w;
        T* dst = po + p * static_cast<std::size_t>(oh) * ow;
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) dst[y * ow + x2] = src[(top + y) * s.w + left + x2];
    }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, top, left, oh, ow](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
            for (std::size_t p = 0; p < planes; ++p) {
                const T* gp = g + p * static_cast<std::size_t>(oh) * ow;
                T* dp = dx + p * s.h * s.w;
                for (int y = 0; y < oh; ++y)
                    for (int x2 = 0; x2 < ow; ++x2) dp[(top + y) * s.w + left + x2] += gp[y * ow + x2];
            }
        };
    }
    return out;
}

// Standard cross-correlation conv. weight is (co, ci, kh, kw); zero padding is
// handled inline, reflect padding composes a reflect_pad2d node.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                 Pad pad) {
    if (pad.mode == Pad::kReflect && (pad.h > 0 || pad.w > 0)) {
        Tensor<T> padded = reflect_pad2d(x, pad.h, pad.h, pad.w, pad.w);
        return conv2d(padded, weight, bias, stride, Pad{Pad::kZero, 0, 0});
    }
    const Shape xs = x.shape(), ws = weight.shape();
    check(stride >= 1, "conv2d: stride must be >= 1");
    check(ws.c == xs.c, "conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                            std::to_string(xs.c));
    if (bias) check(bias->numel() == ws.n, "conv2d: bias length mismatch");
    const int oh = (xs.h + 2 * pad.h - ws.h) / stride + 1;
    const int ow = (xs.w + 2 * pad.w - ws.w) / stride + 1;
    check(xs.h + 2 * pad.h >= ws.h && xs.w + 2 * pad.w >= ws.w,
          "conv2d: kernel larger than padded input " + xs.str());
    const Shape os{xs.n, ws.n, oh, ow};
    Tensor<T> out = bias ? make_output<T>(os, {x, weight, *bias}) : make_output<T>(os, {x, weight});

    const T* px = x.data().data();
    const T* pw = weight.data().data();
    const T* pb = bias ? bias->data().data() : nullptr;
    T* po = out.data().data();
    const std::size_t jobs = static_cast<std::size_t>(xs.n) * ws.n;
    const double conv_work =
        static_cast<double>(os.numel()) * ws.c * ws.h * ws.w;
    parallel_for(jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
            const int i = static_cast<int>(j) / ws.n;
            const int co = static_cast<int>(j) % ws.n;
            T* dst = po + detail::offset<T>(os, i, co, 0, 0);
            const T bval = pb ? pb[co] : T(0);
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = static_cast<double>(bval);
                    for (int ci = 0; ci < xs.c; ++ci) {
                        const T* wrow = pw + ((static_cast<std::size_t>(co) * ws.c + ci) * ws.h) * ws.w;
                        const T* xpl = px + detail::offset<T>(xs, i, ci, 0, 0);
                        for (int ky = 0; ky < ws.h; ++ky) {
                            const int iy = oy * stride - pad.h + ky;
                            if (iy < 0 || iy >= xs.h) continue;
                            const T* xrow = xpl + static_cast<std::size_t>(iy) * xs.w;
                            const T* wr = wrow + static_cast<std::size_t>(ky) * ws.w;
                            for (int kx = 0; kx < ws.w; ++kx) {
                                const int ix = ox * stride - pad.w + kx;
                                if (ix < 0 || ix >= xs.w) continue;
                                acc += static_cast<double>(xrow[ix]) * static_cast<double>(wr[kx]);
                            }
                        }
                    }
                    dst[oy * ow + ox] = static_cast<T>(acc);
                }
            }
        }
    }, conv_work);

    if (recording(out)) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias ? bias->node() : nullptr;
        out.node()->backward = [xn, wn, bn, xs, ws, os, stride, pad](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            const double conv_work =
                static_cast<double>(os.numel()) * ws.c * ws.h * ws.w;
            if (xn->requires_grad) {
                T* dx = xn->grad.data();
                parallel_for(static_cast<std::size_t>(xs.n), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) {
                        for (int co = 0; co < ws.n; ++co) {
                            const T* gp = g + detail::offset<T>(os, static_cast<int>(i), co, 0, 0);
                            for (int oy = 0; oy < os.h; ++oy)
                                for (int ox = 0; ox < os.w; ++ox) {
                                    const T gv = gp[oy * os.w + ox];
                                    if (gv == T(0)) continue;
                                    for (int ci = 0; ci < xs.c; ++ci) {
                                        T* dxp = dx + detail::offset<T>(xs, static_cast<int>(i), ci, 0, 0);
                                        const T* wp =
                                            pw + ((static_cast<std::size_t>(co) * ws.c + ci) * ws.h) * ws.w;
                                        for (int ky = 0; ky < ws.h; ++ky) {
                                            const int iy = oy * stride - pad.h + ky;
                                            if (iy < 0 || iy >= xs.h) continue;
                                            for (int kx = 0; kx < ws.w; ++kx) {
                                                const int ix = ox * stride - pad.w + kx;
                                                if (ix < 0 || ix >= xs.w) continue;
                                                dxp[iy * xs.w + ix] += gv * wp[ky * ws.w + kx];
                                            }
                                        }
                                    }
                                }
                        }
                    }
                }, conv_work);
            }
            if (wn->requires_grad) {
                T* dw = wn->grad.data();
                parallel_for(static_cast<std::size_t>(ws.n), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t co = lo; co < hi; ++co) {
                        for (int i = 0; i < xs.n; ++i) {
                            const T* gp = g + detail::offset<T>(os, i, static_cast<int>(co), 0, 0);
                            for (int oy = 0; oy < os.h; ++oy)
                                for (int ox = 0; ox < os.w; ++ox) {
                                    const T gv = gp[oy * os.w + ox];
                                    if (gv == T(0)) continue;
                                    for (int ci = 0; ci < xs.c; ++ci) {
                                        const T* xp = px + detail::offset<T>(xs, i, ci, 0, 0);
                                        T* dwp =
                                            dw + ((co * ws.c + ci) * ws.h) * static_cast<std::size_t>(ws.w);
                                        for (int ky = 0; ky < ws.h; ++ky) {
                                            const int iy = oy * stride - pad.h + ky;
                                            if (iy < 0 || iy >= xs.h) continue;
                                            for (int kx = 0; kx < ws.w; ++kx) {
                                                const int ix = ox * stride - pad.w + kx;
                                                if (ix < 0 || ix >= xs.w) continue;
                                                dwp[ky * ws.w + kx] += gv * xp[iy * xs.w + ix];
                                            }
                                        }
                                    }
                                }
                        }
                    }
                }, conv_work);
            }
            if (bn && bn->requires_grad) {
                T* db = bn->grad.data();
                for (int co = 0; co < ws.n; ++co) {
                    double acc = 0.0;
                    for (int i = 0; i < xs.n; ++i) {
                        const T* gp = g + detail::offset<T>(os, i, co, 0, 0);
                        for (int k = 0; k < os.h * os.w; ++k) acc += static_cast<double>(gp[k]);
                    }
                    db[co] += static_cast<T>(acc);
                }
            }
        };
    }
    check_finite(*out.node(), "conv2d");
    return out;
}

// Depth-wise conv; weight (c, 1, k, k), stride 1, zero "same" padding k/2.
template <typename T>
Tensor<T> dwconv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
    const Shape xs = x.shape(), ws = weight.shape();
    check(ws.n == xs.c && ws.c == 1, "dwconv2d: weight must be (c,1,k,k) with c = input channels");
    check(ws.h == ws.w && ws.h % 2 == 1, "dwconv2d: kernel must be odd and square");
    if (bias) check(bias->numel() == xs.c, "dwconv2d: bias length mismatch");
    const int k = ws.h, p = k / 2;
    Tensor<T> out = bias ? make_output<T>(xs, {x, weight, *bias}) : make_output<T>(xs, {x, weight});
    const T* px = x.data().data();
    const T* pw = weight.data().data();
    const T* pb = bias ? bias->data().data() : nullptr;
    T* po = out.data().data();
    const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
    const double dw_work = static_cast<double>(xs.numel()) * k * k;
    parallel_for(planes, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t pl = lo; pl < hi; ++pl) {
            const int c = static_cast<int>(pl % xs.c);
            const T* src = px + pl * xs.h * xs.w;
            const T* wp = pw + static_cast<std::size_t>(c) * k * k;
            T* dst = po + pl * xs.h * xs.w;
            const T bval = pb ? pb[c] : T(0);
            for (int oy = 0; oy < xs.h; ++oy)
                for (int ox = 0; ox < xs.w; ++ox) {
                    double acc = static_cast<double>(bval);
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy - p + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox - p + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            acc += static_cast<double>(src[iy * xs.w + ix]) *
                                   static_cast<double>(wp[ky * k + kx]);
                        }
                    }
                    dst[oy * xs.w + ox] = static_cast<T>(acc);
                }
        }
    }, dw_work);
    if (recording(out)) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias ? bias->node() : nullptr;
        out.node()->backward = [xn, wn, bn, xs, k, p](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
            const double dw_work = static_cast<double>(xs.numel()) * k * k;
            if (xn->requires_grad) {
                T* dx = xn->grad.data();
                parallel_for(planes, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t pl = lo; pl < hi; ++pl) {
                        const int c = static_cast<int>(pl % xs.c);
                        const T* gp = g + pl * xs.h * xs.w;
                        const T* wp = pw + static_cast<std::size_t>(c) * k * k;
                        T* dxp = dx + pl * xs.h * xs.w;
                        for (int oy = 0; oy < xs.h; ++oy)
                            for (int ox = 0; ox < xs.w; ++ox) {
                                const T gv = gp[oy * xs.w + ox];
                                if (gv == T(0)) continue;
                                for (int ky = 0; ky < k; ++ky) {
                                    const int iy = oy - p + ky;
                                    if (iy < 0 || iy >= xs.h) continue;
                                    for (int kx = 0; kx < k; ++kx) {
                                        const int ix = ox - p + kx;
                                        if (ix < 0 || ix >= xs.w) continue;
                                        dxp[iy * xs.w + ix] += gv * wp[ky * k + kx];
                                    }
                                }
                            }
                    }
                }, dw_work);
            }
            if (wn->requires_grad || (bn && bn->requires_grad)) {
                T* dw = wn->requires_grad ? wn->grad.data() : nullptr;
                T* db = (bn && bn->requires_grad) ? bn->grad.data() : nullptr;
                parallel_for(static_cast<std::size_t>(xs.c), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t c = lo; c < hi; ++c) {
                        double bacc = 0.0;
                        for (int i = 0; i < xs.n; ++i) {
                            const std::size_t pl = static_cast<std::size_t>(i) * xs.c + c;
                            const T* gp = g + pl * xs.h * xs.w;
                            const T* src = px + pl * xs.h * xs.w;
                            for (int oy = 0; oy < xs.h; ++oy)
                                for (int ox = 0; ox < xs.w; ++ox) {
                                    const T gv = gp[oy * xs.w + ox];
                                    if (gv == T(0)) continue;
                                    bacc += static_cast<double>(gv);
                                    if (dw) {
                                        T* dwp = dw + c * k * k;
                                        for (int ky = 0; ky < k; ++ky) {
                                            const int iy = oy - p + ky;
                                            if (iy < 0 || iy >= xs.h) continue;
                                            for (int kx = 0; kx < k; ++kx) {
                                                const int ix = ox - p + kx;
                                                if (ix < 0 || ix >= xs.w) continue;
                                                dwp[ky * k + kx] += gv * src[iy * xs.w + ix];
                                            }
                                        }
                                    }
                                }
                        }
                        if (db) db[c] += static_cast<T>(bacc);
                    }
                }, dw_work);
            }
        };
    }
    check_finite(*out.node(), "dwconv2d");
    return out;
}

// ---------------------------------------------------------------------------
// Layer norm across the channel axis per spatial location.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const Shape s = x.shape();
    check(s.c > 0, "layer_norm: zero channels");
    check(gamma.numel() == s.c && beta.numel() == s.c, "layer_norm: affine size mismatch");
    check(eps > T(0), "layer_norm: eps must be positive");
    Tensor<T> out = make_output<T>(s, {x, gamma, beta});

    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.n) * plane);
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.n) * plane);
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pbta = beta.data().data();
    T* po = out.data().data();
    const double ln_work = static_cast<double>(s.numel()) * 3.0;
    parallel_for(static_cast<std::size_t>(s.n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            T* m = mean->data() + i * plane;
            T* is = invstd->data() + i * plane;
            std::vector<double> sum(plane, 0.0), sumsq(plane, 0.0);
            for (int c = 0; c < s.c; ++c) {
                const T* row = px + (i * s.c + c) * plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    sum[p] += row[p];
                    sumsq[p] += static_cast<double>(row[p]) * row[p];
                }
            }
            for (std::size_t p = 0; p < plane; ++p) {
                double mu = sum[p] / s.c;
                double var = sumsq[p] / s.c - mu * mu;
                if (var < 0) var = 0;  // guard fp cancellation
                m[p] = static_cast<T>(mu);
                is[p] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            }
            for (int c = 0; c < s.c; ++c) {
                const T* row = px + (i * s.c + c) * plane;
                T* orow = po + (i * s.c + c) * plane;
                const T gc = pg[c], bc = pbta[c];
                for (std::size_t p = 0; p < plane; ++p)
                    orow[p] = (row[p] - m[p]) * is[p] * gc + bc;
            }
        }
    }, ln_work);

    if (recording(out)) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        out.node()->backward = [xn, gn, bn, s, plane, mean, invstd](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->value.data();
            const T* pg = gn->value.data();
            if (xn->requires_grad) {
                T* dx = xn->grad.data();
                const double ln_work = static_cast<double>(s.n) * s.c * plane * 3.0;
                parallel_for(static_cast<std::size_t>(s.n), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) {
                        const T* m = mean->data() + i * plane;
                        const T* is = invstd->data() + i * plane;
                        std::vector<double> m1(plane, 0.0), m2(plane, 0.0);
                        for (int c = 0; c < s.c; ++c) {
                            const T* grow = g + (i * s.c + c) * plane;
                            const T* row = px + (i * s.c + c) * plane;
                            const T gc = pg[c];
                            for (std::size_t p = 0; p < plane; ++p) {
                                const double gg = static_cast<double>(grow[p]) * gc;
                                m1[p] += gg;
                                m2[p] += gg * (row[p] - m[p]) * is[p];
                            }
                        }
                        for (std::size_t p = 0; p < plane; ++p) {
                            m1[p] /= s.c;
                            m2[p] /= s.c;
                        }
                        for (int c = 0; c < s.c; ++c) {
                            const T* grow = g + (i * s.c + c) * plane;
                            const T* row = px + (i * s.c + c) * plane;
                            T* dxr = dx + (i * s.c + c) * plane;
                            const T gc = pg[c];
                            for (std::size_t p = 0; p < plane; ++p) {
                                const double xhat = (row[p] - m[p]) * is[p];
                                const double gg = static_cast<double>(grow[p]) * gc;
                                dxr[p] += static_cast<T>(is[p] * (gg - m1[p] - xhat * m2[p]));
                            }
                        }
                    }
                }, ln_work);
            }
            if (gn->requires_grad || bn->requires_grad) {
                T* dg = gn->requires_grad ? gn->grad.data() : nullptr;
                T* db = bn->requires_grad ? bn->grad.data() : nullptr;
                for (int c = 0; c < s.c; ++c) {
                    double accg = 0.0, accb = 0.0;
                    for (int i = 0; i < s.n; ++i) {
                        const T* grow = g + (static_cast<std::size_t>(i) * s.c + c) * plane;
                        const T* row = px + (static_cast<std::size_t>(i) * s.c + c) * plane;
                        const T* m = mean->data() + static_cast<std::size_t>(i) * plane;
                        const T* is = invstd->data() + static_cast<std::size_t>(i) * plane;
                        for (std::size_t p = 0; p < plane; ++p) {
                            accg += static_cast<double>(grow[p]) * (row[p] - m[p]) * is[p];
                            accb += grow[p];
                        }
                    }
                    if (dg) dg[c] += static_cast<T>(accg);
                    if (db) db[c] += static_cast<T>(accb);
                }
            }
        };
    }
    check_finite(*out.node(), "layer_norm");
    return out;
}

// ---------------------------------------------------------------------------
// Pixel shuffle / unshuffle, pooling, concat/slice, gather

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
    const Shape s = x.shape();
    check(r >= 1, "pixel_unshuffle: r must be >= 1");
    check(s.h % r == 0 && s.w % r == 0,
          "pixel_unshuffle: spatial dims " + s.str() + " not divisible by " + std::to_string(r));
    const Shape os{s.n, s.c * r * r, s.h / r, s.w / r};
    Tensor<T> out = make_output<T>(os, {x});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const int oc = c * r * r + dy * r + dx;
                    for (int y = 0; y < os.h; ++y)
                        for (int x2 = 0; x2 < os.w; ++x2)
                            po[detail::offset<T>(os, n, oc, y, x2)] =
                                px[detail::offset<T>(s, n, c, y * r + dy, x2 * r + dx)];
                }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, os, r](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c)
                    for (int dy = 0; dy < r; ++dy)
                        for (int dx2 = 0; dx2 < r; ++dx2) {
                            const int oc = c * r * r + dy * r + dx2;
                            for (int y = 0; y < os.h; ++y)
                                for (int x2 = 0; x2 < os.w; ++x2)
                                    dx[detail::offset<T>(s, n, c, y * r + dy, x2 * r + dx2)] +=
                                        g[detail::offset<T>(os, n, oc, y, x2)];
                        }
        };
    }
    return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    const Shape s = x.shape();
    check(r >= 1, "pixel_shuffle: r must be >= 1");
    check(s.c % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(s.c) +
                                  " not divisible by r^2 = " + std::to_string(r * r));
    const Shape os{s.n, s.c / (r * r), s.h * r, s.w * r};
    Tensor<T> out = make_output<T>(os, {x});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < os.c; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const int ic = c * r * r + dy * r + dx;
                    for (int y = 0; y < s.h; ++y)
                        for (int x2 = 0; x2 < s.w; ++x2)
                            po[detail::offset<T>(os, n, c, y * r + dy, x2 * r + dx)] =
                                px[detail::offset<T>(s, n, ic, y, x2)];
                }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, os, r](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int dy = 0; dy < r; ++dy)
                        for (int dx2 = 0; dx2 < r; ++dx2) {
                            const int ic = c * r * r + dy * r + dx2;
                            for (int y = 0; y < s.h; ++y)
                                for (int x2 = 0; x2 < s.w; ++x2)
                                    dx[detail::offset<T>(s, n, ic, y, x2)] +=
                                        g[detail::offset<T>(os, n, c, y * r + dy, x2 * r + dx2)];
                        }
        };
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Shape s = x.shape();
    check(s.h >= 1 && s.w >= 1, "global_avg_pool: empty spatial extent");
    Tensor<T> out = make_output<T>({s.n, s.c, 1, 1}, {x});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const T* px = x.data().data();
    T* po = out.data().data();
    for (std::size_t p = 0; p < static_cast<std::size_t>(s.n) * s.c; ++p) {
        double acc = 0.0;
        const T* src = px + p * plane;
        for (std::size_t k = 0; k < plane; ++k) acc += src[k];
        po[p] = static_cast<T>(acc / static_cast<double>(plane));
    }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, plane](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
            for (std::size_t p = 0; p < static_cast<std::size_t>(s.n) * s.c; ++p) {
                const T gv = g[p] * inv;
                T* dst = dx + p * plane;
                for (std::size_t k = 0; k < plane; ++k) dst[k] += gv;
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    check(!xs.empty(), "concat_channels: empty input list");
    Shape s0 = xs[0].shape();
    int ctot = 0;
    for (const auto& t : xs) {
        const Shape s = t.shape();
        check(s.n == s0.n && s.h == s0.h && s.w == s0.w,
              "concat_channels: mismatched shapes " + s.str() + " vs " + s0.str());
        ctot += s.c;
    }
    const Shape os{s0.n, ctot, s0.h, s0.w};
    Tensor<T> out = Tensor<T>::zeros(os);
    if (grad_enabled()) {
        bool needs = false;
        for (const auto& t : xs) needs = needs || t.requires_grad();
        if (needs) {
            out.node()->requires_grad = true;
            for (const auto& t : xs) out.node()->parents.push_back(t.node());
        }
    }
    const std::size_t plane = static_cast<std::size_t>(s0.h) * s0.w;
    T* po = out.data().data();
    for (int n = 0; n < s0.n; ++n) {
        int coff = 0;
        for (const auto& t : xs) {
            const Shape s = t.shape();
            const T* src = t.data().data() + static_cast<std::size_t>(n) * s.c * plane;
            T* dst = po + (static_cast<std::size_t>(n) * ctot + coff) * plane;
            std::copy(src, src + static_cast<std::size_t>(s.c) * plane, dst);
            coff += s.c;
        }
    }
    if (recording(out)) {
        std::vector<std::shared_ptr<Node<T>>> nodes;
        for (const auto& t : xs) nodes.push_back(t.node());
        out.node()->backward = [nodes, os, plane](Node<T>& self) {
            const T* g = self.grad.data();
            for (int n = 0; n < os.n; ++n) {
                int coff = 0;
                for (const auto& pn : nodes) {
                    const int c = pn->shape.c;
                    if (pn->requires_grad) {
                        const T* src = g + (static_cast<std::size_t>(n) * os.c + coff) * plane;
                        T* dst = pn->grad.data() + static_cast<std::size_t>(n) * c * plane;
                        for (std::size_t k = 0; k < static_cast<std::size_t>(c) * plane; ++k)
                            dst[k] += src[k];
                    }
                    coff += c;
                }
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    const Shape s = x.shape();
    check(0 <= c0 && c0 < c1 && c1 <= s.c, "slice_channels: bad range");
    const Shape os{s.n, c1 - c0, s.h, s.w};
    Tensor<T> out = make_output<T>(os, {x});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int n = 0; n < s.n; ++n) {
        const T* src = px + (static_cast<std::size_t>(n) * s.c + c0) * plane;
        T* dst = po + static_cast<std::size_t>(n) * os.c * plane;
        std::copy(src, src + static_cast<std::size_t>(os.c) * plane, dst);
    }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, os, c0, plane](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            for (int n = 0; n < s.n; ++n) {
                const T* src = g + static_cast<std::size_t>(n) * os.c * plane;
                T* dst = dx + (static_cast<std::size_t>(n) * s.c + c0) * plane;
                for (std::size_t k = 0; k < static_cast<std::size_t>(os.c) * plane; ++k)
                    dst[k] += src[k];
            }
        };
    }
    return out;
}

// Rearranges spatial positions into a (n, c, 1, L) sequence following `order`
// (a bijection over h*w); the inverse scatters back to (n, c, h, w).
template <typename T>
Tensor<T> gather_positions(const Tensor<T>& x, const std::shared_ptr<std::vector<int>>& order) {
    const Shape s = x.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    check(order->size() == plane, "gather_positions: order size mismatch");
    const Shape os{s.n, s.c, 1, static_cast<int>(plane)};
    Tensor<T> out = make_output<T>(os, {x});
    const T* px = x.data().data();
    T* po = out.data().data();
    const int* idx = order->data();
    detail::pfor(static_cast<std::size_t>(s.n) * s.c, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            const T* src = px + p * plane;
            T* dst = po + p * plane;
            for (std::size_t j = 0; j < plane; ++j) dst[j] = src[idx[j]];
        }
    });
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, plane, order](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const int* idx = order->data();
            detail::pfor(static_cast<std::size_t>(s.n) * s.c, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t p = lo; p < hi; ++p) {
                    const T* gp = g + p * plane;
                    T* dst = dx + p * plane;
                    for (std::size_t j = 0; j < plane; ++j) dst[idx[j]] += gp[j];
                }
            });
        };
    }
    return out;
}

template <typename T>
Tensor<T> scatter_positions(const Tensor<T>& seq, const std::shared_ptr<std::vector<int>>& order,
                            int h, int w) {
    const Shape s = seq.shape();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    check(s.h == 1 && static_cast<std::size_t>(s.w) == plane && order->size() == plane,
          "scatter_positions: sequence length mismatch");
    const Shape os{s.n, s.c, h, w};
    Tensor<T> out = make_output<T>(os, {seq});
    const T* px = seq.data().data();
    T* po = out.data().data();
    const int* idx = order->data();
    detail::pfor(static_cast<std::size_t>(s.n) * s.c, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            const T* src = px + p * plane;
            T* dst = po + p * plane;
            for (std::size_t j = 0; j < plane; ++j) dst[idx[j]] = src[j];
        }
    });
    if (recording(out)) {
        auto xn = seq.node();
        out.node()->backward = [xn, plane, order](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const int* idx = order->data();
            const std::size_t planes = self.value.size() / plane;
            detail::pfor(planes, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t p = lo; p < hi; ++p) {
                    const T* gp = g + p * plane;
                    T* dst = dx + p * plane;
                    for (std::size_t j = 0; j < plane; ++j) dst[j] += gp[idx[j]];
                }
            });
        };
    }
    return out;
}

// sqrt(re^2 + im^2) over a stacked (n, 2c, h, w) re||im tensor; subgradient 0
// at the origin.
template <typename T>
Tensor<T> complex_modulus(const Tensor<T>& x) {
    const Shape s = x.shape();
    check(s.c % 2 == 0, "complex_modulus: channel count must be even (re||im stacking)");
    const int c = s.c / 2;
    const Shape os{s.n, c, s.h, s.w};
    Tensor<T> out = make_output<T>(os, {x});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int n = 0; n < s.n; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const T* re = px + (static_cast<std::size_t>(n) * s.c + ch) * plane;
            const T* im = px + (static_cast<std::size_t>(n) * s.c + c + ch) * plane;
            T* dst = po + (static_cast<std::size_t>(n) * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k)
                dst[k] = static_cast<T>(std::hypot(static_cast<double>(re[k]), static_cast<double>(im[k])));
        }
    if (recording(out)) {
        auto xn = x.node();
        out.node()->backward = [xn, s, c, plane](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->value.data();
            const T* po = self.value.data();
            T* dx = xn->grad.data();
            for (int n = 0; n < s.n; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t r0 = (static_cast<std::size_t>(n) * s.c + ch) * plane;
                    const std::size_t i0 = (static_cast<std::size_t>(n) * s.c + c + ch) * plane;
                    const std::size_t o0 = (static_cast<std::size_t>(n) * c + ch) * plane;
                    for (std::size_t k = 0; k < plane; ++k) {
                        const T m = po[o0 + k];
                        if (m == T(0)) continue;
                        dx[r0 + k] += g[o0 + k] * px[r0 + k] / m;
                        dx[i0 + k] += g[o0 + k] * px[i0 + k] / m;
                    }
                }
        };
    }
    return out;
}

}  // namespace dfssm
