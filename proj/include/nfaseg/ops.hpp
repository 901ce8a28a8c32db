#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nfaseg/error.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw_parameter(msg);
}

// floor/ceil division for a possibly negative numerator, positive denominator
inline long floor_div(long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline long ceil_div(long a, long b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

inline bool any_requires_grad(const std::vector<TensorPtr>& ts) {
    for (const auto& t : ts)
        if (t->requires_grad) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic (strict same-shape)

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->shape == b->shape,
                    "add: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad || b->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        out->parents = {a, b};
        Tensor* o = out.get();
        out->backward_fn = [a, b, o, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (long i = 0; i < n; ++i) b->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->shape == b->shape,
                    "sub: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad || b->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
    if (out->requires_grad) {
        out->parents = {a, b};
        Tensor* o = out.get();
        out->backward_fn = [a, b, o, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (long i = 0; i < n; ++i) b->grad[i] -= o->grad[i];
            }
        };
    }
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->shape == b->shape,
                    "mul: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad || b->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad) {
        out->parents = {a, b};
        Tensor* o = out.get();
        out->backward_fn = [a, b, o, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (long i = 0; i < n; ++i) b->grad[i] += o->grad[i] * a->data[i];
            }
        };
    }
    return out;
}

inline TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->shape == b->shape,
                    "div: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad || b->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] / b->data[i];
    if (out->requires_grad) {
        out->parents = {a, b};
        Tensor* o = out.get();
        out->backward_fn = [a, b, o, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i] / b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (long i = 0; i < n; ++i)
                    b->grad[i] -= o->grad[i] * a->data[i] / (b->data[i] * b->data[i]);
            }
        };
    }
    return out;
}

inline TensorPtr scalar_add(const TensorPtr& a, double c) {
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] + c;
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n] {
            a->ensure_grad();
            for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

inline TensorPtr scalar_mul(const TensorPtr& a, double c) {
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n, c] {
            a->ensure_grad();
            for (long i = 0; i < n; ++i) a->grad[i] += o->grad[i] * c;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations

inline TensorPtr relu(const TensorPtr& a) {
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n] {
            a->ensure_grad();
            // subgradient 0 at the kink
            for (long i = 0; i < n; ++i)
                if (a->data[i] > 0.0) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

inline TensorPtr sigmoid(const TensorPtr& a) {
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad);
    const long n = a->shape.numel();
    for (long i = 0; i < n; ++i) {
        const double v = a->data[i];
        // branch on sign for stability at large |v|
        out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
    }
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n] {
            a->ensure_grad();
            for (long i = 0; i < n; ++i) {
                const double y = o->data[i];
                a->grad[i] += o->grad[i] * y * (1.0 - y);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

inline TensorPtr sum_all(const TensorPtr& a) {
    auto out = Tensor::create(Shape{1, 1, 1, 1}, 0.0, a->requires_grad);
    const long n = a->shape.numel();
    double s = 0.0;
    for (long i = 0; i < n; ++i) s += a->data[i];
    out->data[0] = s;
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n] {
            a->ensure_grad();
            const double g = o->grad[0];
            for (long i = 0; i < n; ++i) a->grad[i] += g;
        };
    }
    return out;
}

inline TensorPtr mean_all(const TensorPtr& a) {
    const long n = a->shape.numel();
    return scalar_mul(sum_all(a), 1.0 / static_cast<double>(n));
}

inline TensorPtr global_avg_pool(const TensorPtr& a) {
    const auto [n, c, h, w] = a->shape;
    auto out = Tensor::create(Shape{n, c, 1, 1}, 0.0, a->requires_grad);
    const long hw = h * w;
    for (long i = 0; i < n * c; ++i) {
        double s = 0.0;
        const double* p = a->data.data() + i * hw;
        for (long j = 0; j < hw; ++j) s += p[j];
        out->data[i] = s / static_cast<double>(hw);
    }
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n, c, hw] {
            a->ensure_grad();
            const double inv = 1.0 / static_cast<double>(hw);
            for (long i = 0; i < n * c; ++i) {
                const double g = o->grad[i] * inv;
                double* p = a->grad.data() + i * hw;
                for (long j = 0; j < hw; ++j) p[j] += g;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops

inline TensorPtr concat_channels(const std::vector<TensorPtr>& parts) {
    detail::require(!parts.empty(), "concat_channels: needs at least one input");
    const auto& s0 = parts[0]->shape;
    long c_total = 0;
    for (const auto& p : parts) {
        detail::require(p->shape.n == s0.n && p->shape.h == s0.h && p->shape.w == s0.w,
                        "concat_channels: inputs must agree on batch and spatial dims, got " +
                            p->shape.str() + " vs " + s0.str());
        c_total += p->shape.c;
    }
    auto out = Tensor::create(Shape{s0.n, c_total, s0.h, s0.w}, 0.0,
                              detail::any_requires_grad(parts));
    const long hw = s0.h * s0.w;
    long c_off = 0;
    for (const auto& p : parts) {
        for (long b = 0; b < s0.n; ++b) {
            const double* src = p->data.data() + b * p->shape.c * hw;
            double* dst = out->data.data() + (b * c_total + c_off) * hw;
            std::copy(src, src + p->shape.c * hw, dst);
        }
        c_off += p->shape.c;
    }
    if (out->requires_grad) {
        out->parents = parts;
        Tensor* o = out.get();
        out->backward_fn = [parts, o, c_total, hw, n = s0.n] {
            long off = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (long b = 0; b < n; ++b) {
                        const double* src = o->grad.data() + (b * c_total + off) * hw;
                        double* dst = p->grad.data() + b * p->shape.c * hw;
                        for (long i = 0; i < p->shape.c * hw; ++i) dst[i] += src[i];
                    }
                }
                off += p->shape.c;
            }
        };
    }
    return out;
}

inline TensorPtr slice_channels(const TensorPtr& a, long begin, long end) {
    const auto [n, c, h, w] = a->shape;
    detail::require(begin >= 0 && end > begin && end <= c,
                    "slice_channels: invalid range [" + std::to_string(begin) + "," +
                        std::to_string(end) + ") for " + std::to_string(c) + " channels");
    const long cc = end - begin;
    const long hw = h * w;
    auto out = Tensor::create(Shape{n, cc, h, w}, 0.0, a->requires_grad);
    for (long b = 0; b < n; ++b) {
        const double* src = a->data.data() + (b * c + begin) * hw;
        std::copy(src, src + cc * hw, out->data.data() + b * cc * hw);
    }
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, begin, cc, hw, n, c] {
            a->ensure_grad();
            for (long b = 0; b < n; ++b) {
                const double* src = o->grad.data() + b * cc * hw;
                double* dst = a->grad.data() + (b * c + begin) * hw;
                for (long i = 0; i < cc * hw; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

/// Broadcast multiply of a feature map by per-sample per-channel scales of
/// shape (n, c, 1, 1).
inline TensorPtr scale_channels(const TensorPtr& a, const TensorPtr& s) {
    const auto [n, c, h, w] = a->shape;
    detail::require(s->shape == Shape{n, c, 1, 1},
                    "scale_channels: scale must be (n,c,1,1) matching " + a->shape.str() +
                        ", got " + s->shape.str());
    auto out = Tensor::create(a->shape, 0.0, a->requires_grad || s->requires_grad);
    const long hw = h * w;
    for (long i = 0; i < n * c; ++i) {
        const double sv = s->data[i];
        const double* src = a->data.data() + i * hw;
        double* dst = out->data.data() + i * hw;
        for (long j = 0; j < hw; ++j) dst[j] = src[j] * sv;
    }
    if (out->requires_grad) {
        out->parents = {a, s};
        Tensor* o = out.get();
        out->backward_fn = [a, s, o, n, c, hw] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (long i = 0; i < n * c; ++i) {
                    const double sv = s->data[i];
                    const double* g = o->grad.data() + i * hw;
                    double* dst = a->grad.data() + i * hw;
                    for (long j = 0; j < hw; ++j) dst[j] += g[j] * sv;
                }
            }
            if (s->requires_grad) {
                s->ensure_grad();
                for (long i = 0; i < n * c; ++i) {
                    const double* g = o->grad.data() + i * hw;
                    const double* x = a->data.data() + i * hw;
                    double acc = 0.0;
                    for (long j = 0; j < hw; ++j) acc += g[j] * x[j];
                    s->grad[i] += acc;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution

/// 2D cross-correlation. weight is (c_out, c_in, kh, kw); bias is (1, c_out,
/// 1, 1) or null. Output spatial size floor((dim + 2*padding - k)/stride)+1.
inline TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weight,
                        const TensorPtr& bias, long stride = 1, long padding = 0) {
    const auto [n, ci, h, w] = input->shape;
    const auto [co, wci, kh, kw] = weight->shape;
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    detail::require(padding >= 0, "conv2d: padding must be >= 0");
    detail::require(wci == ci, "conv2d: weight expects " + std::to_string(wci) +
                                   " input channels, input has " + std::to_string(ci));
    detail::require(h + 2 * padding >= kh && w + 2 * padding >= kw,
                    "conv2d: kernel larger than padded input");
    if (bias)
        detail::require(bias->shape == Shape{1, co, 1, 1},
                        "conv2d: bias must be (1," + std::to_string(co) + ",1,1), got " +
                            bias->shape.str());
    const long oh = (h + 2 * padding - kh) / stride + 1;
    const long ow = (w + 2 * padding - kw) / stride + 1;
    const bool rg = input->requires_grad || weight->requires_grad ||
                    (bias && bias->requires_grad);
    auto out = Tensor::create(Shape{n, co, oh, ow}, 0.0, rg);

    for (long b = 0; b < n; ++b) {
        for (long oc = 0; oc < co; ++oc) {
            double* orow0 = out->data.data() + (b * co + oc) * oh * ow;
            if (bias) {
                const double bv = bias->data[oc];
                for (long i = 0; i < oh * ow; ++i) orow0[i] = bv;
            }
            for (long ic = 0; ic < ci; ++ic) {
                const double* iplane = input->data.data() + (b * ci + ic) * h * w;
                const double* wrow = weight->data.data() + (oc * ci + ic) * kh * kw;
                for (long ky = 0; ky < kh; ++ky) {
                    for (long kx = 0; kx < kw; ++kx) {
                        const double wv = wrow[ky * kw + kx];
                        if (wv == 0.0) continue;
                        const long x_lo =
                            std::max(0L, detail::ceil_div(padding - kx, stride));
                        const long x_hi = std::min(
                            ow, detail::floor_div(w - 1 - kx + padding, stride) + 1);
                        for (long y = 0; y < oh; ++y) {
                            const long iy = y * stride - padding + ky;
                            if (iy < 0 || iy >= h) continue;
                            const double* irow = iplane + iy * w;
                            double* orow = orow0 + y * ow;
                            for (long x = x_lo; x < x_hi; ++x)
                                orow[x] += wv * irow[x * stride - padding + kx];
                        }
                    }
                }
            }
        }
    }

    if (rg) {
        out->parents = bias ? std::vector<TensorPtr>{input, weight, bias}
                            : std::vector<TensorPtr>{input, weight};
        Tensor* o = out.get();
        out->backward_fn = [input, weight, bias, o, stride, padding, n, ci, h, w, co, kh,
                            kw, oh, ow] {
            if (input->requires_grad) input->ensure_grad();
            if (weight->requires_grad) weight->ensure_grad();
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (long b = 0; b < n; ++b)
                    for (long oc = 0; oc < co; ++oc) {
                        const double* g = o->grad.data() + (b * co + oc) * oh * ow;
                        double acc = 0.0;
                        for (long i = 0; i < oh * ow; ++i) acc += g[i];
                        bias->grad[oc] += acc;
                    }
            }
            if (!input->requires_grad && !weight->requires_grad) return;
            for (long b = 0; b < n; ++b) {
                for (long oc = 0; oc < co; ++oc) {
                    const double* gplane = o->grad.data() + (b * co + oc) * oh * ow;
                    for (long ic = 0; ic < ci; ++ic) {
                        const double* iplane = input->data.data() + (b * ci + ic) * h * w;
                        double* giplane =
                            input->requires_grad
                                ? input->grad.data() + (b * ci + ic) * h * w
                                : nullptr;
                        const double* wrow = weight->data.data() + (oc * ci + ic) * kh * kw;
                        double* gwrow = weight->requires_grad
                                            ? weight->grad.data() + (oc * ci + ic) * kh * kw
                                            : nullptr;
                        for (long ky = 0; ky < kh; ++ky) {
                            for (long kx = 0; kx < kw; ++kx) {
                                const long x_lo =
                                    std::max(0L, detail::ceil_div(padding - kx, stride));
                                const long x_hi = std::min(
                                    ow, detail::floor_div(w - 1 - kx + padding, stride) + 1);
                                const double wv = wrow[ky * kw + kx];
                                double wacc = 0.0;
                                for (long y = 0; y < oh; ++y) {
                                    const long iy = y * stride - padding + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    const double* grow = gplane + y * ow;
                                    const double* irow = iplane + iy * w;
                                    if (gwrow)
                                        for (long x = x_lo; x < x_hi; ++x)
                                            wacc += grow[x] * irow[x * stride - padding + kx];
                                    if (giplane) {
                                        double* girow = giplane + iy * w;
                                        for (long x = x_lo; x < x_hi; ++x)
                                            girow[x * stride - padding + kx] +=
                                                wv * grow[x];
                                    }
                                }
                                if (gwrow) gwrow[ky * kw + kx] += wacc;
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

/// 1D cross-correlation across the channel axis of a (n, c, 1, 1) tensor
/// with zero padding; kernel is (1, 1, 1, k) with odd k, no bias.
inline TensorPtr conv1d_channels(const TensorPtr& input, const TensorPtr& kernel) {
    const auto [n, c, h, w] = input->shape;
    detail::require(h == 1 && w == 1,
                    "conv1d_channels: input must be (n,c,1,1), got " + input->shape.str());
    const long k = kernel->shape.w;
    detail::require(kernel->shape.n == 1 && kernel->shape.c == 1 && kernel->shape.h == 1,
                    "conv1d_channels: kernel must be (1,1,1,k), got " + kernel->shape.str());
    detail::require(k >= 1 && k % 2 == 1, "conv1d_channels: kernel size must be odd");
    const long r = k / 2;
    auto out = Tensor::create(input->shape, 0.0,
                              input->requires_grad || kernel->requires_grad);
    for (long b = 0; b < n; ++b) {
        const double* src = input->data.data() + b * c;
        double* dst = out->data.data() + b * c;
        for (long i = 0; i < c; ++i) {
            double acc = 0.0;
            for (long j = 0; j < k; ++j) {
                const long p = i + j - r;
                if (p >= 0 && p < c) acc += kernel->data[j] * src[p];
            }
            dst[i] = acc;
        }
    }
    if (out->requires_grad) {
        out->parents = {input, kernel};
        Tensor* o = out.get();
        out->backward_fn = [input, kernel, o, n, c, k, r] {
            if (input->requires_grad) input->ensure_grad();
            if (kernel->requires_grad) kernel->ensure_grad();
            for (long b = 0; b < n; ++b) {
                const double* src = input->data.data() + b * c;
                const double* g = o->grad.data() + b * c;
                for (long i = 0; i < c; ++i) {
                    for (long j = 0; j < k; ++j) {
                        const long p = i + j - r;
                        if (p < 0 || p >= c) continue;
                        if (kernel->requires_grad) kernel->grad[j] += g[i] * src[p];
                        if (input->requires_grad)
                            input->grad[b * c + p] += g[i] * kernel->data[j];
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling and resampling

/// 2x2 max pooling with stride 2. Ties keep the first element in scan order.
inline TensorPtr maxpool2x2(const TensorPtr& input) {
    const auto [n, c, h, w] = input->shape;
    detail::require(h % 2 == 0 && w % 2 == 0,
                    "maxpool2x2: spatial dims must be even, got " + input->shape.str());
    const long oh = h / 2, ow = w / 2;
    auto out = Tensor::create(Shape{n, c, oh, ow}, 0.0, input->requires_grad);
    std::vector<long> argmax(static_cast<size_t>(n * c * oh * ow));
    for (long p = 0; p < n * c; ++p) {
        const double* plane = input->data.data() + p * h * w;
        double* oplane = out->data.data() + p * oh * ow;
        long* aplane = argmax.data() + p * oh * ow;
        for (long y = 0; y < oh; ++y) {
            for (long x = 0; x < ow; ++x) {
                const long base = (2 * y) * w + 2 * x;
                long best = base;
                double bv = plane[base];
                for (long idx : {base + 1, base + w, base + w + 1}) {
                    if (plane[idx] > bv) {
                        bv = plane[idx];
                        best = idx;
                    }
                }
                oplane[y * ow + x] = bv;
                aplane[y * ow + x] = best;
            }
        }
    }
    if (out->requires_grad) {
        out->parents = {input};
        Tensor* o = out.get();
        out->backward_fn = [input, o, am = std::move(argmax), n, c, h, w, oh, ow] {
            input->ensure_grad();
            for (long p = 0; p < n * c; ++p) {
                double* gplane = input->grad.data() + p * h * w;
                const double* g = o->grad.data() + p * oh * ow;
                const long* aplane = am.data() + p * oh * ow;
                for (long i = 0; i < oh * ow; ++i) gplane[aplane[i]] += g[i];
            }
        };
    }
    return out;
}

/// Bilinear upsampling by an integer factor >= 1, half-pixel centers
/// (align_corners=false), edges clamped.
inline TensorPtr bilinear_upsample(const TensorPtr& input, long factor) {
    detail::require(factor >= 1, "bilinear_upsample: factor must be >= 1, got " +
                                     std::to_string(factor));
    if (factor == 1) return scalar_mul(input, 1.0);
    const auto [n, c, h, w] = input->shape;
    const long oh = h * factor, ow = w * factor;
    auto out = Tensor::create(Shape{n, c, oh, ow}, 0.0, input->requires_grad);

    struct Lerp {
        long i0, i1;
        double w1;  // weight of i1; i0 gets 1-w1
    };
    auto make_axis = [factor](long out_len, long in_len) {
        std::vector<Lerp> ax(static_cast<size_t>(out_len));
        for (long i = 0; i < out_len; ++i) {
            double s = (i + 0.5) / static_cast<double>(factor) - 0.5;
            if (s < 0.0) s = 0.0;
            if (s > in_len - 1) s = static_cast<double>(in_len - 1);
            const long i0 = static_cast<long>(std::floor(s));
            const long i1 = std::min(i0 + 1, in_len - 1);
            ax[i] = {i0, i1, s - static_cast<double>(i0)};
        }
        return ax;
    };
    const auto ay = make_axis(oh, h);
    const auto axx = make_axis(ow, w);

    for (long p = 0; p < n * c; ++p) {
        const double* plane = input->data.data() + p * h * w;
        double* oplane = out->data.data() + p * oh * ow;
        for (long y = 0; y < oh; ++y) {
            const auto& ly = ay[y];
            const double* r0 = plane + ly.i0 * w;
            const double* r1 = plane + ly.i1 * w;
            double* orow = oplane + y * ow;
            for (long x = 0; x < ow; ++x) {
                const auto& lx = axx[x];
                const double top = r0[lx.i0] * (1.0 - lx.w1) + r0[lx.i1] * lx.w1;
                const double bot = r1[lx.i0] * (1.0 - lx.w1) + r1[lx.i1] * lx.w1;
                orow[x] = top * (1.0 - ly.w1) + bot * ly.w1;
            }
        }
    }
    if (out->requires_grad) {
        out->parents = {input};
        Tensor* o = out.get();
        out->backward_fn = [input, o, ay, axx, n, c, h, w, oh, ow] {
            input->ensure_grad();
            for (long p = 0; p < n * c; ++p) {
                double* gplane = input->grad.data() + p * h * w;
                const double* g = o->grad.data() + p * oh * ow;
                for (long y = 0; y < oh; ++y) {
                    const auto& ly = ay[y];
                    for (long x = 0; x < ow; ++x) {
                        const auto& lx = axx[x];
                        const double gv = g[y * ow + x];
                        gplane[ly.i0 * w + lx.i0] += gv * (1.0 - ly.w1) * (1.0 - lx.w1);
                        gplane[ly.i0 * w + lx.i1] += gv * (1.0 - ly.w1) * lx.w1;
                        gplane[ly.i1 * w + lx.i0] += gv * ly.w1 * (1.0 - lx.w1);
                        gplane[ly.i1 * w + lx.i1] += gv * ly.w1 * lx.w1;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.9;  // weight kept by the old running value

    explicit BatchNormState(long channels = 0)
        : running_mean(static_cast<size_t>(channels), 0.0),
          running_var(static_cast<size_t>(channels), 1.0) {}
};

/// Per-channel batch normalization. gamma and beta are (1, c, 1, 1).
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running statistics; eval mode uses the
/// running statistics and is purely elementwise.
inline TensorPtr batch_norm(const TensorPtr& input, const TensorPtr& gamma,
                            const TensorPtr& beta, BatchNormState& state, bool training) {
    const auto [n, c, h, w] = input->shape;
    detail::require(gamma->shape == Shape{1, c, 1, 1} && beta->shape == Shape{1, c, 1, 1},
                    "batch_norm: gamma/beta must be (1," + std::to_string(c) + ",1,1)");
    detail::require(static_cast<long>(state.running_mean.size()) == c,
                    "batch_norm: state tracks " + std::to_string(state.running_mean.size()) +
                        " channels, input has " + std::to_string(c));
    const long m = n * h * w;
    const bool rg = input->requires_grad || gamma->requires_grad || beta->requires_grad;
    auto out = Tensor::create(input->shape, 0.0, rg);

    const long hw = h * w;
    auto channel_ptr = [&](const std::vector<double>& v, long b, long ch) {
        return v.data() + (b * c + ch) * hw;
    };

    if (training) {
        detail::require(m >= 2, "batch_norm: training needs at least 2 values per channel");
        std::vector<double> mean(c, 0.0), var(c, 0.0);
        for (long ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (long b = 0; b < n; ++b) {
                const double* p = channel_ptr(input->data, b, ch);
                for (long i = 0; i < hw; ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (long b = 0; b < n; ++b) {
                const double* p = channel_ptr(input->data, b, ch);
                for (long i = 0; i < hw; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / static_cast<double>(m);  // biased, used to normalize
            const double unbiased = sq / static_cast<double>(m - 1);
            state.running_mean[ch] =
                state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * mu;
            state.running_var[ch] =
                state.momentum * state.running_var[ch] + (1.0 - state.momentum) * unbiased;
        }
        for (long ch = 0; ch < c; ++ch) {
            const double inv_std = 1.0 / std::sqrt(var[ch] + state.eps);
            const double gv = gamma->data[ch], bv = beta->data[ch], mu = mean[ch];
            for (long b = 0; b < n; ++b) {
                const double* p = channel_ptr(input->data, b, ch);
                double* q = out->data.data() + (b * c + ch) * hw;
                for (long i = 0; i < hw; ++i) q[i] = gv * (p[i] - mu) * inv_std + bv;
            }
        }
        if (rg) {
            out->parents = {input, gamma, beta};
            Tensor* o = out.get();
            out->backward_fn = [input, gamma, beta, o, mean, var, eps = state.eps, n, c, hw,
                                m] {
                if (input->requires_grad) input->ensure_grad();
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                const double inv_m = 1.0 / static_cast<double>(m);
                for (long ch = 0; ch < c; ++ch) {
                    const double inv_std = 1.0 / std::sqrt(var[ch] + eps);
                    const double mu = mean[ch];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (long b = 0; b < n; ++b) {
                        const double* g = o->grad.data() + (b * c + ch) * hw;
                        const double* p = input->data.data() + (b * c + ch) * hw;
                        for (long i = 0; i < hw; ++i) {
                            sum_g += g[i];
                            sum_gx += g[i] * (p[i] - mu) * inv_std;
                        }
                    }
                    if (gamma->requires_grad) gamma->grad[ch] += sum_gx;
                    if (beta->requires_grad) beta->grad[ch] += sum_g;
                    if (input->requires_grad) {
                        const double gv = gamma->data[ch];
                        for (long b = 0; b < n; ++b) {
                            const double* g = o->grad.data() + (b * c + ch) * hw;
                            const double* p = input->data.data() + (b * c + ch) * hw;
                            double* gi = input->grad.data() + (b * c + ch) * hw;
                            for (long i = 0; i < hw; ++i) {
                                const double xhat = (p[i] - mu) * inv_std;
                                gi[i] += gv * inv_std *
                                         (g[i] - inv_m * (sum_g + xhat * sum_gx));
                            }
                        }
                    }
                }
            };
        }
    } else {
        for (long ch = 0; ch < c; ++ch) {
            const double inv_std = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
            const double gv = gamma->data[ch], bv = beta->data[ch];
            const double mu = state.running_mean[ch];
            for (long b = 0; b < n; ++b) {
                const double* p = channel_ptr(input->data, b, ch);
                double* q = out->data.data() + (b * c + ch) * hw;
                for (long i = 0; i < hw; ++i) q[i] = gv * (p[i] - mu) * inv_std + bv;
            }
        }
        if (rg) {
            out->parents = {input, gamma, beta};
            Tensor* o = out.get();
            std::vector<double> inv_stds(c);
            for (long ch = 0; ch < c; ++ch)
                inv_stds[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
            out->backward_fn = [input, gamma, beta, o, inv_stds,
                                means = state.running_mean, n, c, hw] {
                if (input->requires_grad) input->ensure_grad();
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                for (long ch = 0; ch < c; ++ch) {
                    const double inv_std = inv_stds[ch];
                    const double gv = gamma->data[ch];
                    for (long b = 0; b < n; ++b) {
                        const long off = (b * c + ch) * hw;
                        const double* g = o->grad.data() + off;
                        const double* p = input->data.data() + off;
                        for (long i = 0; i < hw; ++i) {
                            if (input->requires_grad) input->grad[off + i] += g[i] * gv * inv_std;
                            if (gamma->requires_grad)
                                gamma->grad[ch] += g[i] * (p[i] - means[ch]) * inv_std;
                            if (beta->requires_grad) beta->grad[ch] += g[i];
                        }
                    }
                }
            };
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// map fusion and regularization

enum class ReduceMode { Min, Max };

/// Elementwise min or max across equally shaped maps. The gradient flows to
/// the first map attaining the extremum in input order.
inline TensorPtr reduce_maps(const std::vector<TensorPtr>& maps, ReduceMode mode) {
    detail::require(!maps.empty(), "reduce_maps: needs at least one map");
    for (const auto& m : maps)
        detail::require(m->shape == maps[0]->shape,
                        "reduce_maps: all maps must share a shape, got " + m->shape.str() +
                            " vs " + maps[0]->shape.str());
    const long n = maps[0]->shape.numel();
    auto out = Tensor::create(maps[0]->shape, 0.0, detail::any_requires_grad(maps));
    std::vector<int> winner(static_cast<size_t>(n), 0);
    for (long i = 0; i < n; ++i) {
        double best = maps[0]->data[i];
        int bi = 0;
        for (size_t k = 1; k < maps.size(); ++k) {
            const double v = maps[k]->data[i];
            const bool take = mode == ReduceMode::Max ? v > best : v < best;
            if (take) {
                best = v;
                bi = static_cast<int>(k);
            }
        }
        out->data[i] = best;
        winner[i] = bi;
    }
    if (out->requires_grad) {
        out->parents = maps;
        Tensor* o = out.get();
        out->backward_fn = [maps, o, win = std::move(winner), n] {
            for (const auto& m : maps)
                if (m->requires_grad) m->ensure_grad();
            for (long i = 0; i < n; ++i) {
                const auto& m = maps[static_cast<size_t>(win[i])];
                if (m->requires_grad) m->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

/// Anisotropic total-variation penalty: mean absolute vertical difference
/// plus mean absolute horizontal difference. Subgradient 0 at ties.
inline TensorPtr tv_penalty(const TensorPtr& a) {
    const auto [n, c, h, w] = a->shape;
    detail::require(h >= 2 && w >= 2, "tv_penalty: needs at least 2x2 maps, got " +
                                          a->shape.str());
    auto out = Tensor::create(Shape{1, 1, 1, 1}, 0.0, a->requires_grad);
    const long nv = n * c * (h - 1) * w;
    const long nh = n * c * h * (w - 1);
    double sv = 0.0, sh = 0.0;
    for (long p = 0; p < n * c; ++p) {
        const double* plane = a->data.data() + p * h * w;
        for (long y = 0; y + 1 < h; ++y)
            for (long x = 0; x < w; ++x)
                sv += std::fabs(plane[(y + 1) * w + x] - plane[y * w + x]);
        for (long y = 0; y < h; ++y)
            for (long x = 0; x + 1 < w; ++x)
                sh += std::fabs(plane[y * w + x + 1] - plane[y * w + x]);
    }
    out->data[0] = sv / static_cast<double>(nv) + sh / static_cast<double>(nh);
    if (out->requires_grad) {
        out->parents = {a};
        Tensor* o = out.get();
        out->backward_fn = [a, o, n, c, h, w, nv, nh] {
            a->ensure_grad();
            const double gv = o->grad[0] / static_cast<double>(nv);
            const double gh = o->grad[0] / static_cast<double>(nh);
            for (long p = 0; p < n * c; ++p) {
                const double* plane = a->data.data() + p * h * w;
                double* gplane = a->grad.data() + p * h * w;
                for (long y = 0; y + 1 < h; ++y)
                    for (long x = 0; x < w; ++x) {
                        const double d = plane[(y + 1) * w + x] - plane[y * w + x];
                        if (d > 0.0) {
                            gplane[(y + 1) * w + x] += gv;
                            gplane[y * w + x] -= gv;
                        } else if (d < 0.0) {
                            gplane[(y + 1) * w + x] -= gv;
                            gplane[y * w + x] += gv;
                        }
                    }
                for (long y = 0; y < h; ++y)
                    for (long x = 0; x + 1 < w; ++x) {
                        const double d = plane[y * w + x + 1] - plane[y * w + x];
                        if (d > 0.0) {
                            gplane[y * w + x + 1] += gh;
                            gplane[y * w + x] -= gh;
                        } else if (d < 0.0) {
                            gplane[y * w + x + 1] -= gh;
                            gplane[y * w + x] += gh;
                        }
                    }
            }
        };
    }
    return out;
}

}  // namespace nfaseg
