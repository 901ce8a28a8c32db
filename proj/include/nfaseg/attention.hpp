#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nfaseg/error.hpp"
#include "nfaseg/ops.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

/// Local self-attention over a square window centered on each position.
/// q, k, v are (n, c, h, w); rel_bias is (1, 1, window, window) holding one
/// learned logit offset per relative position. Dot products are scaled by
/// 1/sqrt(c); positions outside the image are masked out of the softmax.
/// The window must be odd so the center pixel attends to itself.
inline TensorPtr windowed_attention(const TensorPtr& q, const TensorPtr& k,
                                    const TensorPtr& v, const TensorPtr& rel_bias,
                                    long window) {
    detail::require(window >= 1 && window % 2 == 1,
                    "windowed_attention: window must be odd and >= 1, got " +
                        std::to_string(window));
    detail::require(q->shape == k->shape && q->shape == v->shape,
                    "windowed_attention: q/k/v shapes must match, got " + q->shape.str() +
                        ", " + k->shape.str() + ", " + v->shape.str());
    detail::require(rel_bias->shape == Shape{1, 1, window, window},
                    "windowed_attention: rel_bias must be (1,1,window,window), got " +
                        rel_bias->shape.str());
    const auto [n, c, h, w] = q->shape;
    const long r = window / 2;
    const long ww = window * window;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    const bool rg = q->requires_grad || k->requires_grad || v->requires_grad ||
                    rel_bias->requires_grad;
    auto out = Tensor::create(q->shape, 0.0, rg);

    // attention probabilities, kept for the backward pass; invalid offsets
    // hold exact zeros
    std::vector<double> probs(static_cast<size_t>(n * h * w * ww), 0.0);
    std::vector<double> scores(static_cast<size_t>(ww));

    const long chw = c * h * w;
    const long hw = h * w;
    for (long b = 0; b < n; ++b) {
        for (long y = 0; y < h; ++y) {
            for (long x = 0; x < w; ++x) {
                double smax = -1e300;
                for (long dy = -r; dy <= r; ++dy) {
                    for (long dx = -r; dx <= r; ++dx) {
                        const long j = (dy + r) * window + (dx + r);
                        const long yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) {
                            scores[j] = -1e300;
                            continue;
                        }
                        double dot = 0.0;
                        const double* qp = q->data.data() + b * chw + y * w + x;
                        const double* kp = k->data.data() + b * chw + yy * w + xx;
                        for (long ch = 0; ch < c; ++ch) dot += qp[ch * hw] * kp[ch * hw];
                        scores[j] = dot * scale + rel_bias->data[j];
                        if (scores[j] > smax) smax = scores[j];
                    }
                }
                double z = 0.0;
                double* prow = probs.data() + ((b * h + y) * w + x) * ww;
                for (long j = 0; j < ww; ++j) {
                    if (scores[j] <= -1e299) continue;
                    prow[j] = std::exp(scores[j] - smax);
                    z += prow[j];
                }
                for (long j = 0; j < ww; ++j) prow[j] /= z;
                double* op = out->data.data() + b * chw + y * w + x;
                for (long dy = -r; dy <= r; ++dy) {
                    for (long dx = -r; dx <= r; ++dx) {
                        const long j = (dy + r) * window + (dx + r);
                        const double p = prow[j];
                        if (p == 0.0) continue;
                        const double* vp =
                            v->data.data() + b * chw + (y + dy) * w + (x + dx);
                        for (long ch = 0; ch < c; ++ch) op[ch * hw] += p * vp[ch * hw];
                    }
                }
            }
        }
    }

    if (rg) {
        out->parents = {q, k, v, rel_bias};
        Tensor* o = out.get();
        out->backward_fn = [q, k, v, rel_bias, o, pr = std::move(probs), n, c, h, w, r,
                            window, ww, chw, hw, scale] {
            if (q->requires_grad) q->ensure_grad();
            if (k->requires_grad) k->ensure_grad();
            if (v->requires_grad) v->ensure_grad();
            if (rel_bias->requires_grad) rel_bias->ensure_grad();
            std::vector<double> dp(static_cast<size_t>(ww));
            for (long b = 0; b < n; ++b) {
                for (long y = 0; y < h; ++y) {
                    for (long x = 0; x < w; ++x) {
                        const double* prow = pr.data() + ((b * h + y) * w + x) * ww;
                        const double* go = o->grad.data() + b * chw + y * w + x;
                        // dL/dp_j = sum_c g_c v_{j,c}; also route dL/dv
                        double dots = 0.0;
                        for (long dy = -r; dy <= r; ++dy) {
                            for (long dx = -r; dx <= r; ++dx) {
                                const long j = (dy + r) * window + (dx + r);
                                const double p = prow[j];
                                if (p == 0.0) {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                const long off = b * chw + (y + dy) * w + (x + dx);
                                const double* vp = v->data.data() + off;
                                double acc = 0.0;
                                for (long ch = 0; ch < c; ++ch)
                                    acc += go[ch * hw] * vp[ch * hw];
                                dp[j] = acc;
                                dots += p * acc;
                                if (v->requires_grad) {
                                    double* gv = v->grad.data() + off;
                                    for (long ch = 0; ch < c; ++ch)
                                        gv[ch * hw] += p * go[ch * hw];
                                }
                            }
                        }
                        for (long dy = -r; dy <= r; ++dy) {
                            for (long dx = -r; dx <= r; ++dx) {
                                const long j = (dy + r) * window + (dx + r);
                                const double p = prow[j];
                                if (p == 0.0) continue;
                                const double ds = p * (dp[j] - dots);
                                if (rel_bias->requires_grad) rel_bias->grad[j] += ds;
                                const long off = b * chw + (y + dy) * w + (x + dx);
                                if (q->requires_grad) {
                                    const double* kp = k->data.data() + off;
                                    double* gq = q->grad.data() + b * chw + y * w + x;
                                    for (long ch = 0; ch < c; ++ch)
                                        gq[ch * hw] += ds * scale * kp[ch * hw];
                                }
                                if (k->requires_grad) {
                                    const double* qp = q->data.data() + b * chw + y * w + x;
                                    double* gk = k->grad.data() + off;
                                    for (long ch = 0; ch < c; ++ch)
                                        gk[ch * hw] += ds * scale * qp[ch * hw];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace nfaseg
