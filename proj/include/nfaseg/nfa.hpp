#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nfaseg/attention.hpp"
#include "nfaseg/error.hpp"
#include "nfaseg/ops.hpp"
#include "nfaseg/special.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

enum class CovarianceForm { Spherical, IndependentElliptical, DenseElliptical };

inline const char* covariance_form_name(CovarianceForm f) {
    switch (f) {
        case CovarianceForm::Spherical: return "spherical";
        case CovarianceForm::IndependentElliptical: return "elliptical";
        case CovarianceForm::DenseElliptical: return "dense";
    }
    return "?";
}

inline CovarianceForm covariance_form_from_string(const std::string& s) {
    if (s == "spherical") return CovarianceForm::Spherical;
    if (s == "elliptical") return CovarianceForm::IndependentElliptical;
    if (s == "dense") return CovarianceForm::DenseElliptical;
    throw_config("unknown covariance form '" + s +
                 "' (expected spherical, elliptical, or dense)");
}

/// Background ("naive") model of feature vectors: a robust center plus one
/// of three covariance shapes. n_test is the number of tests the detector
/// runs on the analyzed map (its pixel count).
struct NaiveModel {
    CovarianceForm form = CovarianceForm::Spherical;
    long channels = 0;
    double n_test = 1.0;
    std::vector<double> center;
    double lambda = 1.0;        // Spherical and IndependentElliptical scale
    std::vector<double> delta;  // IndependentElliptical diagonal, det 1
    std::vector<double> sigma;  // DenseElliptical covariance, row-major K*K
    std::vector<double> chol;   // lower-triangular L with sigma = L L^T
    bool degenerate = false;

    static NaiveModel spherical(std::vector<double> center, double lambda,
                                double n_test);
    static NaiveModel independent(std::vector<double> center, double lambda,
                                  std::vector<double> delta, double n_test);
    static NaiveModel dense(std::vector<double> center, std::vector<double> sigma,
                            double n_test);
};

namespace detail {

inline void check_n_test(double n_test) {
    require(n_test >= 1.0, "naive model: n_test must be >= 1, got " +
                               std::to_string(n_test));
}

// Cholesky factorization of a symmetric K x K matrix; lower-triangular
// result. Throws a numerical error when the matrix is not positive-definite.
inline std::vector<double> cholesky(const std::vector<double>& m, long k) {
    std::vector<double> l(static_cast<size_t>(k * k), 0.0);
    for (long i = 0; i < k; ++i) {
        for (long j = 0; j <= i; ++j) {
            double s = m[i * k + j];
            for (long p = 0; p < j; ++p) s -= l[i * k + p] * l[j * k + p];
            if (i == j) {
                if (s <= 0.0)
                    throw_numerical(
                        "dense covariance is not positive-definite (pivot " +
                        std::to_string(s) + " at " + std::to_string(i) + ")");
                l[i * k + i] = std::sqrt(s);
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    return l;
}

}  // namespace detail

inline NaiveModel NaiveModel::spherical(std::vector<double> center, double lambda,
                                        double n_test) {
    detail::require(lambda > 0.0, "spherical naive model: lambda must be > 0");
    detail::check_n_test(n_test);
    NaiveModel m;
    m.form = CovarianceForm::Spherical;
    m.channels = static_cast<long>(center.size());
    m.center = std::move(center);
    m.lambda = lambda;
    m.n_test = n_test;
    return m;
}

inline NaiveModel NaiveModel::independent(std::vector<double> center, double lambda,
                                          std::vector<double> delta, double n_test) {
    detail::require(lambda > 0.0, "elliptical naive model: lambda must be > 0");
    detail::require(delta.size() == center.size(),
                    "elliptical naive model: delta size must match center");
    detail::check_n_test(n_test);
    double log_det = 0.0;
    for (double d : delta) {
        detail::require(d > 0.0, "elliptical naive model: all delta entries must be > 0");
        log_det += std::log(d);
    }
    detail::require(std::fabs(log_det) < 1e-9 * std::max<double>(1, delta.size()) + 1e-9,
                    "elliptical naive model: delta determinant must be 1");
    NaiveModel m;
    m.form = CovarianceForm::IndependentElliptical;
    m.channels = static_cast<long>(center.size());
    m.center = std::move(center);
    m.lambda = lambda;
    m.delta = std::move(delta);
    m.n_test = n_test;
    return m;
}

inline NaiveModel NaiveModel::dense(std::vector<double> center, std::vector<double> sigma,
                                    double n_test) {
    const long k = static_cast<long>(center.size());
    detail::require(static_cast<long>(sigma.size()) == k * k,
                    "dense naive model: sigma must be K*K");
    detail::check_n_test(n_test);
    NaiveModel m;
    m.form = CovarianceForm::DenseElliptical;
    m.channels = k;
    m.center = std::move(center);
    m.chol = detail::cholesky(sigma, k);
    m.sigma = std::move(sigma);
    m.n_test = n_test;
    return m;
}

/// Estimate the naive model from a batch of feature maps (n, K, h, w).
/// The center is the per-channel median over all pixels; spreads are
/// moments of the residuals about it. Pure data-side computation: no
/// gradients flow into the returned statistics. n_test = h*w.
inline NaiveModel estimate_naive_model(const TensorPtr& features, CovarianceForm form) {
    const auto [n, k, h, w] = features->shape;
    const long m_count = n * h * w;
    detail::require(m_count >= k + 1, "estimate_naive_model: needs at least K+1 samples, got " +
                                          std::to_string(m_count) + " for K=" +
                                          std::to_string(k));
    NaiveModel model;
    model.form = form;
    model.channels = k;
    model.n_test = static_cast<double>(h * w);
    model.center.resize(static_cast<size_t>(k));

    const long hw = h * w;
    std::vector<double> buf(static_cast<size_t>(m_count));
    for (long ch = 0; ch < k; ++ch) {
        long idx = 0;
        for (long b = 0; b < n; ++b) {
            const double* p = features->data.data() + (b * k + ch) * hw;
            for (long i = 0; i < hw; ++i) buf[idx++] = p[i];
        }
        std::sort(buf.begin(), buf.end());
        model.center[ch] = m_count % 2 == 1
                               ? buf[m_count / 2]
                               : 0.5 * (buf[m_count / 2 - 1] + buf[m_count / 2]);
    }

    // per-channel variance of residuals about the median
    std::vector<double> v(static_cast<size_t>(k), 0.0);
    for (long ch = 0; ch < k; ++ch) {
        double acc = 0.0;
        const double c = model.center[ch];
        for (long b = 0; b < n; ++b) {
            const double* p = features->data.data() + (b * k + ch) * hw;
            for (long i = 0; i < hw; ++i) {
                const double r = p[i] - c;
                acc += r * r;
            }
        }
        v[ch] = acc / static_cast<double>(m_count);
        if (v[ch] < 1e-12) {
            v[ch] = 1e-12;
            model.degenerate = true;
        }
    }

    switch (form) {
        case CovarianceForm::Spherical: {
            double s = 0.0;
            for (double x : v) s += x;
            model.lambda = s / static_cast<double>(k);
            break;
        }
        case CovarianceForm::IndependentElliptical: {
            double log_gm = 0.0;
            for (double x : v) log_gm += std::log(x);
            model.lambda = std::exp(log_gm / static_cast<double>(k));
            model.delta.resize(static_cast<size_t>(k));
            for (long ch = 0; ch < k; ++ch) model.delta[ch] = v[ch] / model.lambda;
            break;
        }
        case CovarianceForm::DenseElliptical: {
            model.sigma.assign(static_cast<size_t>(k * k), 0.0);
            for (long b = 0; b < n; ++b) {
                for (long i = 0; i < hw; ++i) {
                    for (long c1 = 0; c1 < k; ++c1) {
                        const double r1 =
                            features->data[(b * k + c1) * hw + i] - model.center[c1];
                        for (long c2 = 0; c2 <= c1; ++c2) {
                            const double r2 =
                                features->data[(b * k + c2) * hw + i] - model.center[c2];
                            model.sigma[c1 * k + c2] += r1 * r2;
                        }
                    }
                }
            }
            double trace = 0.0;
            for (long c1 = 0; c1 < k; ++c1) {
                for (long c2 = 0; c2 <= c1; ++c2) {
                    model.sigma[c1 * k + c2] /= static_cast<double>(m_count);
                    model.sigma[c2 * k + c1] = model.sigma[c1 * k + c2];
                }
                if (model.sigma[c1 * k + c1] < 1e-12) {
                    model.sigma[c1 * k + c1] = 1e-12;
                    model.degenerate = true;
                }
                trace += model.sigma[c1 * k + c1];
            }
            const double shrink = 1e-4 * trace / static_cast<double>(k);
            for (long c1 = 0; c1 < k; ++c1) model.sigma[c1 * k + c1] += shrink;
            model.chol = detail::cholesky(model.sigma, k);
            break;
        }
    }
    return model;
}

/// Pointwise significance map (n, 1, h, w): S = -ln(NFA), larger means a
/// stronger detection, floor at -ln(n_test).
struct SignificanceMap {
    TensorPtr values;
    long scale_index = 0;
    double n_test = 1.0;
};

/// Significance of each pixel's feature vector under the naive model:
/// u = half the squared Mahalanobis distance to the center, and
/// S = -ln(n_test) + ln Gamma(K/2) - ln Gamma(K/2, u). Differentiable in
/// the features; the model is a constant.
inline SignificanceMap significance(const TensorPtr& features, const NaiveModel& model,
                                    long scale_index = 0) {
    const auto [n, k, h, w] = features->shape;
    detail::require(k == model.channels,
                    "significance: features have " + std::to_string(k) +
                        " channels, model expects " + std::to_string(model.channels));
    const double a = static_cast<double>(k) / 2.0;
    const double lg_a = special::log_gamma(a);
    const double ln_n = std::log(model.n_test);
    const double floor_s = -ln_n;

    auto out = Tensor::create(Shape{n, 1, h, w}, 0.0, features->requires_grad);
    const long hw = h * w;
    std::vector<double> us(static_cast<size_t>(n * hw));
    std::vector<double> r(static_cast<size_t>(k)), z(static_cast<size_t>(k));

    for (long b = 0; b < n; ++b) {
        for (long i = 0; i < hw; ++i) {
            for (long ch = 0; ch < k; ++ch)
                r[ch] = features->data[(b * k + ch) * hw + i] - model.center[ch];
            double u = 0.0;
            switch (model.form) {
                case CovarianceForm::Spherical:
                    for (long ch = 0; ch < k; ++ch) u += r[ch] * r[ch];
                    u *= 0.5 / model.lambda;
                    break;
                case CovarianceForm::IndependentElliptical:
                    for (long ch = 0; ch < k; ++ch)
                        u += r[ch] * r[ch] / model.delta[ch];
                    u *= 0.5 / model.lambda;
                    break;
                case CovarianceForm::DenseElliptical:
                    // forward substitution: L z = r, u = ||z||^2 / 2
                    for (long ch = 0; ch < k; ++ch) {
                        double s = r[ch];
                        for (long p = 0; p < ch; ++p)
                            s -= model.chol[ch * k + p] * z[p];
                        z[ch] = s / model.chol[ch * k + ch];
                        u += z[ch] * z[ch];
                    }
                    u *= 0.5;
                    break;
            }
            us[b * hw + i] = u;
            const double s_val =
                -ln_n + lg_a - special::log_upper_incomplete_gamma(a, u);
            out->data[b * hw + i] = std::max(s_val, floor_s);
        }
    }

    if (features->requires_grad) {
        out->parents = {features};
        Tensor* o = out.get();
        out->backward_fn = [features, o, model, us = std::move(us), a, n, k, hw] {
            features->ensure_grad();
            std::vector<double> r(static_cast<size_t>(k)), z(static_cast<size_t>(k));
            for (long b = 0; b < n; ++b) {
                for (long i = 0; i < hw; ++i) {
                    const double g = o->grad[b * hw + i];
                    if (g == 0.0) continue;
                    // dS/du = exp((a-1) ln u - u - ln Gamma(a,u)); the small
                    // floor keeps the a<1 power finite at u=0
                    const double u = std::max(us[b * hw + i], 1e-12);
                    const double ds_du =
                        std::exp((a - 1.0) * std::log(u) - u -
                                 special::log_upper_incomplete_gamma(a, u));
                    const double gu = g * ds_du;
                    for (long ch = 0; ch < k; ++ch)
                        r[ch] = features->data[(b * k + ch) * hw + i] - model.center[ch];
                    switch (model.form) {
                        case CovarianceForm::Spherical:
                            for (long ch = 0; ch < k; ++ch)
                                features->grad[(b * k + ch) * hw + i] +=
                                    gu * r[ch] / model.lambda;
                            break;
                        case CovarianceForm::IndependentElliptical:
                            for (long ch = 0; ch < k; ++ch)
                                features->grad[(b * k + ch) * hw + i] +=
                                    gu * r[ch] / (model.lambda * model.delta[ch]);
                            break;
                        case CovarianceForm::DenseElliptical: {
                            // du/dr = Sigma^{-1} r via two triangular solves
                            for (long ch = 0; ch < k; ++ch) {
                                double s = r[ch];
                                for (long p = 0; p < ch; ++p)
                                    s -= model.chol[ch * k + p] * z[p];
                                z[ch] = s / model.chol[ch * k + ch];
                            }
                            for (long ch = k - 1; ch >= 0; --ch) {
                                double s = z[ch];
                                for (long p = ch + 1; p < k; ++p)
                                    s -= model.chol[p * k + ch] * z[p];
                                z[ch] = s / model.chol[ch * k + ch];
                            }
                            for (long ch = 0; ch < k; ++ch)
                                features->grad[(b * k + ch) * hw + i] += gu * z[ch];
                            break;
                        }
                    }
                }
            }
        };
    }
    return {out, scale_index, model.n_test};
}

// ---------------------------------------------------------------------------
// activation

struct ActivationConfig {
    double alpha = 5e-4;
    double n_test = 1.0;
};

/// Squashes significance scores into (-1, 1): 2*sigmoid(alpha*(x + ln
/// n_test)) - 1. Zero exactly at the saturation floor x = -ln n_test, and
/// within [0, 1) above it.
inline TensorPtr sigm_alpha(const TensorPtr& scores, const ActivationConfig& cfg) {
    detail::require(cfg.alpha > 0.0, "sigm_alpha: alpha must be > 0, got " +
                                         std::to_string(cfg.alpha));
    detail::check_n_test(cfg.n_test);
    auto shifted = scalar_add(scores, std::log(cfg.n_test));
    auto squashed = sigmoid(scalar_mul(shifted, cfg.alpha));
    return scalar_add(scalar_mul(squashed, 2.0), -1.0);
}

// ---------------------------------------------------------------------------
// blocks

/// conv3x3 (stride 1, pad 1) + batch norm + relu
struct ConvBlockParams {
    TensorPtr weight;  // (c_out, c_in, 3, 3)
    TensorPtr bias;    // (1, c_out, 1, 1)
    TensorPtr gamma;   // (1, c_out, 1, 1)
    TensorPtr beta;    // (1, c_out, 1, 1)
    BatchNormState bn;
};

inline TensorPtr conv_block(const TensorPtr& x, ConvBlockParams& p, bool training) {
    auto y = conv2d(x, p.weight, p.bias, 1, 1);
    y = batch_norm(y, p.gamma, p.beta, p.bn, training);
    return relu(y);
}

struct BasicNfaParams {
    ConvBlockParams block1;
    ConvBlockParams block2;
};

/// Two conv blocks, then a naive model estimated from the resulting
/// features (statistics detached), then the significance map.
inline SignificanceMap basic_nfa_block(const TensorPtr& features, BasicNfaParams& params,
                                       CovarianceForm form, bool training,
                                       long scale_index = 0) {
    auto y = conv_block(features, params.block1, training);
    y = conv_block(y, params.block2, training);
    const NaiveModel model = estimate_naive_model(y, form);
    return significance(y, model, scale_index);
}

struct SpatialNfaParams {
    ConvBlockParams block;
    TensorPtr wq, wk, wv;  // (c, c, 1, 1) projections, no bias
    TensorPtr rel_bias;    // (1, 1, window, window)
    long window = 7;
};

/// One conv block, then windowed self-attention (1x1-conv projections,
/// learned per-offset bias), then naive-model estimation and significance.
inline SignificanceMap spatial_nfa_block(const TensorPtr& features,
                                         SpatialNfaParams& params, CovarianceForm form,
                                         bool training, long scale_index = 0) {
    auto y = conv_block(features, params.block, training);
    auto q = conv2d(y, params.wq, nullptr);
    auto k = conv2d(y, params.wk, nullptr);
    auto v = conv2d(y, params.wv, nullptr);
    auto attended = windowed_attention(q, k, v, params.rel_bias, params.window);
    const NaiveModel model = estimate_naive_model(attended, form);
    return significance(attended, model, scale_index);
}

// ---------------------------------------------------------------------------
// multi-scale fusion

/// Per-sample scale weights in (0,1)^m from the maps themselves: stack as
/// channels, global average pool, width-3 1D convolution across scales,
/// sigmoid. Returns (n, m, 1, 1).
inline TensorPtr eca_scale_weights(const std::vector<SignificanceMap>& maps,
                                   const TensorPtr& kernel) {
    detail::require(!maps.empty(), "eca_scale_weights: needs at least one map");
    std::vector<TensorPtr> values;
    values.reserve(maps.size());
    for (const auto& m : maps) {
        detail::require(m.values->shape == maps[0].values->shape,
                        "eca_scale_weights: maps must share a resolution, got " +
                            m.values->shape.str() + " vs " + maps[0].values->shape.str());
        values.push_back(m.values);
    }
    auto stacked = concat_channels(values);
    auto pooled = global_avg_pool(stacked);
    return sigmoid(conv1d_channels(pooled, kernel));
}

/// Reduce equally sized significance maps to one, optionally weighting each
/// map by its (n,1,1,1) slice of `weights`. Max implements the union of
/// detections; min is the strict every-scale rule. The result inherits the
/// n_test (and index) of the finest scale: the largest per-map n_test.
inline SignificanceMap fuse_scales(const std::vector<SignificanceMap>& maps,
                                   const TensorPtr& weights, ReduceMode mode) {
    detail::require(!maps.empty(), "fuse_scales: needs at least one map");
    const long m = static_cast<long>(maps.size());
    for (const auto& s : maps)
        detail::require(s.values->shape == maps[0].values->shape,
                        "fuse_scales: maps must share a resolution, got " +
                            s.values->shape.str() + " vs " + maps[0].values->shape.str());
    if (weights) {
        const auto& ws = weights->shape;
        detail::require(ws.n == maps[0].values->shape.n && ws.c == m && ws.h == 1 &&
                            ws.w == 1,
                        "fuse_scales: weights must be (n," + std::to_string(m) +
                            ",1,1), got " + ws.str());
    }
    std::vector<TensorPtr> weighted;
    weighted.reserve(maps.size());
    for (long j = 0; j < m; ++j) {
        weighted.push_back(weights ? scale_channels(maps[j].values,
                                                    slice_channels(weights, j, j + 1))
                                   : maps[j].values);
    }
    auto fused = reduce_maps(weighted, mode);
    long best = 0;
    for (long j = 1; j < m; ++j)
        if (maps[j].n_test > maps[best].n_test) best = j;
    return {fused, maps[best].scale_index, maps[best].n_test};
}

}  // namespace nfaseg
