#pragma once

// Finite-difference verification of every differentiable operation plus the
// full backbone+head composite, independent of any test framework so command
// line tools can run it too. Each case rebuilds its graph from the current
// parameter values; errors are |analytic - fd| / max(1, |fd|).

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nfaseg/attention.hpp"
#include "nfaseg/network.hpp"
#include "nfaseg/nfa.hpp"
#include "nfaseg/ops.hpp"
#include "nfaseg/rng.hpp"
#include "nfaseg/train.hpp"

namespace nfaseg {

struct GradCheckRow {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;

    bool all_pass() const {
        for (const auto& r : rows)
            if (!r.pass) return false;
        return !rows.empty();
    }
};

namespace detail {

struct FdProbe {
    TensorPtr param;
    std::vector<size_t> elements;  // empty = every element
};

inline double fd_max_error(const std::function<TensorPtr()>& build,
                           const std::vector<FdProbe>& probes, double step = 1e-6) {
    auto loss = build();
    for (const auto& p : probes) p.param->zero_grad();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(probes.size());
    for (const auto& p : probes) analytic.push_back(p.param->grad);

    double worst = 0.0;
    for (size_t pi = 0; pi < probes.size(); ++pi) {
        auto& t = *probes[pi].param;
        std::vector<size_t> elements = probes[pi].elements;
        if (elements.empty())
            for (size_t i = 0; i < t.data.size(); ++i) elements.push_back(i);
        for (size_t i : elements) {
            const double saved = t.data[i];
            const double h = step * std::max(1.0, std::fabs(saved));
            t.data[i] = saved + h;
            const double up = build()->data[0];
            t.data[i] = saved - h;
            const double down = build()->data[0];
            t.data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double err =
                std::fabs(analytic[pi][i] - fd) / std::max(1.0, std::fabs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

inline TensorPtr random_tensor(Rng& rng, Shape shape, double lo, double hi,
                               bool grad = true) {
    auto t = Tensor::create(shape, 0.0, grad);
    for (auto& v : t->data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

}  // namespace detail

/// Runs the whole suite; deterministic in the seed.
inline GradCheckReport run_gradient_checks(std::uint64_t seed = 7) {
    using detail::FdProbe;
    using detail::random_tensor;
    Rng rng(seed);
    GradCheckReport report;

    const double primitive_tol = 1e-4;
    const double composite_tol = 1e-3;

    auto run = [&](const std::string& name, double tol,
                   const std::function<TensorPtr()>& build,
                   const std::vector<FdProbe>& probes) {
        const double err = detail::fd_max_error(build, probes);
        report.rows.push_back({name, err, tol, err < tol});
    };

    const Shape small{1, 2, 3, 4};
    {
        auto a = random_tensor(rng, small, -1.0, 1.0);
        auto b = random_tensor(rng, small, -1.0, 1.0);
        run("add", primitive_tol, [&] { return sum_all(mul(add(a, b), b)); },
            {{a, {}}, {b, {}}});
        run("sub", primitive_tol, [&] { return sum_all(mul(sub(a, b), a)); },
            {{a, {}}, {b, {}}});
        run("mul", primitive_tol, [&] { return sum_all(mul(a, b)); },
            {{a, {}}, {b, {}}});
    }
    {
        auto a = random_tensor(rng, small, -1.0, 1.0);
        auto b = random_tensor(rng, small, 0.5, 1.5);  // away from zero
        run("div", primitive_tol, [&] { return sum_all(div(a, b)); },
            {{a, {}}, {b, {}}});
    }
    {
        auto a = random_tensor(rng, small, -1.0, 1.0);
        run("scalar_add", primitive_tol,
            [&] { return sum_all(mul(scalar_add(a, 0.7), a)); }, {{a, {}}});
        run("scalar_mul", primitive_tol,
            [&] { return sum_all(mul(scalar_mul(a, -1.3), a)); }, {{a, {}}});
        run("sigmoid", primitive_tol, [&] { return sum_all(mul(sigmoid(a), a)); },
            {{a, {}}});
        run("sum_all", primitive_tol, [&] { return sum_all(a); }, {{a, {}}});
        run("mean_all", primitive_tol, [&] { return mean_all(a); }, {{a, {}}});
        run("global_avg_pool", primitive_tol,
            [&] { return sum_all(mul(global_avg_pool(a), global_avg_pool(a))); },
            {{a, {}}});
    }
    {
        // keep every activation at least 0.1 away from the relu kink
        auto a = random_tensor(rng, small, 0.1, 1.0);
        for (auto& v : a->data)
            if (rng.bernoulli(0.5)) v = -v;
        run("relu", primitive_tol, [&] { return sum_all(mul(relu(a), a)); },
            {{a, {}}});
    }
    {
        auto a = random_tensor(rng, Shape{1, 2, 3, 3}, -1.0, 1.0);
        auto b = random_tensor(rng, Shape{1, 3, 3, 3}, -1.0, 1.0);
        auto s = random_tensor(rng, Shape{1, 5, 1, 1}, 0.2, 1.2);
        run("concat_channels", primitive_tol,
            [&] {
                auto c = concat_channels({a, b});
                return sum_all(mul(c, c));
            },
            {{a, {}}, {b, {}}});
        run("slice_channels", primitive_tol,
            [&] {
                auto c = slice_channels(concat_channels({a, b}), 1, 4);
                return sum_all(mul(c, c));
            },
            {{a, {}}, {b, {}}});
        run("scale_channels", primitive_tol,
            [&] {
                auto c = scale_channels(concat_channels({a, b}), s);
                return sum_all(mul(c, c));
            },
            {{a, {}}, {b, {}}, {s, {}}});
    }
    {
        auto x = random_tensor(rng, Shape{1, 2, 6, 6}, -1.0, 1.0);
        auto w = random_tensor(rng, Shape{3, 2, 3, 3}, -0.5, 0.5);
        auto b = random_tensor(rng, Shape{1, 3, 1, 1}, -0.2, 0.2);
        run("conv2d_3x3", primitive_tol,
            [&] {
                auto y = conv2d(x, w, b, 1, 1);
                return sum_all(mul(y, y));
            },
            {{x, {}}, {w, {}}, {b, {}}});
    }
    {
        auto x = random_tensor(rng, Shape{1, 3, 4, 4}, -1.0, 1.0);
        auto w = random_tensor(rng, Shape{2, 3, 1, 1}, -0.7, 0.7);
        run("conv2d_1x1_projection", primitive_tol,
            [&] {
                auto y = conv2d(x, w, nullptr);
                return sum_all(mul(y, y));
            },
            {{x, {}}, {w, {}}});
    }
    {
        auto pooled = random_tensor(rng, Shape{2, 4, 1, 1}, -1.0, 1.0);
        auto kernel = random_tensor(rng, Shape{1, 1, 1, 3}, -0.8, 0.8);
        run("conv1d_channels", primitive_tol,
            [&] {
                auto y = conv1d_channels(pooled, kernel);
                return sum_all(mul(y, y));
            },
            {{pooled, {}}, {kernel, {}}});
    }
    {
        auto x = random_tensor(rng, Shape{1, 2, 4, 4}, -1.0, 1.0);
        run("maxpool2x2", primitive_tol,
            [&] {
                auto y = maxpool2x2(x);
                return sum_all(mul(y, y));
            },
            {{x, {}}});
        run("bilinear_upsample", primitive_tol,
            [&] {
                auto y = bilinear_upsample(x, 2);
                return sum_all(mul(y, y));
            },
            {{x, {}}});
    }
    {
        auto x = random_tensor(rng, Shape{2, 3, 4, 4}, -1.0, 1.0);
        auto gamma = random_tensor(rng, Shape{1, 3, 1, 1}, 0.5, 1.5);
        auto beta = random_tensor(rng, Shape{1, 3, 1, 1}, -0.3, 0.3);
        BatchNormState bn(3);
        run("batch_norm_training", primitive_tol,
            [&] {
                auto y = batch_norm(x, gamma, beta, bn, true);
                return sum_all(mul(y, y));
            },
            {{x, {}}, {gamma, {}}, {beta, {}}});
    }
    {
        auto a = random_tensor(rng, Shape{1, 1, 3, 4}, -1.0, 1.0);
        auto b = random_tensor(rng, Shape{1, 1, 3, 4}, -1.0, 1.0);
        run("reduce_maps_max", primitive_tol,
            [&] {
                auto y = reduce_maps({a, b}, ReduceMode::Max);
                return sum_all(mul(y, y));
            },
            {{a, {}}, {b, {}}});
        run("reduce_maps_min", primitive_tol,
            [&] {
                auto y = reduce_maps({a, b}, ReduceMode::Min);
                return sum_all(mul(y, y));
            },
            {{a, {}}, {b, {}}});
    }
    {
        auto t = Tensor::create(Shape{1, 1, 4, 5}, 0.0, true);
        for (size_t i = 0; i < t->data.size(); ++i)
            t->data[i] = 0.5 * std::sin(3.7 * static_cast<double>(i + 1));
        run("tv_penalty", primitive_tol, [&] { return tv_penalty(t); }, {{t, {}}});
    }
    {
        auto q = random_tensor(rng, Shape{1, 2, 4, 4}, -0.8, 0.8);
        auto k = random_tensor(rng, Shape{1, 2, 4, 4}, -0.8, 0.8);
        auto v = random_tensor(rng, Shape{1, 2, 4, 4}, -0.8, 0.8);
        auto bias = random_tensor(rng, Shape{1, 1, 3, 3}, -0.3, 0.3);
        run("windowed_attention", primitive_tol,
            [&] {
                auto y = windowed_attention(q, k, v, bias, 3);
                return sum_all(mul(y, y));
            },
            {{q, {}}, {k, {}}, {v, {}}, {bias, {}}});
    }
    {
        // statistics are constants of the backward pass, so check against a
        // model frozen at the unperturbed estimate
        auto f = random_tensor(rng, Shape{1, 2, 4, 4}, -1.5, 1.5);
        const NaiveModel model =
            estimate_naive_model(f, CovarianceForm::IndependentElliptical);
        run("significance_frozen_model", primitive_tol,
            [&] { return sum_all(significance(f, model, 0).values); }, {{f, {}}});
    }
    {
        // Mahalanobis terms u = 39.9 and u = 40.1 straddle the gamma
        // evaluation branch switch at x = 40 (a = 1, so the large-x expansion
        // is exact there); the derivative must be seamless across it.
        auto f = Tensor::create(Shape{1, 2, 1, 2}, 0.0, true);
        f->at(0, 0, 0, 0) = std::sqrt(39.9);
        f->at(0, 1, 0, 0) = std::sqrt(39.9);
        f->at(0, 0, 0, 1) = std::sqrt(40.1);
        f->at(0, 1, 0, 1) = std::sqrt(40.1);
        const NaiveModel model = NaiveModel::spherical({0.0, 0.0}, 1.0, 16.0);
        run("significance_gamma_branch_straddle", primitive_tol,
            [&] { return sum_all(significance(f, model, 0).values); }, {{f, {}}});
    }
    {
        auto s = random_tensor(rng, Shape{1, 1, 3, 4}, -6.0, 6.0);
        ActivationConfig cfg;
        cfg.alpha = 5e-4;
        cfg.n_test = 4096.0;
        run("sigm_alpha", primitive_tol,
            [&] {
                auto y = sigm_alpha(s, cfg);
                return sum_all(mul(y, y));
            },
            {{s, {}}});
    }
    {
        auto pred = random_tensor(rng, Shape{2, 1, 3, 4}, 0.1, 0.9);
        auto target = Tensor::create(Shape{2, 1, 3, 4}, 0.0, false);
        for (auto& v : target->data) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        run("soft_iou_loss", primitive_tol,
            [&] { return soft_iou_loss(pred, target); }, {{pred, {}}});
    }
    {
        // full training loss through the whole model, statistics frozen;
        // probes one element per parameter family
        NetworkSpec spec;
        spec.levels = 3;
        spec.channels = {6, 8, 10};
        spec.use_spatial = true;
        Network net(spec, derive_seed(seed, 0x6d6f64ULL));
        auto x = random_tensor(rng, Shape{1, 1, 16, 16}, 0.0, 1.0, false);
        auto mask = Tensor::create(Shape{1, 1, 16, 16}, 0.0, false);
        for (auto& v : mask->data) v = rng.bernoulli(0.1) ? 1.0 : 0.0;

        std::vector<NaiveModel> models;
        net.forward(x, true, nullptr, &models);
        auto build = [&]() -> TensorPtr {
            auto out = net.forward(x, true, &models, nullptr);
            auto loss = soft_iou_loss(out.scores, mask);
            return add(loss, scalar_mul(gradient_regularizer(out.scores), 0.05));
        };
        std::vector<FdProbe> probes;
        for (const char* name :
             {"enc0.block1.weight", "enc0.block1.gamma", "enc1.block2.weight",
              "dec0.block.weight", "nfa0.block1.weight", "nfa0.block2.bias",
              "spatial.wq", "spatial.rel_bias", "eca.kernel"}) {
            auto p = net.parameter(name);
            probes.push_back({p, {p->data.size() / 2}});
        }
        run("full_model_composite", composite_tol, build, probes);
    }

    return report;
}

}  // namespace nfaseg
