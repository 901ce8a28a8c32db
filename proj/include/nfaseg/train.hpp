#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nfaseg/data.hpp"
#include "nfaseg/error.hpp"
#include "nfaseg/eval.hpp"
#include "nfaseg/network.hpp"
#include "nfaseg/ops.hpp"
#include "nfaseg/rng.hpp"

namespace nfaseg {

/// 1 - (sum(p*g)+eps)/(sum(p)+sum(g)-sum(p*g)+eps) over the whole batch,
/// eps = 1e-6. The target must be exactly binary.
inline TensorPtr soft_iou_loss(const TensorPtr& pred, const TensorPtr& target) {
    if (!(pred->shape == target->shape))
        throw_parameter("soft_iou_loss: prediction shape " + pred->shape.str() +
                        " does not match target " + target->shape.str());
    for (double v : target->data)
        if (v != 0.0 && v != 1.0)
            throw_parameter("soft_iou_loss: target is not binary");
    const double eps = 1e-6;
    auto inter = sum_all(mul(pred, target));
    auto uni = sub(add(sum_all(pred), sum_all(target)), inter);
    auto ratio = div(scalar_add(inter, eps), scalar_add(uni, eps));
    return scalar_add(scalar_mul(ratio, -1.0), 1.0);
}

/// Mean absolute spatial gradient of the prediction; penalizing it favors
/// compact blobs over shattered ones.
inline TensorPtr gradient_regularizer(const TensorPtr& pred) {
    return tv_penalty(pred);
}

struct AdagradState {
    double eps = 1e-10;
    std::map<std::string, std::vector<double>> acc;
};

/// acc += g^2; p -= lr * g / (sqrt(acc) + eps), per named parameter.
inline void adagrad_step(std::vector<std::pair<std::string, TensorPtr>>& params,
                         AdagradState& state, double lr) {
    if (lr <= 0.0) throw_parameter("adagrad_step: learning rate must be > 0");
    for (auto& [name, p] : params) {
        p->ensure_grad();
        auto& acc = state.acc[name];
        if (acc.empty()) acc.assign(p->data.size(), 0.0);
        if (acc.size() != p->data.size())
            throw_parameter("adagrad_step: accumulator for '" + name +
                            "' has stale size");
        for (size_t i = 0; i < p->data.size(); ++i) {
            const double g = p->grad[i];
            acc[i] += g * g;
            p->data[i] -= lr * g / (std::sqrt(acc[i]) + state.eps);
        }
    }
}

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T.
inline double cosine_annealing(double lr_max, double lr_min, long t, long period) {
    if (period < 1) throw_parameter("cosine_annealing: period must be >= 1");
    if (t < 0 || t > period)
        throw_parameter("cosine_annealing: step " + std::to_string(t) +
                        " outside [0, " + std::to_string(period) + "]");
    if (lr_min > lr_max) throw_parameter("cosine_annealing: lr_min exceeds lr_max");
    const double phase = 3.14159265358979323846 * static_cast<double>(t) /
                         static_cast<double>(period);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

struct TrainConfig {
    long epochs = 40;
    long batch_size = 4;
    double lr_max = 0.01;
    double lr_min = 0.0;
    double threshold = 0.1;  // validation binarization threshold
    bool augment = true;     // random horizontal/vertical flips only
    unsigned long long seed = 0;

    void validate() const {
        if (epochs < 0) throw_parameter("train config: epochs must be >= 0");
        if (batch_size < 1) throw_parameter("train config: batch size must be >= 1");
        if (lr_max <= 0.0) throw_parameter("train config: lr must be > 0");
        if (lr_min < 0.0 || lr_min > lr_max)
            throw_parameter("train config: lr_min must be in [0, lr_max]");
    }
};

struct EpochLog {
    long epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double val_f1 = 0.0;
    double val_ap = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_f1 = -1.0;
    long best_epoch = -1;

    std::vector<std::string> csv_lines() const {
        std::vector<std::string> lines{"epoch,loss,lr,val_f1,val_ap"};
        char buf[192];
        for (const auto& e : log) {
            std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g", e.epoch,
                          e.loss, e.lr, e.val_f1, e.val_ap);
            lines.push_back(buf);
        }
        return lines;
    }
};

inline void write_training_log(const std::string& path, const TrainResult& result) {
    std::ofstream out(path);
    if (!out) throw_io("cannot open training log for writing: " + path);
    for (const auto& line : result.csv_lines()) out << line << "\n";
    if (!out) throw_io("failed writing training log: " + path);
}

namespace detail {

inline TensorPtr flip_hw(const TensorPtr& t, bool flip_h, bool flip_v) {
    if (!flip_h && !flip_v) return t;
    const auto [n, c, h, w] = t->shape;
    auto out = Tensor::create(t->shape, 0.0, false);
    for (long in = 0; in < n; ++in)
        for (long ic = 0; ic < c; ++ic)
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x) {
                    const long sy = flip_v ? h - 1 - y : y;
                    const long sx = flip_h ? w - 1 - x : x;
                    out->at(in, ic, y, x) = t->at(in, ic, sy, sx);
                }
    return out;
}

/// Stacks per-image (1,1,h,w) tensors into one (B,1,h,w) batch.
inline TensorPtr stack_batch(const std::vector<TensorPtr>& items) {
    const auto [n1, c, h, w] = items[0]->shape;
    auto out = Tensor::create(Shape{static_cast<long>(items.size()), c, h, w}, 0.0,
                              false);
    const size_t per = static_cast<size_t>(c) * h * w;
    for (size_t i = 0; i < items.size(); ++i) {
        if (!(items[i]->shape == items[0]->shape))
            throw_parameter("stack_batch: images in a batch must share dims");
        std::copy(items[i]->data.begin(), items[i]->data.end(),
                  out->data.begin() + static_cast<long>(i * per));
    }
    return out;
}

inline std::string parameter_norms(const Network& net) {
    std::string out;
    for (const auto& [name, p] : net.parameters()) {
        double sq = 0.0;
        for (double v : p->data) sq += v * v;
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s%s=%.6g", out.empty() ? "" : ", ",
                      name.c_str(), std::sqrt(sq));
        out += buf;
    }
    return out;
}

struct ModelSnapshot {
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> bn_mean, bn_var;

    static ModelSnapshot capture(Network& net) {
        ModelSnapshot snap;
        for (const auto& [name, p] : net.parameters()) snap.params.push_back(p->data);
        for (const auto& [name, bn] : net.bn_states()) {
            snap.bn_mean.push_back(bn->running_mean);
            snap.bn_var.push_back(bn->running_var);
        }
        return snap;
    }

    void restore(Network& net) const {
        auto& params = net.parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i].second->data = this->params[i];
        auto bns = net.bn_states();
        for (size_t i = 0; i < bns.size(); ++i) {
            bns[i].second->running_mean = bn_mean[i];
            bns[i].second->running_var = bn_var[i];
        }
    }
};

}  // namespace detail

/// Validation metrics of the current network on a held-out set (eval mode).
inline std::pair<double, double> validate(Network& net,
                                          const std::vector<Sample>& val_set,
                                          double threshold) {
    if (val_set.empty()) return {0.0, 0.0};
    std::vector<TensorPtr> scores, masks;
    for (const auto& s : val_set) {
        scores.push_back(net.forward(s.image, false).scores);
        masks.push_back(s.mask);
    }
    const auto object = object_metrics(scores, masks, threshold);
    return {object.f1, object_average_precision(scores, masks)};
}

/// Full training loop: cosine-annealed Adagrad on soft-IoU plus the weighted
/// gradient regularizer, flip-only augmentation, per-epoch validation, and
/// best-on-validation (object F1) parameter retention. Deterministic in
/// (network init, config seed, dataset order).
inline TrainResult train(Network& net, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const TrainConfig& cfg,
                         AdagradState& opt) {
    cfg.validate();
    if (train_set.empty()) throw_parameter("train: empty training set");
    const double reg_weight = net.spec().reg_weight;
    Rng rng(derive_seed(cfg.seed, 0x7261696eULL));

    TrainResult result;
    detail::ModelSnapshot best;
    bool have_best = false;

    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr =
            cosine_annealing(cfg.lr_max, cfg.lr_min, epoch, std::max(1L, cfg.epochs));

        // Fisher-Yates driven by the run rng
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.below(i));
            std::swap(order[i - 1], order[j]);
        }

        double loss_sum = 0.0;
        long batches = 0;
        for (size_t at = 0; at < order.size(); at += cfg.batch_size, ++batches) {
            const size_t end = std::min(order.size(), at + cfg.batch_size);
            std::vector<TensorPtr> images, masks;
            for (size_t i = at; i < end; ++i) {
                const bool fh = cfg.augment && rng.bernoulli(0.5);
                const bool fv = cfg.augment && rng.bernoulli(0.5);
                images.push_back(detail::flip_hw(train_set[order[i]].image, fh, fv));
                masks.push_back(detail::flip_hw(train_set[order[i]].mask, fh, fv));
            }
            auto x = detail::stack_batch(images);
            auto y = detail::stack_batch(masks);

            auto out = net.forward(x, true);
            auto loss = soft_iou_loss(out.scores, y);
            if (reg_weight > 0.0)
                loss = add(loss, scalar_mul(gradient_regularizer(out.scores), reg_weight));

            const double loss_value = loss->data[0];
            if (!std::isfinite(loss_value))
                throw_numerical("training aborted: non-finite loss at epoch " +
                                std::to_string(epoch) + " batch " +
                                std::to_string(batches) + "; parameter norms: " +
                                detail::parameter_norms(net));

            for (auto& [name, p] : net.parameters()) p->zero_grad();
            backward(loss);
            adagrad_step(net.parameters(), opt, lr);
            loss_sum += loss_value;
        }

        const auto [val_f1, val_ap] = validate(net, val_set, cfg.threshold);
        result.log.push_back(
            {epoch, loss_sum / static_cast<double>(batches), lr, val_f1, val_ap});

        if (!val_set.empty() && val_f1 > result.best_val_f1) {
            result.best_val_f1 = val_f1;
            result.best_epoch = epoch;
            best = detail::ModelSnapshot::capture(net);
            have_best = true;
        }
    }

    if (have_best) best.restore(net);
    return result;
}

}  // namespace nfaseg
