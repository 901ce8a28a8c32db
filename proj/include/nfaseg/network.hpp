#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nfaseg/error.hpp"
#include "nfaseg/nfa.hpp"
#include "nfaseg/ops.hpp"
#include "nfaseg/rng.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

enum class HeadKind { Nfa, Plain };

struct NetworkSpec {
    long levels = 3;
    std::vector<long> channels = {8, 16, 32};
    long in_channels = 1;
    HeadKind head = HeadKind::Nfa;
    CovarianceForm form = CovarianceForm::IndependentElliptical;
    bool multiscale = true;  // false: NFA head scores only the finest scale
    bool use_eca = true;
    bool use_spatial = false;
    ReduceMode reduce = ReduceMode::Max;
    double alpha = 5e-4;
    double reg_weight = 0.05;
    long nfa_width = 2;  // channel width inside the NFA head blocks
    long window = 7;     // spatial block attention window

    void validate() const {
        if (levels < 1)
            throw_parameter("network spec: levels must be >= 1, got " +
                            std::to_string(levels));
        if (static_cast<long>(channels.size()) != levels)
            throw_parameter("network spec: channels list has " +
                            std::to_string(channels.size()) + " entries for " +
                            std::to_string(levels) + " levels");
        for (long c : channels)
            if (c < 1) throw_parameter("network spec: channel counts must be >= 1");
        if (in_channels < 1)
            throw_parameter("network spec: in_channels must be >= 1");
        if (alpha <= 0.0) throw_parameter("network spec: alpha must be > 0");
        if (reg_weight < 0.0)
            throw_parameter("network spec: regularizer weight must be >= 0");
        if (nfa_width < 1) throw_parameter("network spec: nfa_width must be >= 1");
        if (window < 1 || window % 2 == 0)
            throw_parameter("network spec: attention window must be odd and >= 1, got " +
                            std::to_string(window));
    }
};

struct ForwardResult {
    TensorPtr scores;                   // (n, 1, h, w), in [0, 1)
    std::vector<SignificanceMap> maps;  // per-scale, finest first; empty for plain head
    SignificanceMap fused;              // fused full-resolution map (NFA head only)
};

/// U-shaped trunk: per level two conv blocks then maxpool on the way down,
/// bilinear upsample + skip concat + one conv block on the way up. The NFA
/// head scores every decoder scale, upsamples the significance maps to full
/// resolution, optionally reweights them (ECA), fuses and squashes them;
/// the plain head is a 1x1 convolution and sigmoid on the finest features.
class Network {
  public:
    Network(NetworkSpec spec, unsigned long long seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(seed);
        long c_in = spec_.in_channels;
        for (long l = 0; l < spec_.levels; ++l) {
            const long c = spec_.channels[l];
            enc_.emplace_back();
            enc_.back().block1 = make_block("enc" + std::to_string(l) + ".block1", c_in, c, rng);
            enc_.back().block2 = make_block("enc" + std::to_string(l) + ".block2", c, c, rng);
            c_in = c;
        }
        for (long l = spec_.levels - 2; l >= 0; --l) {
            // decoder level l consumes upsampled level-(l+1) features plus the
            // level-l skip and emits channels[l]
            const long c_up = spec_.channels[l + 1];
            const long c_skip = spec_.channels[l];
            dec_.push_back(
                make_block("dec" + std::to_string(l) + ".block", c_up + c_skip,
                           spec_.channels[l], rng));
        }
        if (spec_.head == HeadKind::Nfa) {
            const long scored = spec_.multiscale ? spec_.levels : 1;
            for (long s = 0; s < scored; ++s) {
                const long c = scale_channels_in(s);
                BasicNfaParams p;
                p.block1 = make_block("nfa" + std::to_string(s) + ".block1", c,
                                      spec_.nfa_width, rng);
                p.block2 = make_block("nfa" + std::to_string(s) + ".block2",
                                      spec_.nfa_width, spec_.nfa_width, rng);
                nfa_.push_back(std::move(p));
            }
            if (spec_.use_spatial) {
                spatial_.block =
                    make_block("spatial.block", spec_.channels[0], spec_.nfa_width, rng);
                spatial_.wq = make_conv_weight("spatial.wq", spec_.nfa_width,
                                               spec_.nfa_width, 1, rng);
                spatial_.wk = make_conv_weight("spatial.wk", spec_.nfa_width,
                                               spec_.nfa_width, 1, rng);
                spatial_.wv = make_conv_weight("spatial.wv", spec_.nfa_width,
                                               spec_.nfa_width, 1, rng);
                spatial_.window = spec_.window;
                spatial_.rel_bias = register_param(
                    "spatial.rel_bias",
                    Tensor::create(Shape{1, 1, spec_.window, spec_.window}, 0.0, true));
            }
            if (spec_.use_eca) {
                eca_kernel_ = Tensor::create(Shape{1, 1, 1, 3}, 0.0, true);
                for (auto& v : eca_kernel_->data) v = 0.5 * rng.normal();
                register_param("eca.kernel", eca_kernel_);
            }
        } else {
            head_w_ = make_conv_weight("head.weight", spec_.channels[0], 1, 1, rng);
            head_b_ = register_param("head.bias",
                                     Tensor::create(Shape{1, 1, 1, 1}, 0.0, true));
        }
    }

    const NetworkSpec& spec() const { return spec_; }

    /// Named learnable parameters in registration order.
    std::vector<std::pair<std::string, TensorPtr>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, TensorPtr>>& parameters() const {
        return params_;
    }

    TensorPtr parameter(const std::string& name) const {
        for (const auto& [n, t] : params_)
            if (n == name) return t;
        throw_parameter("network has no parameter named '" + name + "'");
    }

    /// Batch-norm running statistics, named for checkpointing.
    std::vector<std::pair<std::string, BatchNormState*>> bn_states() {
        std::vector<std::pair<std::string, BatchNormState*>> out;
        for (long l = 0; l < spec_.levels; ++l) {
            out.push_back({"enc" + std::to_string(l) + ".block1", &enc_[l].block1.bn});
            out.push_back({"enc" + std::to_string(l) + ".block2", &enc_[l].block2.bn});
        }
        for (size_t i = 0; i < dec_.size(); ++i) {
            const long l = spec_.levels - 2 - static_cast<long>(i);
            out.push_back({"dec" + std::to_string(l) + ".block", &dec_[i].bn});
        }
        for (size_t s = 0; s < nfa_.size(); ++s) {
            out.push_back({"nfa" + std::to_string(s) + ".block1", &nfa_[s].block1.bn});
            out.push_back({"nfa" + std::to_string(s) + ".block2", &nfa_[s].block2.bn});
        }
        if (spec_.use_spatial && spec_.head == HeadKind::Nfa)
            out.push_back({"spatial.block", &spatial_.block.bn});
        return out;
    }

    long param_count() const {
        long total = 0;
        for (const auto& [n, t] : params_) total += t->shape.numel();
        return total;
    }

    long trunk_param_count() const {
        long total = 0;
        for (const auto& [n, t] : params_)
            if (n.rfind("enc", 0) == 0 || n.rfind("dec", 0) == 0)
                total += t->shape.numel();
        return total;
    }

    long head_param_count() const { return param_count() - trunk_param_count(); }

    /// Full forward pass. `frozen` substitutes previously estimated naive
    /// models (finest scale first, spatial block's model last); `estimated`
    /// collects the models actually used, in the same order.
    ForwardResult forward(const TensorPtr& image, bool training,
                          const std::vector<NaiveModel>* frozen = nullptr,
                          std::vector<NaiveModel>* estimated = nullptr) {
        const auto [n, c, h, w] = image->shape;
        if (c != spec_.in_channels)
            throw_parameter("forward: image has " + std::to_string(c) +
                            " channels, network expects " +
                            std::to_string(spec_.in_channels));
        const long div = 1L << (spec_.levels - 1);
        if (h % div != 0 || w % div != 0)
            throw_parameter("forward: input " + std::to_string(h) + "x" +
                            std::to_string(w) + " must have height and width divisible by " +
                            std::to_string(div) + " (levels=" + std::to_string(spec_.levels) +
                            " requires multiples of 2^(levels-1))");

        // encoder
        std::vector<TensorPtr> skips;
        TensorPtr x = image;
        for (long l = 0; l < spec_.levels; ++l) {
            x = conv_block(x, enc_[l].block1, training);
            x = conv_block(x, enc_[l].block2, training);
            skips.push_back(x);
            if (l + 1 < spec_.levels) x = maxpool2x2(x);
        }

        // decoder; scale_features[s] holds the features whose maps live at
        // 1/2^s of the input resolution
        std::vector<TensorPtr> scale_features(static_cast<size_t>(spec_.levels));
        scale_features[spec_.levels - 1] = skips.back();
        for (size_t i = 0; i < dec_.size(); ++i) {
            const long l = spec_.levels - 2 - static_cast<long>(i);
            auto up = bilinear_upsample(scale_features[l + 1], 2);
            auto cat = concat_channels({up, skips[l]});
            scale_features[l] = conv_block(cat, dec_[i], training);
        }

        ForwardResult result;
        if (spec_.head == HeadKind::Plain) {
            auto logits = conv2d(scale_features[0], head_w_, head_b_);
            result.scores = sigmoid(logits);
            return result;
        }

        size_t model_idx = 0;
        auto next_model = [&](const TensorPtr& feats) {
            if (frozen) {
                if (model_idx >= frozen->size())
                    throw_parameter("forward: not enough frozen naive models");
                return (*frozen)[model_idx++];
            }
            ++model_idx;
            return estimate_naive_model(feats, spec_.form);
        };

        std::vector<SignificanceMap> maps;
        const long scored = static_cast<long>(nfa_.size());
        for (long s = 0; s < scored; ++s) {
            auto feats = scale_features[s];
            auto y = conv_block(feats, nfa_[s].block1, training);
            y = conv_block(y, nfa_[s].block2, training);
            const NaiveModel model = next_model(y);
            if (estimated) estimated->push_back(model);
            auto sig = significance(y, model, s);
            if (s > 0) {
                auto up = bilinear_upsample(sig.values, 1L << s);
                sig = SignificanceMap{up, sig.scale_index, sig.n_test};
            }
            maps.push_back(sig);
        }
        if (spec_.use_spatial) {
            auto y = conv_block(scale_features[0], spatial_.block, training);
            auto q = conv2d(y, spatial_.wq, nullptr);
            auto k = conv2d(y, spatial_.wk, nullptr);
            auto v = conv2d(y, spatial_.wv, nullptr);
            auto att = windowed_attention(q, k, v, spatial_.rel_bias, spatial_.window);
            const NaiveModel model = next_model(att);
            if (estimated) estimated->push_back(model);
            maps.push_back(significance(att, model, 0));
        }

        TensorPtr weights = nullptr;
        if (spec_.use_eca) weights = eca_scale_weights(maps, eca_kernel_);
        result.fused = fuse_scales(maps, weights, spec_.reduce);
        result.maps = std::move(maps);
        result.scores =
            sigm_alpha(result.fused.values, ActivationConfig{spec_.alpha, result.fused.n_test});
        return result;
    }

  private:
    struct EncoderLevel {
        ConvBlockParams block1;
        ConvBlockParams block2;
    };

    long scale_channels_in(long s) const { return spec_.channels[s]; }

    TensorPtr register_param(const std::string& name, TensorPtr t) {
        params_.push_back({name, t});
        return t;
    }

    TensorPtr make_conv_weight(const std::string& name, long c_in, long c_out, long k,
                               Rng& rng) {
        auto w = Tensor::create(Shape{c_out, c_in, k, k}, 0.0, true);
        const double std_dev = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
        for (auto& v : w->data) v = std_dev * rng.normal();
        return register_param(name, w);
    }

    ConvBlockParams make_block(const std::string& prefix, long c_in, long c_out,
                               Rng& rng) {
        ConvBlockParams p;
        p.weight = make_conv_weight(prefix + ".weight", c_in, c_out, 3, rng);
        p.bias =
            register_param(prefix + ".bias", Tensor::create(Shape{1, c_out, 1, 1}, 0.0, true));
        p.gamma = register_param(prefix + ".gamma",
                                 Tensor::create(Shape{1, c_out, 1, 1}, 1.0, true));
        p.beta = register_param(prefix + ".beta",
                                Tensor::create(Shape{1, c_out, 1, 1}, 0.0, true));
        p.bn = BatchNormState(c_out);
        return p;
    }

    NetworkSpec spec_;
    std::vector<std::pair<std::string, TensorPtr>> params_;
    std::vector<EncoderLevel> enc_;
    std::vector<ConvBlockParams> dec_;
    std::vector<BasicNfaParams> nfa_;
    SpatialNfaParams spatial_;
    TensorPtr eca_kernel_;
    TensorPtr head_w_, head_b_;
};

}  // namespace nfaseg
