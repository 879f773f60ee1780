#pragma once

#include <vector>

#include "unikd/common.hpp"
#include "unikd/nn.hpp"
#include "unikd/tensor.hpp"

namespace unikd {

// Ordered stage features F_1..F_L, finest first.
struct FeaturePyramid {
    std::vector<Tensor> stages;

    explicit FeaturePyramid(std::vector<Tensor> s) : stages(std::move(s)) {
        UNIKD_CHECK(stages.size() >= 2, "FeaturePyramid: need at least 2 stages");
        for (size_t i = 0; i < stages.size(); ++i) {
            UNIKD_CHECK(stages[i].rank() == 4, "FeaturePyramid: stage ", i, " must be 4-d");
            UNIKD_CHECK(stages[i].dim(0) == stages[0].dim(0),
                        "FeaturePyramid: batch mismatch at stage ", i);
            if (i > 0) {
                UNIKD_CHECK(stages[i].dim(2) <= stages[i - 1].dim(2) &&
                                stages[i].dim(3) <= stages[i - 1].dim(3),
                            "FeaturePyramid: spatial resolution must be non-increasing (stage ",
                            i, ")");
            }
        }
    }

    int levels() const { return static_cast<int>(stages.size()); }
};

struct FusedRepresentation {
    Tensor feature;
    Tensor gate;  // entries strictly in (0,1), same shape as feature
};

// Test hook: force the gate to one of its saturation limits.
enum class GateOverride { none, all_ones, all_zeros };

// One gated fusion step: out = g * E(shallow) + (1-g) * Up(deep), with
// g = sigmoid(conv3x3(E(shallow) ++ Up(deep))).
class FusePair : public nn::Module {
public:
    FusePair(std::string name, int shallow_ch, int deep_ch)
        : shallow_ch_(shallow_ch), deep_ch_(deep_ch),
          expander_(name + ".expander", shallow_ch, deep_ch, 1),
          gate_conv_(name + ".gate", 2 * deep_ch, deep_ch, 3, 1, 1) {}

    void init(Rng& rng) {
        expander_.init(rng);
        gate_conv_.init(rng);
        // zero gate bias keeps the initial gate near 0.5
        gate_conv_.bias().value.zero();
    }

    void set_gate_override(GateOverride o) { override_ = o; }

    FusedRepresentation forward(const Tensor& shallow, const Tensor& deep) {
        UNIKD_CHECK(shallow.rank() == 4 && deep.rank() == 4, "fuse_pair: 4-d tensors expected");
        UNIKD_CHECK(shallow.dim(0) == deep.dim(0), "fuse_pair: batch mismatch");
        UNIKD_CHECK(shallow.dim(1) == shallow_ch_ && deep.dim(1) == deep_ch_,
                    "fuse_pair: channel mismatch, got ", Tensor::shape_str(shallow.shape()),
                    " and ", Tensor::shape_str(deep.shape()));
        UNIKD_CHECK(shallow.dim(2) >= deep.dim(2) && shallow.dim(3) >= deep.dim(3),
                    "fuse_pair: shallow input must have the finer resolution");
        expanded_ = expander_.forward(shallow);
        upsampled_ = up_.forward(deep, shallow.dim(2), shallow.dim(3));

        const int b = shallow.dim(0), h = shallow.dim(2), w = shallow.dim(3);
        Tensor cat({b, 2 * deep_ch_, h, w});
        for (int n = 0; n < b; ++n)
            for (int c = 0; c < deep_ch_; ++c)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        cat.at(n, c, i, j) = expanded_.at(n, c, i, j);
                        cat.at(n, deep_ch_ + c, i, j) = upsampled_.at(n, c, i, j);
                    }
        FusedRepresentation out;
        if (override_ == GateOverride::none) {
            out.gate = sigmoid_.forward(gate_conv_.forward(cat));
        } else {
            out.gate = Tensor(expanded_.shape(),
                              override_ == GateOverride::all_ones ? 1.0 : 0.0);
        }
        gate_ = out.gate;
        out.feature = Tensor(expanded_.shape());
        for (std::int64_t i = 0; i < out.feature.size(); ++i) {
            out.feature[i] =
                gate_[i] * expanded_[i] + (1.0 - gate_[i]) * upsampled_[i];
        }
        return out;
    }

    // Returns (d_shallow, d_deep); accumulates parameter gradients.
    std::pair<Tensor, Tensor> backward(const Tensor& grad_out) {
        Tensor d_expanded(expanded_.shape());
        Tensor d_upsampled(upsampled_.shape());
        Tensor d_gate(gate_.shape());
        for (std::int64_t i = 0; i < grad_out.size(); ++i) {
            d_expanded[i] = grad_out[i] * gate_[i];
            d_upsampled[i] = grad_out[i] * (1.0 - gate_[i]);
            d_gate[i] = grad_out[i] * (expanded_[i] - upsampled_[i]);
        }
        if (override_ == GateOverride::none) {
            Tensor d_cat = gate_conv_.backward(sigmoid_.backward(d_gate));
            const int b = d_cat.dim(0), h = d_cat.dim(2), w = d_cat.dim(3);
            for (int n = 0; n < b; ++n)
                for (int c = 0; c < deep_ch_; ++c)
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j) {
                            d_expanded.at(n, c, i, j) += d_cat.at(n, c, i, j);
                            d_upsampled.at(n, c, i, j) += d_cat.at(n, deep_ch_ + c, i, j);
                        }
        }
        Tensor d_shallow = expander_.backward(d_expanded);
        Tensor d_deep = up_.backward(d_upsampled);
        return {std::move(d_shallow), std::move(d_deep)};
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        expander_.collect_params(out);
        gate_conv_.collect_params(out);
    }

private:
    int shallow_ch_, deep_ch_;
    nn::Conv2d expander_, gate_conv_;
    nn::UpsampleNearest up_;
    nn::Sigmoid sigmoid_;
    GateOverride override_ = GateOverride::none;
    Tensor expanded_, upsampled_, gate_;
};

// Top-down cascade over a pyramid: R <- F_L, then R <- fuse(F_i, R) for
// i = L-1 .. 1. Output carries C_L channels at the finest resolution.
class AffStack : public nn::Module {
public:
    // channels: per-stage channel counts C_1..C_L. fuse_channels overrides
    // the fusion width (default C_L); when it differs, a 1x1 expander maps
    // F_L before the cascade so stacks over different backbones can share
    // one FDP head.
    AffStack(std::string name, std::vector<int> channels, int fuse_channels = 0)
        : channels_(std::move(channels)),
          fuse_channels_(fuse_channels > 0 ? fuse_channels : channels_.back()) {
        UNIKD_CHECK(channels_.size() >= 2, "AffStack: need at least 2 levels");
        if (fuse_channels_ != channels_.back()) {
            top_expander_ = std::make_unique<nn::Conv2d>(name + ".top_expander",
                                                         channels_.back(), fuse_channels_, 1);
        }
        for (int i = static_cast<int>(channels_.size()) - 2; i >= 0; --i) {
            pairs_.push_back(std::make_unique<FusePair>(
                name + ".level" + std::to_string(i), channels_[static_cast<size_t>(i)],
                fuse_channels_));
        }
    }

    int fuse_channels() const { return fuse_channels_; }

    void init(Rng& rng) {
        if (top_expander_) top_expander_->init(rng);
        for (auto& p : pairs_) p->init(rng);
    }

    void set_gate_override(GateOverride o) {
        for (auto& p : pairs_) p->set_gate_override(o);
    }

    FusedRepresentation forward(const FeaturePyramid& p) {
        UNIKD_CHECK(p.levels() == static_cast<int>(channels_.size()),
                    "AffStack: pyramid has ", p.levels(), " levels, expected ", channels_.size());
        FusedRepresentation running;
        running.feature = top_expander_ ? top_expander_->forward(p.stages.back())
                                        : p.stages.back();
        size_t pair_idx = 0;
        for (int i = p.levels() - 2; i >= 0; --i, ++pair_idx) {
            try {
                running = pairs_[pair_idx]->forward(p.stages[static_cast<size_t>(i)],
                                                    running.feature);
            } catch (const ContractError& e) {
                throw ContractError(detail::concat("fuse_pyramid at level ", i, ": ", e.what()));
            }
        }
        return running;
    }

    // Gradients w.r.t. each pyramid stage, finest first.
    std::vector<Tensor> backward(const Tensor& grad_out) {
        std::vector<Tensor> grads(channels_.size());
        Tensor running = grad_out;
        // walk the cascade in reverse: last-applied pair first
        for (int pi = static_cast<int>(pairs_.size()) - 1; pi >= 0; --pi) {
            const int stage = static_cast<int>(pairs_.size()) - 1 - pi;
            auto [d_shallow, d_deep] = pairs_[static_cast<size_t>(pi)]->backward(running);
            grads[static_cast<size_t>(stage)] = std::move(d_shallow);
            running = std::move(d_deep);
        }
        grads.back() = top_expander_ ? top_expander_->backward(running) : std::move(running);
        return grads;
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        if (top_expander_) top_expander_->collect_params(out);
        for (auto& p : pairs_) p->collect_params(out);
    }

private:
    std::vector<int> channels_;
    int fuse_channels_;
    std::unique_ptr<nn::Conv2d> top_expander_;
    std::vector<std::unique_ptr<FusePair>> pairs_;
};

}  // namespace unikd
