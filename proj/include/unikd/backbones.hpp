#pragma once

#include <Eigen/Dense>
#include <array>
#include <memory>

#include "unikd/aff.hpp"
#include "unikd/common.hpp"
#include "unikd/nn.hpp"

namespace unikd {

struct StagedForwardOutput {
    std::vector<Tensor> stage_features;  // F_1..F_L
    Eigen::MatrixXd logits;              // B x C

    FeaturePyramid pyramid() const { return FeaturePyramid(stage_features); }
};

struct ArchSpec {
    std::string name;
    std::array<int, 3> widths;
};

inline ArchSpec arch_by_name(const std::string& name) {
    if (name == "resnet_micro") return {name, {8, 16, 32}};
    if (name == "resnet_micro_x2") return {name, {16, 32, 64}};
    if (name == "resnet_tiny") return {name, {16, 32, 64}};
    if (name == "resnet_tiny_x2") return {name, {32, 64, 128}};
    throw FormatError("unknown architecture: " + name);
}

namespace nn {

// conv3x3 -> bn -> relu -> conv3x3 -> bn, plus identity or 1x1-projected
// skip, relu on the sum.
class BasicBlock : public Module {
public:
    BasicBlock(std::string name, int in_ch, int out_ch, int stride)
        : conv1_(name + ".conv1", in_ch, out_ch, 3, stride, 1, false),
          bn1_(name + ".bn1", out_ch),
          conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1, false),
          bn2_(name + ".bn2", out_ch),
          has_proj_(stride != 1 || in_ch != out_ch) {
        if (has_proj_) {
            proj_conv_ = std::make_unique<Conv2d>(name + ".proj", in_ch, out_ch, 1, stride, 0,
                                                  false);
            proj_bn_ = std::make_unique<BatchNorm2d>(name + ".proj_bn", out_ch);
        }
    }

    void init(Rng& rng) {
        conv1_.init(rng);
        conv2_.init(rng);
        if (has_proj_) proj_conv_->init(rng);
    }

    Tensor forward(const Tensor& x) {
        Tensor main = relu1_.forward(bn1_.forward(conv1_.forward(x)));
        main = bn2_.forward(conv2_.forward(main));
        Tensor skip = has_proj_ ? proj_bn_->forward(proj_conv_->forward(x)) : x;
        main.add_(skip);
        return relu2_.forward(main);
    }

    Tensor backward(const Tensor& grad_out) {
        Tensor d_sum = relu2_.backward(grad_out);
        Tensor d_in = conv1_.backward(
            bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(d_sum)))));
        if (has_proj_) {
            d_in.add_(proj_conv_->backward(proj_bn_->backward(d_sum)));
        } else {
            d_in.add_(d_sum);
        }
        return d_in;
    }

    void collect_params(std::vector<Param*>& out) override {
        conv1_.collect_params(out);
        bn1_.collect_params(out);
        conv2_.collect_params(out);
        bn2_.collect_params(out);
        if (has_proj_) {
            proj_conv_->collect_params(out);
            proj_bn_->collect_params(out);
        }
    }
    void collect_buffers(std::vector<Buffer*>& out) override {
        bn1_.collect_buffers(out);
        bn2_.collect_buffers(out);
        if (has_proj_) proj_bn_->collect_buffers(out);
    }
    void set_training(bool training) override {
        Module::set_training(training);
        bn1_.set_training(training);
        bn2_.set_training(training);
        if (has_proj_) proj_bn_->set_training(training);
    }
    void freeze_stats() {
        bn1_.freeze_stats();
        bn2_.freeze_stats();
        if (has_proj_) proj_bn_->freeze_stats();
    }

private:
    Conv2d conv1_;
    BatchNorm2d bn1_;
    Conv2d conv2_;
    BatchNorm2d bn2_;
    ReLU relu1_, relu2_;
    bool has_proj_;
    std::unique_ptr<Conv2d> proj_conv_;
    std::unique_ptr<BatchNorm2d> proj_bn_;
};

}  // namespace nn

// Three-stage residual classification network. Stage outputs F_1..F_3 are the
// feature pyramid; the classifier runs GAP -> linear on F_3.
class ToyResNet : public nn::Module {
public:
    static constexpr int kStages = 3;

    ToyResNet(const ArchSpec& arch, int class_count, int input_hw)
        : arch_(arch), class_count_(class_count), input_hw_(input_hw),
          stem_conv_("backbone.stem.conv", 3, arch.widths[0], 3, 1, 1, false),
          stem_bn_("backbone.stem.bn", arch.widths[0]),
          stage1_("backbone.stage1", arch.widths[0], arch.widths[0], 1),
          stage2_("backbone.stage2", arch.widths[0], arch.widths[1], 2),
          stage3_("backbone.stage3", arch.widths[1], arch.widths[2], 2),
          fc_("backbone.fc", arch.widths[2], class_count) {
        UNIKD_CHECK(input_hw >= 8 && input_hw % 4 == 0,
                    "ToyResNet: input size must be a positive multiple of 4, got ", input_hw);
    }

    void init(Rng& rng) {
        stem_conv_.init(rng);
        stage1_.init(rng);
        stage2_.init(rng);
        stage3_.init(rng);
        fc_.init(rng);
    }

    const ArchSpec& arch() const { return arch_; }
    int class_count() const { return class_count_; }
    int input_hw() const { return input_hw_; }
    bool frozen() const { return frozen_; }

    std::vector<std::vector<int>> pyramid_shapes(int batch) const {
        const int s = input_hw_;
        return {{batch, arch_.widths[0], s, s},
                {batch, arch_.widths[1], s / 2, s / 2},
                {batch, arch_.widths[2], s / 4, s / 4}};
    }

    StagedForwardOutput forward_staged(const Tensor& batch) {
        UNIKD_CHECK(batch.rank() == 4 && batch.dim(1) == 3 && batch.dim(2) == input_hw_ &&
                        batch.dim(3) == input_hw_,
                    "forward_staged: expected (Bx3x", input_hw_, "x", input_hw_, "), got ",
                    Tensor::shape_str(batch.shape()));
        StagedForwardOutput out;
        Tensor x = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(batch)));
        x = stage1_.forward(x);
        out.stage_features.push_back(x);
        x = stage2_.forward(x);
        out.stage_features.push_back(x);
        x = stage3_.forward(x);
        out.stage_features.push_back(x);
        out.logits = fc_.forward(pool_.forward(x));
        return out;
    }

    // d_stages may be empty or hold one gradient tensor per stage (additional
    // consumers of the stage features, e.g. AFF or MSE adapters).
    void backward(const Eigen::MatrixXd& d_logits, const std::vector<Tensor>& d_stages = {}) {
        UNIKD_CHECK(!frozen_, "ToyResNet: backward through a frozen network");
        Tensor d3 = pool_.backward(fc_.backward(d_logits));
        if (!d_stages.empty()) d3.add_(d_stages[2]);
        Tensor d2 = stage3_.backward(d3);
        if (!d_stages.empty()) d2.add_(d_stages[1]);
        Tensor d1 = stage2_.backward(d2);
        if (!d_stages.empty()) d1.add_(d_stages[0]);
        Tensor d0 = stage1_.backward(d1);
        stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(d0)));
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        stem_conv_.collect_params(out);
        stem_bn_.collect_params(out);
        stage1_.collect_params(out);
        stage2_.collect_params(out);
        stage3_.collect_params(out);
        fc_.collect_params(out);
    }
    void collect_buffers(std::vector<nn::Buffer*>& out) override {
        stem_bn_.collect_buffers(out);
        stage1_.collect_buffers(out);
        stage2_.collect_buffers(out);
        stage3_.collect_buffers(out);
    }
    void set_training(bool training) override {
        if (frozen_) training = false;
        Module::set_training(training);
        stem_bn_.set_training(training);
        stage1_.set_training(training);
        stage2_.set_training(training);
        stage3_.set_training(training);
    }

    // Marks every parameter non-trainable and locks normalization layers to
    // inference statistics.
    void freeze() {
        frozen_ = true;
        set_training(false);
        stem_bn_.freeze_stats();
        stage1_.freeze_stats();
        stage2_.freeze_stats();
        stage3_.freeze_stats();
    }

    // FNV-1a over parameter and buffer bytes; guards teacher immutability.
    std::uint64_t checksum() {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const Tensor& t) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
            const size_t n = static_cast<size_t>(t.size()) * sizeof(double);
            for (size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        };
        for (nn::Param* p : params()) mix(p->value);
        for (nn::Buffer* b : buffers()) mix(b->value);
        return h;
    }

private:
    ArchSpec arch_;
    int class_count_, input_hw_;
    bool frozen_ = false;
    nn::Conv2d stem_conv_;
    nn::BatchNorm2d stem_bn_;
    nn::ReLU stem_relu_;
    nn::BasicBlock stage1_, stage2_, stage3_;
    nn::GlobalAvgPool pool_;
    nn::Linear fc_;
};

inline void freeze(ToyResNet& net) { net.freeze(); }

}  // namespace unikd
