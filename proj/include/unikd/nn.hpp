#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "unikd/common.hpp"
#include "unikd/tensor.hpp"

namespace unikd::nn {

// A learnable tensor with its gradient accumulator.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(shape) {}
};

// Named non-learnable state (batch-norm running statistics).
struct Buffer {
    std::string name;
    Tensor value;
};

class Module {
public:
    virtual ~Module() = default;
    virtual void collect_params(std::vector<Param*>& out) = 0;
    virtual void collect_buffers(std::vector<Buffer*>& out) {}
    virtual void set_training(bool training) { training_ = training; }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        collect_params(out);
        return out;
    }
    std::vector<Buffer*> buffers() {
        std::vector<Buffer*> out;
        collect_buffers(out);
        return out;
    }
    void zero_grad() {
        for (Param* p : params()) p->grad.zero();
    }
    bool training() const { return training_; }

protected:
    bool training_ = true;
};

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// 2-d convolution, stride/padding, im2col + gemm.
class Conv2d : public Module {
public:
    Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride = 1, int pad = 0,
           bool bias = true)
        : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), pad_(pad),
          has_bias_(bias),
          weight_(name + ".weight", {out_ch, in_ch * ksize * ksize}),
          bias_(name + ".bias", {bias ? out_ch : 0}) {}

    void init(Rng& rng) {
        const int fan_in = in_ch_ * ksize_ * ksize_;
        const double bound = std::sqrt(1.0 / fan_in);
        for (std::int64_t i = 0; i < weight_.value.size(); ++i) {
            weight_.value[i] = rng.uniform(-bound, bound);
        }
        bias_.value.zero();
    }

    Tensor forward(const Tensor& x) {
        UNIKD_CHECK(x.rank() == 4 && x.dim(1) == in_ch_,
                    "Conv2d: expected ", in_ch_, " input channels, got ",
                    Tensor::shape_str(x.shape()));
        input_ = x;
        const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = (h + 2 * pad_ - ksize_) / stride_ + 1;
        const int wo = (w + 2 * pad_ - ksize_) / stride_ + 1;
        UNIKD_CHECK(ho >= 1 && wo >= 1, "Conv2d: input too small");
        cols_ = im2col(x, ho, wo);
        ConstMatMap wm(weight_.value.data(), out_ch_, in_ch_ * ksize_ * ksize_);
        Eigen::MatrixXd out_mat = wm * cols_;  // out_ch x (b*ho*wo)
        Tensor out({b, out_ch_, ho, wo});
        scatter_out(out_mat, out);
        if (has_bias_) {
            for (int n = 0; n < b; ++n)
                for (int c = 0; c < out_ch_; ++c)
                    for (int i = 0; i < ho; ++i)
                        for (int j = 0; j < wo; ++j) out.at(n, c, i, j) += bias_.value[c];
        }
        return out;
    }

    Tensor backward(const Tensor& grad_out) {
        const int b = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
        const int ho = grad_out.dim(2), wo = grad_out.dim(3);
        Eigen::MatrixXd go_mat(out_ch_, static_cast<Eigen::Index>(b) * ho * wo);
        gather_out(grad_out, go_mat);
        MatMap gw(weight_.grad.data(), out_ch_, in_ch_ * ksize_ * ksize_);
        gw += go_mat * cols_.transpose();
        if (has_bias_) {
            Eigen::VectorXd gb = go_mat.rowwise().sum();
            for (int c = 0; c < out_ch_; ++c) bias_.grad[c] += gb[c];
        }
        ConstMatMap wm(weight_.value.data(), out_ch_, in_ch_ * ksize_ * ksize_);
        Eigen::MatrixXd gcols = wm.transpose() * go_mat;
        Tensor grad_in({b, in_ch_, h, w});
        col2im(gcols, grad_in, ho, wo);
        return grad_in;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    Eigen::MatrixXd im2col(const Tensor& x, int ho, int wo) const {
        const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
        Eigen::MatrixXd cols(in_ch_ * ksize_ * ksize_,
                             static_cast<Eigen::Index>(b) * ho * wo);
        cols.setZero();
        for (int n = 0; n < b; ++n) {
            for (int c = 0; c < in_ch_; ++c) {
                for (int ki = 0; ki < ksize_; ++ki) {
                    for (int kj = 0; kj < ksize_; ++kj) {
                        const int row = (c * ksize_ + ki) * ksize_ + kj;
                        for (int i = 0; i < ho; ++i) {
                            const int src_i = i * stride_ + ki - pad_;
                            if (src_i < 0 || src_i >= h) continue;
                            for (int j = 0; j < wo; ++j) {
                                const int src_j = j * stride_ + kj - pad_;
                                if (src_j < 0 || src_j >= w) continue;
                                cols(row, (static_cast<Eigen::Index>(n) * ho + i) * wo + j) =
                                    x.at(n, c, src_i, src_j);
                            }
                        }
                    }
                }
            }
        }
        return cols;
    }

    void col2im(const Eigen::MatrixXd& gcols, Tensor& grad_in, int ho, int wo) const {
        const int b = grad_in.dim(0), h = grad_in.dim(2), w = grad_in.dim(3);
        for (int n = 0; n < b; ++n) {
            for (int c = 0; c < in_ch_; ++c) {
                for (int ki = 0; ki < ksize_; ++ki) {
                    for (int kj = 0; kj < ksize_; ++kj) {
                        const int row = (c * ksize_ + ki) * ksize_ + kj;
                        for (int i = 0; i < ho; ++i) {
                            const int src_i = i * stride_ + ki - pad_;
                            if (src_i < 0 || src_i >= h) continue;
                            for (int j = 0; j < wo; ++j) {
                                const int src_j = j * stride_ + kj - pad_;
                                if (src_j < 0 || src_j >= w) continue;
                                grad_in.at(n, c, src_i, src_j) +=
                                    gcols(row, (static_cast<Eigen::Index>(n) * ho + i) * wo + j);
                            }
                        }
                    }
                }
            }
        }
    }

    void scatter_out(const Eigen::MatrixXd& out_mat, Tensor& out) const {
        const int b = out.dim(0), ho = out.dim(2), wo = out.dim(3);
        for (int n = 0; n < b; ++n)
            for (int c = 0; c < out_ch_; ++c)
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j)
                        out.at(n, c, i, j) =
                            out_mat(c, (static_cast<Eigen::Index>(n) * ho + i) * wo + j);
    }

    void gather_out(const Tensor& grad_out, Eigen::MatrixXd& go_mat) const {
        const int b = grad_out.dim(0), ho = grad_out.dim(2), wo = grad_out.dim(3);
        for (int n = 0; n < b; ++n)
            for (int c = 0; c < out_ch_; ++c)
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j)
                        go_mat(c, (static_cast<Eigen::Index>(n) * ho + i) * wo + j) =
                            grad_out.at(n, c, i, j);
    }

    int in_ch_, out_ch_, ksize_, stride_, pad_;
    bool has_bias_;
    Param weight_, bias_;
    Tensor input_;
    Eigen::MatrixXd cols_;
};

// Per-channel batch normalization over (N, H, W).
class BatchNorm2d : public Module {
public:
    BatchNorm2d(std::string name, int channels, double eps = 1e-5, double momentum = 0.1)
        : ch_(channels), eps_(eps), momentum_(momentum),
          gamma_(name + ".gamma", {channels}), beta_(name + ".beta", {channels}),
          running_mean_{name + ".running_mean", Tensor({channels})},
          running_var_{name + ".running_var", Tensor({channels}, 1.0)} {
        gamma_.value.fill(1.0);
    }

    // Locks the layer to inference statistics regardless of training mode.
    void freeze_stats() { frozen_ = true; }

    Tensor forward(const Tensor& x) {
        UNIKD_CHECK(x.rank() == 4 && x.dim(1) == ch_, "BatchNorm2d: channel mismatch");
        input_ = x;
        const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
        const double count = static_cast<double>(b) * h * w;
        const bool use_batch = training_ && !frozen_;
        mean_.resize(ch_);
        var_.resize(ch_);
        if (use_batch) {
            for (int c = 0; c < ch_; ++c) {
                double s = 0.0, s2 = 0.0;
                for (int n = 0; n < b; ++n)
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j) {
                            const double v = x.at(n, c, i, j);
                            s += v;
                            s2 += v * v;
                        }
                mean_[c] = s / count;
                var_[c] = std::max(0.0, s2 / count - mean_[c] * mean_[c]);
                running_mean_.value[c] =
                    (1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean_[c];
                // unbiased running variance, matching the usual convention
                const double unbiased = count > 1.0 ? var_[c] * count / (count - 1.0) : var_[c];
                running_var_.value[c] =
                    (1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased;
            }
        } else {
            for (int c = 0; c < ch_; ++c) {
                mean_[c] = running_mean_.value[c];
                var_[c] = running_var_.value[c];
            }
        }
        used_batch_stats_ = use_batch;
        xhat_ = Tensor(x.shape());
        Tensor out(x.shape());
        for (int c = 0; c < ch_; ++c) {
            const double inv_std = 1.0 / std::sqrt(var_[c] + eps_);
            for (int n = 0; n < b; ++n)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double xh = (x.at(n, c, i, j) - mean_[c]) * inv_std;
                        xhat_.at(n, c, i, j) = xh;
                        out.at(n, c, i, j) = gamma_.value[c] * xh + beta_.value[c];
                    }
        }
        return out;
    }

    Tensor backward(const Tensor& grad_out) {
        const int b = grad_out.dim(0), h = grad_out.dim(2), w = grad_out.dim(3);
        const double count = static_cast<double>(b) * h * w;
        Tensor grad_in(grad_out.shape());
        for (int c = 0; c < ch_; ++c) {
            const double inv_std = 1.0 / std::sqrt(var_[c] + eps_);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < b; ++n)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double dy = grad_out.at(n, c, i, j);
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat_.at(n, c, i, j);
                    }
            gamma_.grad[c] += sum_dy_xhat;
            beta_.grad[c] += sum_dy;
            if (used_batch_stats_) {
                const double mean_dy = sum_dy / count;
                const double mean_dy_xhat = sum_dy_xhat / count;
                for (int n = 0; n < b; ++n)
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j) {
                            const double dy = grad_out.at(n, c, i, j);
                            grad_in.at(n, c, i, j) =
                                gamma_.value[c] * inv_std *
                                (dy - mean_dy - xhat_.at(n, c, i, j) * mean_dy_xhat);
                        }
            } else {
                for (int n = 0; n < b; ++n)
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j)
                            grad_in.at(n, c, i, j) =
                                gamma_.value[c] * inv_std * grad_out.at(n, c, i, j);
            }
        }
        return grad_in;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_buffers(std::vector<Buffer*>& out) override {
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

private:
    int ch_;
    double eps_, momentum_;
    bool frozen_ = false;
    bool used_batch_stats_ = false;
    Param gamma_, beta_;
    Buffer running_mean_, running_var_;
    Tensor input_, xhat_;
    std::vector<double> mean_, var_;
};

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x) {
        mask_ = Tensor(x.shape());
        Tensor out(x.shape());
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const bool on = x[i] > 0.0;
            mask_[i] = on ? 1.0 : 0.0;
            out[i] = on ? x[i] : 0.0;
        }
        return out;
    }
    Tensor backward(const Tensor& grad_out) {
        Tensor grad_in(grad_out.shape());
        for (std::int64_t i = 0; i < grad_out.size(); ++i) grad_in[i] = grad_out[i] * mask_[i];
        return grad_in;
    }
    void collect_params(std::vector<Param*>&) override {}

private:
    Tensor mask_;
};

class Sigmoid : public Module {
public:
    Tensor forward(const Tensor& x) {
        out_ = Tensor(x.shape());
        for (std::int64_t i = 0; i < x.size(); ++i) out_[i] = 1.0 / (1.0 + std::exp(-x[i]));
        return out_;
    }
    Tensor backward(const Tensor& grad_out) {
        Tensor grad_in(grad_out.shape());
        for (std::int64_t i = 0; i < grad_out.size(); ++i)
            grad_in[i] = grad_out[i] * out_[i] * (1.0 - out_[i]);
        return grad_in;
    }
    void collect_params(std::vector<Param*>&) override {}

private:
    Tensor out_;
};

class Linear : public Module {
public:
    Linear(std::string name, int in_dim, int out_dim)
        : in_dim_(in_dim), out_dim_(out_dim),
          weight_(name + ".weight", {out_dim, in_dim}), bias_(name + ".bias", {out_dim}) {}

    void init(Rng& rng) {
        const double bound = std::sqrt(1.0 / in_dim_);
        for (std::int64_t i = 0; i < weight_.value.size(); ++i)
            weight_.value[i] = rng.uniform(-bound, bound);
        bias_.value.zero();
    }

    // x: B x in_dim
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) {
        UNIKD_CHECK(x.cols() == in_dim_, "Linear: expected ", in_dim_, " inputs, got ", x.cols());
        input_ = x;
        ConstMatMap wm(weight_.value.data(), out_dim_, in_dim_);
        Eigen::MatrixXd out = x * wm.transpose();
        for (Eigen::Index i = 0; i < out.rows(); ++i)
            for (int j = 0; j < out_dim_; ++j) out(i, j) += bias_.value[j];
        return out;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& grad_out) {
        MatMap gw(weight_.grad.data(), out_dim_, in_dim_);
        gw += grad_out.transpose() * input_;
        Eigen::VectorXd gb = grad_out.colwise().sum();
        for (int j = 0; j < out_dim_; ++j) bias_.grad[j] += gb[j];
        ConstMatMap wm(weight_.value.data(), out_dim_, in_dim_);
        return grad_out * wm;
    }

    // Cache-free variants for modules that run several passes per step and
    // carry their own activation caches.
    Eigen::MatrixXd stateless_forward(const Eigen::MatrixXd& x) const {
        UNIKD_CHECK(x.cols() == in_dim_, "Linear: expected ", in_dim_, " inputs, got ", x.cols());
        ConstMatMap wm(weight_.value.data(), out_dim_, in_dim_);
        Eigen::MatrixXd out = x * wm.transpose();
        for (Eigen::Index i = 0; i < out.rows(); ++i)
            for (int j = 0; j < out_dim_; ++j) out(i, j) += bias_.value[j];
        return out;
    }
    Eigen::MatrixXd stateless_backward(const Eigen::MatrixXd& input,
                                       const Eigen::MatrixXd& grad_out) {
        MatMap gw(weight_.grad.data(), out_dim_, in_dim_);
        gw += grad_out.transpose() * input;
        Eigen::VectorXd gb = grad_out.colwise().sum();
        for (int j = 0; j < out_dim_; ++j) bias_.grad[j] += gb[j];
        ConstMatMap wm(weight_.value.data(), out_dim_, in_dim_);
        return grad_out * wm;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    int in_dim_, out_dim_;
    Param weight_, bias_;
    Eigen::MatrixXd input_;
};

// Global average pool: (B, C, H, W) -> B x C matrix.
class GlobalAvgPool : public Module {
public:
    Eigen::MatrixXd forward(const Tensor& x) {
        shape_ = x.shape();
        const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        Eigen::MatrixXd out(b, c);
        const double inv = 1.0 / (static_cast<double>(h) * w);
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) s += x.at(n, ch, i, j);
                out(n, ch) = s * inv;
            }
        return out;
    }
    Tensor backward(const Eigen::MatrixXd& grad_out) {
        Tensor grad_in(shape_);
        const int b = shape_[0], c = shape_[1], h = shape_[2], w = shape_[3];
        const double inv = 1.0 / (static_cast<double>(h) * w);
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < c; ++ch) {
                const double g = grad_out(n, ch) * inv;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) grad_in.at(n, ch, i, j) = g;
            }
        return grad_in;
    }
    void collect_params(std::vector<Param*>&) override {}

private:
    std::vector<int> shape_;
};

// Nearest-neighbor upsampling by integer factors.
class UpsampleNearest : public Module {
public:
    Tensor forward(const Tensor& x, int target_h, int target_w) {
        const int h = x.dim(2), w = x.dim(3);
        UNIKD_CHECK(target_h % h == 0 && target_w % w == 0,
                    "UpsampleNearest: non-integer spatial ratio ", target_h, "/", h, ", ",
                    target_w, "/", w);
        fh_ = target_h / h;
        fw_ = target_w / w;
        in_shape_ = x.shape();
        const int b = x.dim(0), c = x.dim(1);
        Tensor out({b, c, target_h, target_w});
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < target_h; ++i)
                    for (int j = 0; j < target_w; ++j)
                        out.at(n, ch, i, j) = x.at(n, ch, i / fh_, j / fw_);
        return out;
    }
    Tensor backward(const Tensor& grad_out) {
        Tensor grad_in(in_shape_);
        const int b = grad_out.dim(0), c = grad_out.dim(1);
        const int th = grad_out.dim(2), tw = grad_out.dim(3);
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < th; ++i)
                    for (int j = 0; j < tw; ++j)
                        grad_in.at(n, ch, i / fh_, j / fw_) += grad_out.at(n, ch, i, j);
        return grad_in;
    }
    void collect_params(std::vector<Param*>&) override {}

private:
    int fh_ = 1, fw_ = 1;
    std::vector<int> in_shape_;
};

}  // namespace unikd::nn
