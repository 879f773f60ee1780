#pragma once

#include <Eigen/Dense>

#include "unikd/aff.hpp"
#include "unikd/common.hpp"
#include "unikd/distributions.hpp"
#include "unikd/nn.hpp"

namespace unikd {

// Per-sample diagonal Gaussian parameters for a batch: rows of (mean, var).
struct BatchDiagGaussian {
    Eigen::MatrixXd mean;  // B x k
    Eigen::MatrixXd var;   // B x k

    DiagGaussian row(int i) const {
        return DiagGaussian(mean.row(i).transpose(), var.row(i).transpose());
    }
};

// Feature Distribution Prediction head: pool -> flatten -> projection to the
// class dimension, then separate mean and log-variance heads. One parameter
// set per experiment; the teacher and student paths share it.
class FdpHead : public nn::Module {
public:
    static constexpr double kLogVarClamp = 10.0;

    FdpHead(std::string name, int in_channels, int k)
        : in_ch_(in_channels), k_(k),
          proj_(name + ".proj", in_channels, k),
          mean_head_(name + ".mean", k, k),
          logvar_head_(name + ".logvar", k, k) {}

    void init(Rng& rng) {
        proj_.init(rng);
        mean_head_.init(rng);
        logvar_head_.init(rng);
    }

    int k() const { return k_; }
    int in_channels() const { return in_ch_; }

    // Everything backward needs; the head itself stays stateless across the
    // two (teacher/student) passes of one step.
    struct Cache {
        std::vector<int> feature_shape;
        Eigen::MatrixXd pooled;   // B x C_in
        Eigen::MatrixXd proj;     // B x k
        Eigen::MatrixXd s_raw;    // B x k, pre-clamp log variance
        BatchDiagGaussian dist;
    };

    Cache forward(const Tensor& feature) const {
        UNIKD_CHECK(feature.rank() == 4 && feature.dim(1) == in_ch_,
                    "FdpHead: expected ", in_ch_, " channels, got ",
                    Tensor::shape_str(feature.shape()));
        Cache c;
        c.feature_shape = feature.shape();
        const int b = feature.dim(0), h = feature.dim(2), w = feature.dim(3);
        const double inv = 1.0 / (static_cast<double>(h) * w);
        c.pooled.resize(b, in_ch_);
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < in_ch_; ++ch) {
                double s = 0.0;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) s += feature.at(n, ch, i, j);
                c.pooled(n, ch) = s * inv;
            }
        c.proj = affine(proj_, c.pooled);
        c.dist.mean = affine(mean_head_, c.proj);
        c.s_raw = affine(logvar_head_, c.proj);
        c.dist.var = c.s_raw.array().min(kLogVarClamp).max(-kLogVarClamp).exp();
        return c;
    }

    // Accumulates parameter gradients and returns the gradient w.r.t. the
    // input feature tensor.
    Tensor backward(const Cache& c, const Eigen::MatrixXd& d_mean,
                    const Eigen::MatrixXd& d_var) {
        // var = exp(clamp(s)); zero slope outside the clamp band
        Eigen::MatrixXd d_s = d_var.cwiseProduct(c.dist.var);
        for (Eigen::Index i = 0; i < d_s.rows(); ++i)
            for (Eigen::Index j = 0; j < d_s.cols(); ++j)
                if (std::abs(c.s_raw(i, j)) >= kLogVarClamp) d_s(i, j) = 0.0;
        Eigen::MatrixXd d_proj = affine_backward(mean_head_, c.proj, d_mean) +
                                 affine_backward(logvar_head_, c.proj, d_s);
        Eigen::MatrixXd d_pooled = affine_backward(proj_, c.pooled, d_proj);
        Tensor d_feature(c.feature_shape);
        const int b = c.feature_shape[0], h = c.feature_shape[2], w = c.feature_shape[3];
        const double inv = 1.0 / (static_cast<double>(h) * w);
        for (int n = 0; n < b; ++n)
            for (int ch = 0; ch < in_ch_; ++ch) {
                const double g = d_pooled(n, ch) * inv;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) d_feature.at(n, ch, i, j) = g;
            }
        return d_feature;
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        proj_.collect_params(out);
        mean_head_.collect_params(out);
        logvar_head_.collect_params(out);
    }

private:
    static Eigen::MatrixXd affine(const nn::Linear& l, const Eigen::MatrixXd& x) {
        return l.stateless_forward(x);
    }
    static Eigen::MatrixXd affine_backward(nn::Linear& l, const Eigen::MatrixXd& input,
                                           const Eigen::MatrixXd& grad_out) {
        return l.stateless_backward(input, grad_out);
    }

    int in_ch_, k_;
    nn::Linear proj_, mean_head_, logvar_head_;
};

// Maps a fused representation to per-sample diagonal Gaussian parameters.
inline BatchDiagGaussian predict_distribution(const FusedRepresentation& fused,
                                              const FdpHead& head) {
    return head.forward(fused.feature).dist;
}

struct FeatureDistLossGrad {
    double value = 0.0;
    Tensor d_student_fused;
    Tensor d_teacher_fused;  // zero tensor when the teacher path is detached
};

// Batch-mean kl_diag between the student and teacher distributions predicted
// by the shared head.
inline double feature_distribution_loss(const FusedRepresentation& student_fused,
                                        const FusedRepresentation& teacher_fused,
                                        const FdpHead& head) {
    const BatchDiagGaussian qs = predict_distribution(student_fused, head);
    const BatchDiagGaussian qt = predict_distribution(teacher_fused, head);
    UNIKD_CHECK(qs.mean.rows() == qt.mean.rows(), "feature_distribution_loss: batch mismatch");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < qs.mean.rows(); ++i) {
        acc += kl_diag(qs.row(static_cast<int>(i)), qt.row(static_cast<int>(i)));
    }
    return acc / static_cast<double>(qs.mean.rows());
}

// Loss with gradients into both fused features and the shared head. When
// detach_teacher is set, the teacher distribution is treated as a constant.
inline FeatureDistLossGrad feature_distribution_loss_with_grad(
    const FusedRepresentation& student_fused, const FusedRepresentation& teacher_fused,
    FdpHead& head, bool detach_teacher = false) {
    FdpHead::Cache cs = head.forward(student_fused.feature);
    FdpHead::Cache ct = head.forward(teacher_fused.feature);
    UNIKD_CHECK(cs.dist.mean.rows() == ct.dist.mean.rows(),
                "feature_distribution_loss: batch mismatch");
    const Eigen::Index batch = cs.dist.mean.rows();
    const double inv_b = 1.0 / static_cast<double>(batch);
    Eigen::MatrixXd d_mu_s(batch, head.k()), d_var_s(batch, head.k());
    Eigen::MatrixXd d_mu_t(batch, head.k()), d_var_t(batch, head.k());
    FeatureDistLossGrad out;
    for (Eigen::Index i = 0; i < batch; ++i) {
        auto g = kl_diag_with_grad(cs.dist.row(static_cast<int>(i)),
                                   ct.dist.row(static_cast<int>(i)));
        out.value += g.value * inv_b;
        d_mu_s.row(i) = g.d_mean_q.transpose() * inv_b;
        d_var_s.row(i) = g.d_var_q.transpose() * inv_b;
        d_mu_t.row(i) = g.d_mean_p.transpose() * inv_b;
        d_var_t.row(i) = g.d_var_p.transpose() * inv_b;
    }
    out.d_student_fused = head.backward(cs, d_mu_s, d_var_s);
    if (detach_teacher) {
        out.d_teacher_fused = Tensor(teacher_fused.feature.shape());
    } else {
        out.d_teacher_fused = head.backward(ct, d_mu_t, d_var_t);
    }
    return out;
}

}  // namespace unikd
