#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "unikd/common.hpp"
#include "unikd/tensor.hpp"

namespace unikd {

struct LogitsBundle {
    Eigen::MatrixXd teacher_logits;  // B x C
    Eigen::MatrixXd student_logits;  // B x C
    double temperature = 1.0;

    LogitsBundle(Eigen::MatrixXd t, Eigen::MatrixXd s, double tau)
        : teacher_logits(std::move(t)), student_logits(std::move(s)), temperature(tau) {
        UNIKD_CHECK(teacher_logits.rows() == student_logits.rows() &&
                        teacher_logits.cols() == student_logits.cols(),
                    "LogitsBundle: shape mismatch");
        UNIKD_CHECK(temperature > 0.0 && std::isfinite(temperature),
                    "LogitsBundle: temperature must be positive");
        UNIKD_CHECK(teacher_logits.allFinite() && student_logits.allFinite(),
                    "LogitsBundle: non-finite logits");
    }
};

struct LossWeights {
    double alpha = 0.0;
    double beta = 0.0;

    LossWeights(double a, double b) : alpha(a), beta(b) {
        UNIKD_CHECK(std::isfinite(alpha) && alpha >= 0.0, "alpha must be finite and >= 0");
        UNIKD_CHECK(std::isfinite(beta) && beta >= 0.0, "beta must be finite and >= 0");
    }
};

struct LossBreakdown {
    double ce = 0.0;
    double fl = 0.0;         // feature-level loss (KL through FDP, or MSE in baseline modes)
    double logits_kl = 0.0;
    double total = 0.0;
};

// Temperature softmax with max-subtraction.
inline Eigen::VectorXd softmax_tau(const Eigen::VectorXd& z, double tau) {
    UNIKD_CHECK(z.size() >= 1, "softmax_tau: empty input");
    UNIKD_CHECK(tau > 0.0 && std::isfinite(tau), "softmax_tau: tau must be positive");
    UNIKD_CHECK(z.allFinite(), "softmax_tau: non-finite logits");
    Eigen::VectorXd s = z / tau;
    const double m = s.maxCoeff();
    Eigen::VectorXd e = (s.array() - m).exp();
    return e / e.sum();
}

// Row-wise temperature softmax over a B x C logits matrix.
inline Eigen::MatrixXd softmax_tau_rows(const Eigen::MatrixXd& z, double tau) {
    Eigen::MatrixXd out(z.rows(), z.cols());
    for (Eigen::Index b = 0; b < z.rows(); ++b) {
        out.row(b) = softmax_tau(z.row(b).transpose(), tau).transpose();
    }
    return out;
}

// Batch-mean KL(p_t || p_s) over temperature-softened probabilities, teacher
// first. Teacher probabilities are treated as constants.
inline double logits_kd_loss(const LogitsBundle& b) {
    const Eigen::MatrixXd pt = softmax_tau_rows(b.teacher_logits, b.temperature);
    const Eigen::MatrixXd ps = softmax_tau_rows(b.student_logits, b.temperature);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < pt.rows(); ++i) {
        for (Eigen::Index j = 0; j < pt.cols(); ++j) {
            acc += pt(i, j) * std::log(pt(i, j) / ps(i, j));
        }
    }
    return acc / static_cast<double>(pt.rows());
}

// Value plus gradient w.r.t. student logits; teacher side gets no gradient.
struct LogitsKdGrad {
    double value = 0.0;
    Eigen::MatrixXd d_student;  // B x C
};

inline LogitsKdGrad logits_kd_loss_with_grad(const LogitsBundle& b) {
    const Eigen::MatrixXd pt = softmax_tau_rows(b.teacher_logits, b.temperature);
    const Eigen::MatrixXd ps = softmax_tau_rows(b.student_logits, b.temperature);
    const double batch = static_cast<double>(pt.rows());
    LogitsKdGrad g;
    g.d_student = (ps - pt) / (b.temperature * batch);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < pt.rows(); ++i) {
        for (Eigen::Index j = 0; j < pt.cols(); ++j) {
            acc += pt(i, j) * std::log(pt(i, j) / ps(i, j));
        }
    }
    g.value = acc / batch;
    return g;
}

// Softmax cross entropy, batch mean, with gradient w.r.t. logits.
struct CeGrad {
    double value = 0.0;
    Eigen::MatrixXd d_logits;
};

inline CeGrad cross_entropy_with_grad(const Eigen::MatrixXd& logits,
                                      const std::vector<int>& labels) {
    UNIKD_CHECK(static_cast<Eigen::Index>(labels.size()) == logits.rows(),
                "cross_entropy: label count mismatch");
    const double batch = static_cast<double>(logits.rows());
    CeGrad g;
    g.d_logits.resize(logits.rows(), logits.cols());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        UNIKD_CHECK(labels[static_cast<size_t>(i)] >= 0 &&
                        labels[static_cast<size_t>(i)] < logits.cols(),
                    "cross_entropy: label out of range");
        Eigen::VectorXd p = softmax_tau(logits.row(i).transpose(), 1.0);
        const int y = labels[static_cast<size_t>(i)];
        acc -= std::log(p[y]);
        g.d_logits.row(i) = p.transpose() / batch;
        g.d_logits(i, y) -= 1.0 / batch;
    }
    g.value = acc / batch;
    return g;
}

// Feature-MSE baseline: 1/2 * sum over layers of the element-mean squared
// residual between teacher feature and adapted student feature.
inline double feature_mse_loss(
    const std::vector<Tensor>& teacher_feats, const std::vector<Tensor>& student_feats,
    const std::vector<std::function<Tensor(const Tensor&)>>& adapters) {
    UNIKD_CHECK(teacher_feats.size() == student_feats.size() &&
                    teacher_feats.size() == adapters.size(),
                "feature_mse_loss: list length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < teacher_feats.size(); ++i) {
        Tensor mapped = adapters[i](student_feats[i]);
        UNIKD_CHECK(mapped.same_shape(teacher_feats[i]),
                    "feature_mse_loss: post-adapter shape mismatch at layer ", i, ": ",
                    Tensor::shape_str(mapped.shape()), " vs ",
                    Tensor::shape_str(teacher_feats[i].shape()));
        double sq = 0.0;
        for (std::int64_t j = 0; j < mapped.size(); ++j) {
            const double d = teacher_feats[i][j] - mapped[j];
            sq += d * d;
        }
        acc += 0.5 * sq / static_cast<double>(mapped.size());
    }
    return acc;
}

// Weighted combiner: total = ce + alpha*fl + beta*lk.
inline LossBreakdown total_loss(double ce, double fl, double lk, const LossWeights& w) {
    UNIKD_CHECK(std::isfinite(ce) && std::isfinite(fl) && std::isfinite(lk),
                "total_loss: non-finite component");
    LossBreakdown b;
    b.ce = ce;
    b.fl = fl;
    b.logits_kl = lk;
    b.total = ce + w.alpha * fl + w.beta * lk;
    return b;
}

}  // namespace unikd
