#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>

#include "unikd/common.hpp"

namespace unikd {

// Multivariate Gaussian with diagonal covariance. All math at this layer is
// double precision; variances are validated, never clamped.
struct DiagGaussian {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;

    DiagGaussian(Eigen::VectorXd m, Eigen::VectorXd v)
        : mean(std::move(m)), var(std::move(v)) {
        UNIKD_CHECK(mean.size() == var.size() && mean.size() >= 1,
                    "DiagGaussian: mean/var length mismatch (", mean.size(), " vs ", var.size(), ")");
        for (Eigen::Index i = 0; i < mean.size(); ++i) {
            UNIKD_CHECK(std::isfinite(mean[i]), "DiagGaussian: non-finite mean[", i, "]");
            UNIKD_CHECK(std::isfinite(var[i]) && var[i] > 0.0,
                        "DiagGaussian: var[", i, "]=", var[i], " must be positive and finite");
        }
    }

    int k() const { return static_cast<int>(mean.size()); }
};

namespace detail {

// Cholesky that reports the smallest pivot seen; fails on a non-positive pivot.
struct CholResult {
    Eigen::MatrixXd lower;
    double smallest_pivot = 0.0;
    bool ok = false;
};

inline CholResult cholesky_lower(const Eigen::MatrixXd& a) {
    const Eigen::Index n = a.rows();
    CholResult r;
    r.lower = Eigen::MatrixXd::Zero(n, n);
    r.smallest_pivot = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = a(j, j) - r.lower.row(j).head(j).squaredNorm();
        r.smallest_pivot = std::min(r.smallest_pivot, d);
        if (!(d > 0.0) || !std::isfinite(d)) {
            r.ok = false;
            return r;
        }
        const double ljj = std::sqrt(d);
        r.lower(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            r.lower(i, j) = (a(i, j) - r.lower.row(i).head(j).dot(r.lower.row(j).head(j))) / ljj;
        }
    }
    r.ok = true;
    return r;
}

}  // namespace detail

// Multivariate Gaussian with a full covariance matrix. Symmetry and positive
// definiteness are enforced at construction.
struct FullGaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    FullGaussian(Eigen::VectorXd m, Eigen::MatrixXd c)
        : mean(std::move(m)), cov(std::move(c)) {
        UNIKD_CHECK(cov.rows() == cov.cols(), "FullGaussian: covariance must be square");
        UNIKD_CHECK(mean.size() == cov.rows() && mean.size() >= 1,
                    "FullGaussian: mean length ", mean.size(), " vs cov ", cov.rows());
        const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
        UNIKD_CHECK(asym <= 1e-8, "FullGaussian: covariance asymmetry ", asym, " exceeds 1e-8");
        auto chol = detail::cholesky_lower(cov);
        UNIKD_CHECK(chol.ok, "FullGaussian: covariance not positive definite (smallest pivot ",
                    chol.smallest_pivot, ")");
    }

    int k() const { return static_cast<int>(mean.size()); }
};

// KL(q || p) for diagonal Gaussians, student first.
inline double kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
    UNIKD_CHECK(q.k() == p.k(), "kl_diag: dimension mismatch ", q.k(), " vs ", p.k());
    double acc = 0.0;
    for (int i = 0; i < q.k(); ++i) {
        const double vs = q.var[i], vt = p.var[i];
        const double dm = p.mean[i] - q.mean[i];
        acc += vs / vt + dm * dm / vt - 1.0 + std::log(vt / vs);
    }
    return 0.5 * acc;
}

// kl_diag plus analytic gradients w.r.t. all four parameter vectors.
struct KlDiagGrad {
    double value = 0.0;
    Eigen::VectorXd d_mean_q, d_mean_p, d_var_q, d_var_p;
};

inline KlDiagGrad kl_diag_with_grad(const DiagGaussian& q, const DiagGaussian& p) {
    UNIKD_CHECK(q.k() == p.k(), "kl_diag: dimension mismatch ", q.k(), " vs ", p.k());
    const int k = q.k();
    KlDiagGrad g;
    g.d_mean_q.resize(k);
    g.d_mean_p.resize(k);
    g.d_var_q.resize(k);
    g.d_var_p.resize(k);
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
        const double vs = q.var[i], vt = p.var[i];
        const double dm = p.mean[i] - q.mean[i];
        acc += vs / vt + dm * dm / vt - 1.0 + std::log(vt / vs);
        g.d_mean_q[i] = -dm / vt;
        g.d_mean_p[i] = dm / vt;
        g.d_var_q[i] = 0.5 * (1.0 / vt - 1.0 / vs);
        g.d_var_p[i] = 0.5 * (-vs / (vt * vt) - dm * dm / (vt * vt) + 1.0 / vt);
    }
    g.value = 0.5 * acc;
    return g;
}

// KL(q || p) for full-covariance Gaussians via triangular factorization of
// the teacher covariance; no explicit inverse or determinant expansion.
inline double kl_full(const FullGaussian& q, const FullGaussian& p) {
    UNIKD_CHECK(q.k() == p.k(), "kl_full: dimension mismatch ", q.k(), " vs ", p.k());
    const int k = q.k();
    auto chol_t = detail::cholesky_lower(p.cov);
    if (!chol_t.ok) {
        throw ContractError(detail::concat(
            "kl_full: teacher covariance factorization failed, smallest pivot ",
            chol_t.smallest_pivot));
    }
    auto chol_s = detail::cholesky_lower(q.cov);
    if (!chol_s.ok) {
        throw ContractError(detail::concat(
            "kl_full: student covariance factorization failed, smallest pivot ",
            chol_s.smallest_pivot));
    }
    const auto& lt = chol_t.lower;
    // tr(Sigma_t^{-1} Sigma_s) = || L_t^{-1} L_s ||_F^2
    Eigen::MatrixXd w =
        lt.triangularView<Eigen::Lower>().solve(chol_s.lower);
    const double trace_term = w.squaredNorm();
    Eigen::VectorXd dm = p.mean - q.mean;
    Eigen::VectorXd y = lt.triangularView<Eigen::Lower>().solve(dm);
    const double quad_term = y.squaredNorm();
    double logdet_t = 0.0, logdet_s = 0.0;
    for (int i = 0; i < k; ++i) {
        logdet_t += std::log(lt(i, i));
        logdet_s += std::log(chol_s.lower(i, i));
    }
    return 0.5 * (trace_term + quad_term - k + 2.0 * (logdet_t - logdet_s));
}

// Monte-Carlo KL estimate: mean of log q(x) - log p(x) over samples x ~ q.
struct McEstimate {
    double estimate = 0.0;
    double stderr_ = 0.0;  // standard error of the mean
};

namespace detail {

inline double log_density_diag(const DiagGaussian& g, const Eigen::VectorXd& x) {
    constexpr double log2pi = 1.8378770664093453;  // ln(2*pi)
    double acc = 0.0;
    for (int i = 0; i < g.k(); ++i) {
        const double d = x[i] - g.mean[i];
        acc += d * d / g.var[i] + std::log(g.var[i]) + log2pi;
    }
    return -0.5 * acc;
}

}  // namespace detail

inline McEstimate kl_monte_carlo(const DiagGaussian& q, const DiagGaussian& p,
                                 std::int64_t n_samples, std::uint64_t seed) {
    UNIKD_CHECK(q.k() == p.k(), "kl_monte_carlo: dimension mismatch");
    UNIKD_CHECK(n_samples >= 1, "kl_monte_carlo: n_samples must be >= 1");
    Rng rng(seed);
    const int k = q.k();
    Eigen::VectorXd sd = q.var.cwiseSqrt();
    Eigen::VectorXd x(k);
    double sum = 0.0, sumsq = 0.0;
    for (std::int64_t j = 0; j < n_samples; ++j) {
        for (int i = 0; i < k; ++i) x[i] = q.mean[i] + sd[i] * rng.normal();
        const double v = detail::log_density_diag(q, x) - detail::log_density_diag(p, x);
        sum += v;
        sumsq += v * v;
    }
    McEstimate e;
    const double n = static_cast<double>(n_samples);
    e.estimate = sum / n;
    const double var = std::max(0.0, sumsq / n - e.estimate * e.estimate);
    e.stderr_ = std::sqrt(var / n);
    return e;
}

inline McEstimate kl_monte_carlo(const FullGaussian& q, const FullGaussian& p,
                                 std::int64_t n_samples, std::uint64_t seed) {
    UNIKD_CHECK(q.k() == p.k(), "kl_monte_carlo: dimension mismatch");
    UNIKD_CHECK(n_samples >= 1, "kl_monte_carlo: n_samples must be >= 1");
    Rng rng(seed);
    const int k = q.k();
    auto chol_q = detail::cholesky_lower(q.cov);
    auto chol_p = detail::cholesky_lower(p.cov);
    UNIKD_CHECK(chol_q.ok && chol_p.ok, "kl_monte_carlo: non-PD covariance");
    double logdet_q = 0.0, logdet_p = 0.0;
    for (int i = 0; i < k; ++i) {
        logdet_q += std::log(chol_q.lower(i, i));
        logdet_p += std::log(chol_p.lower(i, i));
    }
    constexpr double log2pi = 1.8378770664093453;
    const double const_q = -logdet_q - 0.5 * k * log2pi;
    const double const_p = -logdet_p - 0.5 * k * log2pi;
    Eigen::VectorXd z(k), x(k), dq(k), dp(k);
    double sum = 0.0, sumsq = 0.0;
    for (std::int64_t j = 0; j < n_samples; ++j) {
        for (int i = 0; i < k; ++i) z[i] = rng.normal();
        x = q.mean + chol_q.lower * z;
        // log q(x): z is already L_q^{-1}(x - mu_q)
        const double lq = const_q - 0.5 * z.squaredNorm();
        dp = x - p.mean;
        Eigen::VectorXd y = chol_p.lower.triangularView<Eigen::Lower>().solve(dp);
        const double lp = const_p - 0.5 * y.squaredNorm();
        const double v = lq - lp;
        sum += v;
        sumsq += v * v;
    }
    McEstimate e;
    const double n = static_cast<double>(n_samples);
    e.estimate = sum / n;
    const double var = std::max(0.0, sumsq / n - e.estimate * e.estimate);
    e.stderr_ = std::sqrt(var / n);
    return e;
}

}  // namespace unikd
