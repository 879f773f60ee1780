#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <iomanip>

#include "unikd/backbones.hpp"
#include "unikd/checkpoint.hpp"
#include "unikd/data.hpp"
#include "unikd/distributions.hpp"
#include "unikd/trainer.hpp"

namespace unikd {

struct DiagnosticsReport {
    double top1 = 0.0;
    std::vector<std::pair<double, double>> cdf_points;  // (x, cumulative fraction)
    Eigen::MatrixXd corr_diff;                          // C x C, entries in [0, 2]
    double mean_abs_logit_gap = 0.0;
};

// Restores a backbone from a checkpoint written by the trainer.
inline std::unique_ptr<ToyResNet> load_backbone_checkpoint(const std::string& path,
                                                           int input_hw) {
    Checkpoint ckpt = load_checkpoint(path);
    auto net = std::make_unique<ToyResNet>(arch_by_name(ckpt.meta.architecture),
                                           ckpt.meta.class_count, input_hw);
    restore_module_state(*net, "", ckpt);
    net->set_training(false);
    return net;
}

inline double eval_top1(ToyResNet& net, const Loader& loader) {
    return evaluate_top1(net, loader);
}

// Stacks eval-split logits of one network into an N x C matrix.
inline Eigen::MatrixXd collect_logits(ToyResNet& net, const Loader& loader) {
    const bool was_training = net.training();
    net.set_training(false);
    std::vector<Eigen::MatrixXd> chunks;
    Eigen::Index rows = 0;
    for (const auto& b : loader.epoch(0)) {
        chunks.push_back(net.forward_staged(b.images).logits);
        rows += chunks.back().rows();
    }
    net.set_training(was_training);
    UNIKD_CHECK(rows > 0, "collect_logits: empty split");
    Eigen::MatrixXd out(rows, chunks.front().cols());
    Eigen::Index at = 0;
    for (const auto& c : chunks) {
        out.middleRows(at, c.rows()) = c;
        at += c.rows();
    }
    return out;
}

// Empirical CDF of per-element absolute logit differences |z_t - z_s|,
// sampled at n_points equally spaced x values from 0 to the observed max.
inline std::vector<std::pair<double, double>> logits_cdf(ToyResNet& teacher,
                                                         ToyResNet& student,
                                                         const Loader& loader, int n_points) {
    UNIKD_CHECK(teacher.class_count() == student.class_count(),
                "logits_cdf: class-count mismatch");
    UNIKD_CHECK(n_points >= 1, "logits_cdf: n_points must be >= 1");
    Eigen::MatrixXd zt = collect_logits(teacher, loader);
    Eigen::MatrixXd zs = collect_logits(student, loader);
    std::vector<double> diffs;
    diffs.reserve(static_cast<size_t>(zt.size()));
    for (Eigen::Index i = 0; i < zt.rows(); ++i)
        for (Eigen::Index j = 0; j < zt.cols(); ++j)
            diffs.push_back(std::abs(zt(i, j) - zs(i, j)));
    std::sort(diffs.begin(), diffs.end());
    const double xmax = diffs.back();
    const double n = static_cast<double>(diffs.size());
    std::vector<std::pair<double, double>> points;
    for (int p = 0; p < n_points; ++p) {
        const double x = n_points == 1 ? xmax
                                       : xmax * static_cast<double>(p) / (n_points - 1);
        const auto le = std::upper_bound(diffs.begin(), diffs.end(), x) - diffs.begin();
        points.emplace_back(x, static_cast<double>(le) / n);
    }
    points.back().second = 1.0;  // xmax is attained, guard rounding in upper_bound
    return points;
}

namespace detail {

// Pearson correlation matrix across rows; zero-variance columns yield 0.
inline Eigen::MatrixXd pearson_corr(const Eigen::MatrixXd& x, std::vector<int>* degenerate) {
    const Eigen::Index n = x.rows(), c = x.cols();
    Eigen::MatrixXd z(n, c);
    std::vector<bool> dead(static_cast<size_t>(c), false);
    for (Eigen::Index j = 0; j < c; ++j) {
        const double mean = x.col(j).mean();
        const double var = (x.col(j).array() - mean).square().sum() / static_cast<double>(n);
        if (var <= 0.0) {
            dead[static_cast<size_t>(j)] = true;
            z.col(j).setZero();
            if (degenerate) degenerate->push_back(static_cast<int>(j));
        } else {
            z.col(j) = (x.col(j).array() - mean) / std::sqrt(var);
        }
    }
    Eigen::MatrixXd corr = (z.transpose() * z) / static_cast<double>(n);
    for (Eigen::Index j = 0; j < c; ++j) {
        if (!dead[static_cast<size_t>(j)]) corr(j, j) = 1.0;
    }
    return corr;
}

}  // namespace detail

// Element-wise |corr_teacher - corr_student| of logit-dimension Pearson
// correlations over the evaluation split.
inline Eigen::MatrixXd corr_matrix_diff(ToyResNet& teacher, ToyResNet& student,
                                        const Loader& loader,
                                        std::vector<int>* degenerate_dims = nullptr) {
    UNIKD_CHECK(loader.dataset_size() >= 2, "corr_matrix_diff: split must have at least 2 samples");
    Eigen::MatrixXd zt = collect_logits(teacher, loader);
    Eigen::MatrixXd zs = collect_logits(student, loader);
    UNIKD_CHECK(zt.cols() == zs.cols(), "corr_matrix_diff: class-count mismatch");
    Eigen::MatrixXd ct = detail::pearson_corr(zt, degenerate_dims);
    Eigen::MatrixXd cs = detail::pearson_corr(zs, nullptr);
    return (ct - cs).cwiseAbs();
}

inline DiagnosticsReport diagnose(ToyResNet& teacher, ToyResNet& student, const Loader& loader,
                                  const Loader& labeled_loader, int n_points = 100) {
    DiagnosticsReport r;
    r.top1 = evaluate_top1(student, labeled_loader);
    r.cdf_points = logits_cdf(teacher, student, loader, n_points);
    r.corr_diff = corr_matrix_diff(teacher, student, loader);
    Eigen::MatrixXd zt = collect_logits(teacher, loader);
    Eigen::MatrixXd zs = collect_logits(student, loader);
    r.mean_abs_logit_gap = (zt - zs).cwiseAbs().mean();
    return r;
}

inline void write_cdf_csv(const std::string& path,
                          const std::vector<std::pair<double, double>>& points) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << "# empirical CDF over per-element absolute logit differences\n";
    f << "x,y\n";
    f << std::setprecision(17);
    for (const auto& [x, y] : points) f << x << "," << y << "\n";
}

inline void write_corr_diff_csv(const std::string& path, const Eigen::MatrixXd& m) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << "# C=" << m.cols() << "\n";
    f << std::setprecision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) f << ",";
            f << m(i, j);
        }
        f << "\n";
    }
}

// Self-check of the closed-form KL against the sampling oracle and the
// diagonal reduction, over random draws.
struct KlSelfCheckResult {
    int n_cases = 0;
    int failures = 0;
    double max_oracle_deviation = 0.0;     // in units of max(3*stderr, 2% relative)
    double max_diag_reduction_error = 0.0;
    bool passed() const { return failures == 0; }
};

inline KlSelfCheckResult kl_selfcheck(int n_cases, std::uint64_t seed,
                                      std::int64_t n_samples = 200000,
                                      std::ostream* log = nullptr) {
    UNIKD_CHECK(n_cases >= 1, "kl_selfcheck: n_cases must be >= 1");
    Rng rng(seed);
    KlSelfCheckResult res;
    res.n_cases = n_cases;
    for (int c = 0; c < n_cases; ++c) {
        const int k = rng.uniform_int(1, 8);
        Eigen::VectorXd mu_s(k), mu_t(k), var_s(k), var_t(k);
        for (int i = 0; i < k; ++i) {
            mu_s[i] = rng.normal(0.0, 1.5);
            mu_t[i] = rng.normal(0.0, 1.5);
            var_s[i] = std::exp(rng.uniform(-1.5, 1.5));
            var_t[i] = std::exp(rng.uniform(-1.5, 1.5));
        }
        if (c == 0) {
            // adversarial near-singular case at the FDP clamp boundary
            var_s[0] = std::exp(-10.0);
        }
        DiagGaussian q(mu_s, var_s), p(mu_t, var_t);
        const double closed = kl_diag(q, p);
        const McEstimate mc = kl_monte_carlo(q, p, n_samples, rng.next_u64());
        const double tol = std::max(3.0 * mc.stderr_, 0.02 * std::abs(closed));
        const double dev = std::abs(closed - mc.estimate);
        res.max_oracle_deviation = std::max(res.max_oracle_deviation, tol > 0 ? dev / tol : 0.0);
        bool ok = dev <= tol && std::isfinite(closed);

        // diagonal reduction against kl_full
        FullGaussian qf(mu_s, var_s.asDiagonal().toDenseMatrix());
        FullGaussian pf(mu_t, var_t.asDiagonal().toDenseMatrix());
        const double full = kl_full(qf, pf);
        const double red_err = std::abs(full - closed);
        res.max_diag_reduction_error = std::max(res.max_diag_reduction_error, red_err);
        ok = ok && red_err <= 1e-10;

        if (log) {
            (*log) << "case " << c << " k=" << k << " closed=" << closed
                   << " mc=" << mc.estimate << " stderr=" << mc.stderr_
                   << " diag_reduction_err=" << red_err << (ok ? " ok" : " FAIL") << "\n";
        }
        if (!ok) ++res.failures;
    }
    return res;
}

}  // namespace unikd
