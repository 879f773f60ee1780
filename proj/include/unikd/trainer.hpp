#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "unikd/aff.hpp"
#include "unikd/backbones.hpp"
#include "unikd/checkpoint.hpp"
#include "unikd/config.hpp"
#include "unikd/data.hpp"
#include "unikd/fdp.hpp"
#include "unikd/losses.hpp"

namespace unikd {

class SgdMomentum {
public:
    SgdMomentum(std::vector<nn::Param*> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (nn::Param* p : params_) velocity_.emplace_back(p->value.shape());
    }

    void step(double lr) {
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& v = velocity_[i];
            nn::Param& p = *params_[i];
            for (std::int64_t j = 0; j < v.size(); ++j) {
                const double g = p.grad[j] + weight_decay_ * p.value[j];
                v[j] = momentum_ * v[j] + g;
                p.value[j] -= lr * v[j];
            }
        }
    }

    const std::vector<nn::Param*>& params() const { return params_; }

private:
    std::vector<nn::Param*> params_;
    std::vector<Tensor> velocity_;
    double momentum_, weight_decay_;
};

// All mutable state of one distillation run. Owned by a single logical
// training thread.
struct TrainState {
    ExperimentConfig cfg;
    std::unique_ptr<ToyResNet> teacher;  // frozen; absent in ce_only runs
    std::unique_ptr<ToyResNet> student;
    std::unique_ptr<AffStack> aff_student;
    std::unique_ptr<AffStack> aff_teacher;
    std::unique_ptr<FdpHead> fdp;  // one parameter set, both paths
    std::vector<std::unique_ptr<nn::Conv2d>> adapters;  // mse/hybrid modes
    std::unique_ptr<SgdMomentum> optimizer;

    bool needs_teacher() const { return cfg.mode != TrainMode::ce_only; }
    bool uses_fdp() const { return cfg.mode == TrainMode::unikd; }
    bool uses_mse() const {
        return cfg.mode == TrainMode::mse_only || cfg.mode == TrainMode::hybrid_kd_mse;
    }
    bool uses_logits_kd() const {
        return cfg.mode == TrainMode::unikd || cfg.mode == TrainMode::kd_only ||
               cfg.mode == TrainMode::hybrid_kd_mse;
    }

    // Effective loss weights for the configured mode.
    LossWeights effective_weights() const {
        double a = 0.0, b = 0.0;
        if (uses_fdp() || uses_mse()) a = cfg.alpha;
        if (uses_logits_kd()) b = cfg.beta;
        return LossWeights(a, b);
    }
};

inline std::unique_ptr<ToyResNet> load_teacher(const ExperimentConfig& cfg) {
    if (cfg.teacher_checkpoint.empty() ||
        !std::filesystem::exists(cfg.teacher_checkpoint)) {
        throw FormatError("teacher checkpoint not found: " + cfg.teacher_checkpoint);
    }
    Checkpoint ckpt = load_checkpoint(cfg.teacher_checkpoint);
    if (ckpt.meta.architecture != cfg.teacher_arch) {
        throw FormatError("teacher checkpoint architecture '" + ckpt.meta.architecture +
                          "' does not match configured '" + cfg.teacher_arch + "'");
    }
    if (ckpt.meta.class_count != cfg.dataset.class_count) {
        throw FormatError("teacher checkpoint class count mismatch");
    }
    auto net = std::make_unique<ToyResNet>(arch_by_name(cfg.teacher_arch),
                                           cfg.dataset.class_count, cfg.dataset.input_hw);
    restore_module_state(*net, "", ckpt);
    net->freeze();
    return net;
}

inline TrainState make_train_state(const ExperimentConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    const ArchSpec student_arch = arch_by_name(cfg.student_arch);
    st.student = std::make_unique<ToyResNet>(student_arch, cfg.dataset.class_count,
                                             cfg.dataset.input_hw);
    Rng init_rng(detail::mix64(cfg.seed, 0x5eedull));
    st.student->init(init_rng);

    if (st.needs_teacher()) st.teacher = load_teacher(cfg);

    std::vector<nn::Param*> opt_params = st.student->params();
    if (st.uses_fdp()) {
        const ArchSpec teacher_arch = arch_by_name(cfg.teacher_arch);
        const int fuse_ch = teacher_arch.widths[2];
        st.aff_student = std::make_unique<AffStack>(
            "aff_s", std::vector<int>(student_arch.widths.begin(), student_arch.widths.end()),
            fuse_ch);
        st.aff_teacher = std::make_unique<AffStack>(
            "aff_t", std::vector<int>(teacher_arch.widths.begin(), teacher_arch.widths.end()),
            fuse_ch);
        st.fdp = std::make_unique<FdpHead>("fdp", fuse_ch, cfg.dataset.class_count);
        st.aff_student->init(init_rng);
        st.aff_teacher->init(init_rng);
        st.fdp->init(init_rng);
        for (nn::Param* p : st.aff_student->params()) opt_params.push_back(p);
        for (nn::Param* p : st.aff_teacher->params()) opt_params.push_back(p);
        for (nn::Param* p : st.fdp->params()) opt_params.push_back(p);
    }
    if (st.uses_mse()) {
        const ArchSpec teacher_arch = arch_by_name(cfg.teacher_arch);
        for (int i = 0; i < ToyResNet::kStages; ++i) {
            auto conv = std::make_unique<nn::Conv2d>(
                "adapter" + std::to_string(i), student_arch.widths[static_cast<size_t>(i)],
                teacher_arch.widths[static_cast<size_t>(i)], 1);
            conv->init(init_rng);
            for (nn::Param* p : conv->params()) opt_params.push_back(p);
            st.adapters.push_back(std::move(conv));
        }
    }
    st.optimizer = std::make_unique<SgdMomentum>(std::move(opt_params), cfg.momentum,
                                                 cfg.weight_decay);
    return st;
}

namespace detail {

inline void check_finite_loss(double v, const char* component) {
    if (!std::isfinite(v)) {
        throw std::runtime_error(concat("non-finite loss component: ", component, " = ", v));
    }
}

}  // namespace detail

// One optimizer step of the combined objective. Returns the loss breakdown computed
// before the parameter update. With update=false this is a pure loss probe.
inline LossBreakdown train_step(const LabeledBatch& batch, TrainState& st, double lr,
                                bool update = true) {
    const ExperimentConfig& cfg = st.cfg;
    const LossWeights w = st.effective_weights();
    if (update) {
        st.student->zero_grad();
        if (st.aff_student) st.aff_student->zero_grad();
        if (st.aff_teacher) st.aff_teacher->zero_grad();
        if (st.fdp) st.fdp->zero_grad();
        for (auto& a : st.adapters) a->zero_grad();
    }

    std::optional<StagedForwardOutput> teacher_out;
    if (st.teacher) teacher_out = st.teacher->forward_staged(batch.images);
    StagedForwardOutput student_out = st.student->forward_staged(batch.images);

    CeGrad ce = cross_entropy_with_grad(student_out.logits, batch.labels);
    detail::check_finite_loss(ce.value, "ce");

    double lk = 0.0;
    Eigen::MatrixXd d_logits = ce.d_logits;
    if (st.teacher) {
        LogitsKdGrad kd = logits_kd_loss_with_grad(
            LogitsBundle(teacher_out->logits, student_out.logits, cfg.tau));
        lk = kd.value;
        detail::check_finite_loss(lk, "logits_kl");
        d_logits += w.beta * kd.d_student;
    }

    double fl = 0.0;
    std::vector<Tensor> stage_grads;
    if (st.uses_fdp()) {
        FusedRepresentation fused_s = st.aff_student->forward(student_out.pyramid());
        FusedRepresentation fused_t = st.aff_teacher->forward(teacher_out->pyramid());
        FeatureDistLossGrad g = feature_distribution_loss_with_grad(
            fused_s, fused_t, *st.fdp, cfg.detach_teacher_distribution);
        fl = g.value;
        detail::check_finite_loss(fl, "fl");
        // the head only sees the feature loss; fold in its loss weight
        for (nn::Param* p : st.fdp->params()) p->grad.scale_(w.alpha);
        g.d_student_fused.scale_(w.alpha);
        stage_grads = st.aff_student->backward(g.d_student_fused);
        if (!cfg.detach_teacher_distribution) {
            g.d_teacher_fused.scale_(w.alpha);
            st.aff_teacher->backward(g.d_teacher_fused);  // teacher backbone stays frozen
        }
    } else if (st.uses_mse()) {
        for (int i = 0; i < ToyResNet::kStages; ++i) {
            const Tensor& tf = teacher_out->stage_features[static_cast<size_t>(i)];
            Tensor adapted = st.adapters[static_cast<size_t>(i)]->forward(
                student_out.stage_features[static_cast<size_t>(i)]);
            UNIKD_CHECK(adapted.same_shape(tf),
                        "feature mse: post-adapter shape mismatch at layer ", i);
            const double inv_n = 1.0 / static_cast<double>(tf.size());
            double sq = 0.0;
            Tensor d_adapted(adapted.shape());
            for (std::int64_t j = 0; j < tf.size(); ++j) {
                const double r = adapted[j] - tf[j];
                sq += r * r;
                d_adapted[j] = w.alpha * r * inv_n;
            }
            fl += 0.5 * sq * inv_n;
            stage_grads.push_back(st.adapters[static_cast<size_t>(i)]->backward(d_adapted));
        }
        detail::check_finite_loss(fl, "fl");
    }

    LossBreakdown breakdown = total_loss(ce.value, fl, lk, w);
    detail::check_finite_loss(breakdown.total, "total");

    if (update) {
        st.student->backward(d_logits, stage_grads);
        st.optimizer->step(lr);
    }
    return breakdown;
}

struct EpochRecord {
    LossBreakdown train_loss;  // mean over steps
    double val_top1 = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    double best_val_top1 = 0.0;
    std::string checkpoint_path;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
};

inline double evaluate_top1(ToyResNet& net, const Loader& loader) {
    const bool was_training = net.training();
    net.set_training(false);
    std::int64_t correct = 0, total = 0;
    for (const auto& b : loader.epoch(0)) {
        StagedForwardOutput out = net.forward_staged(b.images);
        for (Eigen::Index i = 0; i < out.logits.rows(); ++i) {
            Eigen::Index argmax = 0;
            out.logits.row(i).maxCoeff(&argmax);
            if (static_cast<int>(argmax) == b.labels[static_cast<size_t>(i)]) ++correct;
            ++total;
        }
    }
    net.set_training(was_training);
    return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

inline void save_student_checkpoint(const std::string& path, const TrainState& st) {
    std::map<std::string, const Tensor*> entries;
    collect_module_state(*st.student, "", entries);
    if (st.aff_student) collect_module_state(*st.aff_student, "aff_s/", entries);
    if (st.aff_teacher) collect_module_state(*st.aff_teacher, "aff_t/", entries);
    if (st.fdp) collect_module_state(*st.fdp, "fdp/", entries);
    for (size_t i = 0; i < st.adapters.size(); ++i) {
        collect_module_state(*st.adapters[i], "adapter/", entries);
    }
    CheckpointMeta meta;
    meta.architecture = st.cfg.student_arch;
    meta.class_count = st.cfg.dataset.class_count;
    meta.config_hash = st.cfg.hash();
    save_checkpoint(path, meta, entries);
}

// Step-decay schedule: x0.1 at 50% and 75% of the epoch budget.
inline double scheduled_lr(const ExperimentConfig& cfg, int epoch) {
    double lr = cfg.lr;
    if (epoch >= cfg.epochs * 3 / 4) return lr * 0.01;
    if (epoch >= cfg.epochs / 2) return lr * 0.1;
    return lr;
}

inline TrainReport run_experiment(const ExperimentConfig& cfg, std::ostream* metrics = nullptr) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    Dataset train_ds, val_ds;
    if (cfg.dataset.kind == DatasetKind::synthetic) {
        train_ds = synth_generate(cfg.dataset, 0);
        val_ds = synth_generate(cfg.dataset, 1);
    } else {
        Dataset all = cifar_load(cfg.cifar_path, cfg.dataset);
        UNIKD_CHECK(all.size() >= cfg.dataset.train_size + cfg.dataset.val_size,
                    "cifar dataset smaller than requested splits");
        train_ds.input_hw = val_ds.input_hw = all.input_hw;
        train_ds.class_count = val_ds.class_count = all.class_count;
        for (int i = 0; i < cfg.dataset.train_size; ++i) {
            train_ds.images.push_back(all.images[static_cast<size_t>(i)]);
            train_ds.labels.push_back(all.labels[static_cast<size_t>(i)]);
        }
        for (int i = 0; i < cfg.dataset.val_size; ++i) {
            const auto j = static_cast<size_t>(cfg.dataset.train_size + i);
            val_ds.images.push_back(all.images[j]);
            val_ds.labels.push_back(all.labels[j]);
        }
    }
    const bool augment = cfg.dataset.kind == DatasetKind::cifar_binary;
    Loader train_loader = make_loader(train_ds, cfg.dataset, cfg.batch_size,
                                      detail::mix64(cfg.seed, 1), true, augment);
    Loader val_loader = make_loader(val_ds, cfg.dataset, cfg.batch_size,
                                    detail::mix64(cfg.seed, 2), false, false);

    TrainState st = make_train_state(cfg);
    const std::uint64_t teacher_sum_before = st.teacher ? st.teacher->checksum() : 0;

    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream metrics_file;
    if (!metrics) {
        metrics_file.open(cfg.out_dir + "/metrics.ndjson");
        metrics = &metrics_file;
    }

    TrainReport report;
    report.seed = cfg.seed;
    report.checkpoint_path = cfg.out_dir + "/student_best.ckpt";
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = scheduled_lr(cfg, epoch);
        st.student->set_training(true);
        LossBreakdown epoch_mean{};
        int n_steps = 0;
        for (const LabeledBatch& batch : train_loader.epoch(epoch)) {
            LossBreakdown b = train_step(batch, st, lr);
            epoch_mean.ce += b.ce;
            epoch_mean.fl += b.fl;
            epoch_mean.logits_kl += b.logits_kl;
            epoch_mean.total += b.total;
            ++n_steps;
            nlohmann::json rec = {{"step", step}, {"epoch", epoch}, {"ce", b.ce},
                                  {"fl", b.fl},  {"logits_kl", b.logits_kl},
                                  {"total", b.total}};
            (*metrics) << rec.dump() << "\n";
            ++step;
        }
        epoch_mean.ce /= n_steps;
        epoch_mean.fl /= n_steps;
        epoch_mean.logits_kl /= n_steps;
        epoch_mean.total /= n_steps;

        EpochRecord rec;
        rec.train_loss = epoch_mean;
        rec.val_top1 = evaluate_top1(*st.student, val_loader);
        report.epochs.push_back(rec);
        nlohmann::json jrec = {{"step", step},       {"epoch", epoch},
                               {"ce", epoch_mean.ce}, {"fl", epoch_mean.fl},
                               {"logits_kl", epoch_mean.logits_kl},
                               {"total", epoch_mean.total}, {"val_top1", rec.val_top1}};
        (*metrics) << jrec.dump() << "\n";

        if (report.epochs.size() == 1 || rec.val_top1 > report.best_val_top1) {
            report.best_val_top1 = rec.val_top1;
            save_student_checkpoint(report.checkpoint_path, st);
        }
    }

    if (st.teacher && st.teacher->checksum() != teacher_sum_before) {
        throw std::runtime_error("teacher parameters changed during training");
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace unikd
