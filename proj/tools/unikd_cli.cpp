// Command-line entry point: training, evaluation, diagnostics, and the KL
// self-check.

#include <CLI11.hpp>
#include <iostream>

#include "unikd/config.hpp"
#include "unikd/metrics.hpp"
#include "unikd/trainer.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<double> alpha, beta, tau;
    std::optional<std::string> out_dir;
    std::optional<std::string> dataset;
    std::optional<int> epochs;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "experiment config file");
    cmd->add_option("--seed", f.seed, "override the run seed");
    cmd->add_option("--mode", f.mode, "override the training mode");
    cmd->add_option("--alpha", f.alpha, "override the feature-loss weight");
    cmd->add_option("--beta", f.beta, "override the logits-KD weight");
    cmd->add_option("--tau", f.tau, "override the softmax temperature");
    cmd->add_option("--out-dir", f.out_dir, "override the output directory");
    cmd->add_option("--dataset", f.dataset, "override the dataset kind (synthetic|cifar-binary)");
    cmd->add_option("--epochs", f.epochs, "override the epoch count");
}

unikd::ExperimentConfig resolve_config(const CommonFlags& f) {
    unikd::ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = unikd::load_config(f.config_path);
    if (f.seed) cfg.seed = *f.seed;
    if (f.mode) cfg.mode = unikd::mode_from_string(*f.mode);
    if (f.alpha) cfg.alpha = *f.alpha;
    if (f.beta) cfg.beta = *f.beta;
    if (f.tau) cfg.tau = *f.tau;
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.epochs) cfg.epochs = *f.epochs;
    if (f.dataset) {
        if (*f.dataset == "synthetic") cfg.dataset.kind = unikd::DatasetKind::synthetic;
        else if (*f.dataset == "cifar-binary") cfg.dataset.kind = unikd::DatasetKind::cifar_binary;
        else throw unikd::ConfigError("unknown dataset kind: " + *f.dataset);
    }
    cfg.validate();
    return cfg;
}

unikd::Loader make_val_loader(const unikd::ExperimentConfig& cfg, unikd::Dataset& val_ds) {
    if (cfg.dataset.kind == unikd::DatasetKind::synthetic) {
        val_ds = unikd::synth_generate(cfg.dataset, 1);
    } else {
        unikd::Dataset all = unikd::cifar_load(cfg.cifar_path, cfg.dataset);
        for (int i = 0; i < cfg.dataset.val_size &&
                        cfg.dataset.train_size + i < static_cast<int>(all.size());
             ++i) {
            const auto j = static_cast<size_t>(cfg.dataset.train_size + i);
            val_ds.images.push_back(all.images[j]);
            val_ds.labels.push_back(all.labels[j]);
        }
        val_ds.input_hw = all.input_hw;
        val_ds.class_count = all.class_count;
    }
    return unikd::make_loader(val_ds, cfg.dataset, cfg.batch_size, 0, false, false);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified knowledge distillation toolkit"};
    app.require_subcommand(1);

    CommonFlags train_f, pretrain_f, eval_f, diag_f;
    std::string eval_ckpt, diag_teacher, diag_student;
    std::string pretrain_out = "teacher.ckpt";
    int kl_cases = 100;
    std::uint64_t kl_seed = 0;
    std::int64_t kl_samples = 200000;
    int diag_points = 100;

    auto* train_cmd = app.add_subcommand("train", "run a distillation experiment");
    add_common_flags(train_cmd, train_f);

    auto* pretrain_cmd =
        app.add_subcommand("pretrain-teacher", "train the teacher architecture with CE only");
    add_common_flags(pretrain_cmd, pretrain_f);
    pretrain_cmd->add_option("--output", pretrain_out, "teacher checkpoint destination");

    auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
    add_common_flags(eval_cmd, eval_f);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "student checkpoint")->required();

    auto* diag_cmd = app.add_subcommand("diagnose", "logit-CDF and correlation diagnostics");
    add_common_flags(diag_cmd, diag_f);
    diag_cmd->add_option("--teacher-checkpoint", diag_teacher)->required();
    diag_cmd->add_option("--student-checkpoint", diag_student)->required();
    diag_cmd->add_option("--points", diag_points, "CDF sample points");

    auto* kl_cmd = app.add_subcommand("kl-check", "closed form vs sampling oracle self-check");
    kl_cmd->add_option("--cases", kl_cases, "number of random cases");
    kl_cmd->add_option("--seed", kl_seed, "rng seed");
    kl_cmd->add_option("--samples", kl_samples, "Monte-Carlo samples per case");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) {
            unikd::ExperimentConfig cfg = resolve_config(train_f);
            unikd::TrainReport report = unikd::run_experiment(cfg);
            std::cout << "best_val_top1=" << report.best_val_top1
                      << " checkpoint=" << report.checkpoint_path
                      << " wall_seconds=" << report.wall_seconds << "\n";
        } else if (pretrain_cmd->parsed()) {
            unikd::ExperimentConfig cfg = resolve_config(pretrain_f);
            cfg.mode = unikd::TrainMode::ce_only;
            cfg.student_arch = cfg.teacher_arch;
            unikd::TrainReport report = unikd::run_experiment(cfg);
            std::filesystem::copy_file(report.checkpoint_path, pretrain_out,
                                       std::filesystem::copy_options::overwrite_existing);
            std::cout << "teacher_val_top1=" << report.best_val_top1
                      << " checkpoint=" << pretrain_out << "\n";
        } else if (eval_cmd->parsed()) {
            unikd::ExperimentConfig cfg = resolve_config(eval_f);
            unikd::Dataset val_ds;
            unikd::Loader loader = make_val_loader(cfg, val_ds);
            auto net = unikd::load_backbone_checkpoint(eval_ckpt, cfg.dataset.input_hw);
            std::cout << "top1=" << unikd::eval_top1(*net, loader) << "\n";
        } else if (diag_cmd->parsed()) {
            unikd::ExperimentConfig cfg = resolve_config(diag_f);
            unikd::Dataset val_ds;
            unikd::Loader loader = make_val_loader(cfg, val_ds);
            auto teacher = unikd::load_backbone_checkpoint(diag_teacher, cfg.dataset.input_hw);
            auto student = unikd::load_backbone_checkpoint(diag_student, cfg.dataset.input_hw);
            unikd::DiagnosticsReport r =
                unikd::diagnose(*teacher, *student, loader, loader, diag_points);
            std::filesystem::create_directories(cfg.out_dir);
            unikd::write_cdf_csv(cfg.out_dir + "/cdf.csv", r.cdf_points);
            unikd::write_corr_diff_csv(cfg.out_dir + "/corr_diff.csv", r.corr_diff);
            std::cout << "top1=" << r.top1 << " mean_abs_logit_gap=" << r.mean_abs_logit_gap
                      << " outputs=" << cfg.out_dir << "/{cdf.csv,corr_diff.csv}\n";
        } else if (kl_cmd->parsed()) {
            unikd::KlSelfCheckResult r =
                unikd::kl_selfcheck(kl_cases, kl_seed, kl_samples, &std::cout);
            std::cout << "cases=" << r.n_cases << " failures=" << r.failures
                      << " max_oracle_deviation=" << r.max_oracle_deviation
                      << " max_diag_reduction_error=" << r.max_diag_reduction_error << "\n";
            if (!r.passed()) return 1;
        }
    } catch (const unikd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
