#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "unikd/metrics.hpp"
#include "unikd/trainer.hpp"

using namespace unikd;

namespace {

std::string scratch_dir() {
    const auto d = std::filesystem::temp_directory_path() / "unikd_trainer_tests";
    std::filesystem::create_directories(d);
    return d.string();
}

ExperimentConfig base_cfg(TrainMode mode, const std::string& run_name) {
    ExperimentConfig cfg;
    cfg.dataset.kind = DatasetKind::synthetic;
    cfg.dataset.class_count = 4;
    cfg.dataset.input_hw = 16;
    cfg.dataset.train_size = 32;
    cfg.dataset.val_size = 16;
    cfg.dataset.seed = 11;
    cfg.dataset.noise_scale = 0.15;
    cfg.teacher_arch = "resnet_micro_x2";
    cfg.student_arch = "resnet_micro";
    cfg.mode = mode;
    cfg.batch_size = 8;
    cfg.epochs = 1;
    cfg.seed = 3;
    cfg.out_dir = scratch_dir() + "/" + run_name;
    return cfg;
}

// Writes a freshly initialized teacher checkpoint that satisfies the
// arch/class-count contract; tests that need a trained teacher train first.
std::string write_teacher(const ExperimentConfig& cfg, const std::string& name,
                          std::uint64_t init_key = 0x5eedull) {
    ToyResNet net(arch_by_name(cfg.teacher_arch), cfg.dataset.class_count, cfg.dataset.input_hw);
    Rng rng(detail::mix64(cfg.seed, init_key));
    net.init(rng);
    std::map<std::string, const Tensor*> entries;
    collect_module_state(net, "", entries);
    CheckpointMeta meta;
    meta.architecture = cfg.teacher_arch;
    meta.class_count = cfg.dataset.class_count;
    meta.config_hash = cfg.hash();
    const std::string path = scratch_dir() + "/" + name;
    save_checkpoint(path, meta, entries);
    return path;
}

LabeledBatch first_batch(const ExperimentConfig& cfg) {
    static std::map<std::string, Dataset> cache;
    Dataset& ds = cache[cfg.canonical_string()];
    if (ds.size() == 0) ds = synth_generate(cfg.dataset, 0);
    return make_loader(ds, cfg.dataset, cfg.batch_size, detail::mix64(cfg.seed, 1), true)
        .epoch(0)[0];
}

}  // namespace

TEST(TrainStep, CeOnlyTotalEqualsCe) {
    ExperimentConfig cfg = base_cfg(TrainMode::ce_only, "ce_only");
    TrainState st = make_train_state(cfg);
    EXPECT_EQ(st.teacher, nullptr);
    LossBreakdown b = train_step(first_batch(cfg), st, cfg.lr, false);
    EXPECT_EQ(b.total, b.ce);
    EXPECT_EQ(b.fl, 0.0);
    EXPECT_EQ(b.logits_kl, 0.0);
    EXPECT_GT(b.ce, 0.0);
}

TEST(TrainStep, BreakdownRecombines) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "recombine");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_recombine.ckpt", 0xabcd);
    TrainState st = make_train_state(cfg);
    LossBreakdown b = train_step(first_batch(cfg), st, cfg.lr, false);
    EXPECT_GT(b.fl, 0.0);
    EXPECT_GT(b.logits_kl, 0.0);
    EXPECT_NEAR(b.total, b.ce + cfg.alpha * b.fl + cfg.beta * b.logits_kl, 1e-9);
}

TEST(TrainStep, SelfDistillationFixedPoint) {
    // teacher with identical weights, identical fusion parameters: both
    // auxiliary losses must sit at their minimum
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "selfdistill");
    cfg.teacher_arch = cfg.student_arch;
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_self.ckpt");  // same init stream
    TrainState st = make_train_state(cfg);
    auto sp = st.aff_student->params();
    auto tp = st.aff_teacher->params();
    ASSERT_EQ(sp.size(), tp.size());
    for (size_t i = 0; i < sp.size(); ++i) tp[i]->value = sp[i]->value;
    st.student->set_training(false);  // match the frozen teacher's normalization
    LossBreakdown b = train_step(first_batch(cfg), st, cfg.lr, false);
    EXPECT_LE(b.logits_kl, 1e-9);
    EXPECT_LE(b.fl, 1e-9);
    EXPECT_NEAR(b.total, b.ce, 1e-9);
}

TEST(TrainStep, BitReproducibleAcrossStates) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "repro");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_repro.ckpt", 0x1111);
    TrainState a = make_train_state(cfg);
    TrainState b = make_train_state(cfg);
    Dataset ds = synth_generate(cfg.dataset, 0);
    Loader loader = make_loader(ds, cfg.dataset, cfg.batch_size, detail::mix64(cfg.seed, 1), true);
    for (const LabeledBatch& batch : loader.epoch(0)) {
        LossBreakdown la = train_step(batch, a, cfg.lr);
        LossBreakdown lb = train_step(batch, b, cfg.lr);
        EXPECT_EQ(la.total, lb.total);
        EXPECT_EQ(la.ce, lb.ce);
        EXPECT_EQ(la.fl, lb.fl);
        EXPECT_EQ(la.logits_kl, lb.logits_kl);
    }
    EXPECT_EQ(a.student->checksum(), b.student->checksum());
}

TEST(TrainStep, TeacherStaysFrozen) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "frozen");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_frozen.ckpt", 0x2222);
    TrainState st = make_train_state(cfg);
    const std::uint64_t before = st.teacher->checksum();
    Dataset ds = synth_generate(cfg.dataset, 0);
    Loader loader = make_loader(ds, cfg.dataset, cfg.batch_size, detail::mix64(cfg.seed, 1), true);
    for (const LabeledBatch& batch : loader.epoch(0)) train_step(batch, st, cfg.lr);
    EXPECT_EQ(st.teacher->checksum(), before);
}

TEST(TrainStep, EveryTrainableParameterMoves) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "allgrads");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_allgrads.ckpt", 0x3333);
    TrainState st = make_train_state(cfg);
    std::vector<Tensor> before;
    for (nn::Param* p : st.optimizer->params()) before.push_back(p->value);
    Dataset ds = synth_generate(cfg.dataset, 0);
    Loader loader = make_loader(ds, cfg.dataset, cfg.batch_size, detail::mix64(cfg.seed, 1), true);
    int steps = 0;
    for (int epoch = 0; epoch < 3; ++epoch)
        for (const LabeledBatch& batch : loader.epoch(epoch)) {
            train_step(batch, st, cfg.lr);
            ++steps;
        }
    ASSERT_GE(steps, 10);
    const auto& params = st.optimizer->params();
    for (size_t i = 0; i < params.size(); ++i) {
        // the shared mean-head bias shifts both predicted means equally and
        // the KL only sees their difference, so its gradient is exactly zero
        if (params[i]->name == "fdp.mean.bias") continue;
        double moved = 0.0;
        for (std::int64_t j = 0; j < before[i].size(); ++j)
            moved += std::abs(params[i]->value[j] - before[i][j]);
        EXPECT_GT(moved, 0.0) << params[i]->name;
    }
}

TEST(TrainStep, LoadTeacherRejectsArchMismatch) {
    ExperimentConfig cfg = base_cfg(TrainMode::kd_only, "archmismatch");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_mismatch.ckpt");
    cfg.teacher_arch = "resnet_tiny";  // checkpoint says resnet_micro_x2
    EXPECT_THROW(make_train_state(cfg), FormatError);
    cfg.teacher_arch = "resnet_micro_x2";
    cfg.teacher_checkpoint = scratch_dir() + "/does_not_exist.ckpt";
    EXPECT_THROW(make_train_state(cfg), FormatError);
}

TEST(RunExperiment, WritesMetricsAndCheckpoint) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "smoke");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_smoke.ckpt", 0x4444);
    cfg.epochs = 2;
    TrainReport report = run_experiment(cfg);
    EXPECT_EQ(report.epochs.size(), 2u);
    EXPECT_TRUE(std::filesystem::exists(report.checkpoint_path));

    std::ifstream metrics(cfg.out_dir + "/metrics.ndjson");
    ASSERT_TRUE(metrics.good());
    int lines = 0, with_val = 0;
    std::string line;
    while (std::getline(metrics, line)) {
        nlohmann::json rec = nlohmann::json::parse(line);
        EXPECT_TRUE(rec.contains("step"));
        EXPECT_TRUE(rec.contains("epoch"));
        EXPECT_TRUE(rec.contains("ce"));
        EXPECT_TRUE(rec.contains("fl"));
        EXPECT_TRUE(rec.contains("logits_kl"));
        EXPECT_TRUE(rec.contains("total"));
        if (rec.contains("val_top1")) ++with_val;
        ++lines;
    }
    // 4 steps per epoch plus one epoch-summary record per epoch
    EXPECT_EQ(lines, 2 * 4 + 2);
    EXPECT_EQ(with_val, 2);
}

TEST(RunExperiment, MetricsStreamIsDeterministic) {
    ExperimentConfig cfg = base_cfg(TrainMode::unikd, "determ_a");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_determ.ckpt", 0x5555);
    std::ostringstream a, b;
    TrainReport ra = run_experiment(cfg, &a);
    cfg.out_dir = scratch_dir() + "/determ_b";
    TrainReport rb = run_experiment(cfg, &b);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(ra.best_val_top1, rb.best_val_top1);
}

TEST(RunExperiment, CheckpointRoundTripPreservesAccuracy) {
    ExperimentConfig cfg = base_cfg(TrainMode::ce_only, "roundtrip");
    cfg.epochs = 2;
    TrainReport report = run_experiment(cfg);

    auto net = load_backbone_checkpoint(report.checkpoint_path, cfg.dataset.input_hw);
    Dataset val = synth_generate(cfg.dataset, 1);
    Loader val_loader = make_loader(val, cfg.dataset, cfg.batch_size,
                                    detail::mix64(cfg.seed, 2), false);
    EXPECT_EQ(evaluate_top1(*net, val_loader), report.best_val_top1);
}

TEST(TrainState, ModeWiring) {
    ExperimentConfig cfg = base_cfg(TrainMode::hybrid_kd_mse, "hybrid");
    cfg.teacher_checkpoint = write_teacher(cfg, "teacher_hybrid.ckpt", 0x6666);
    TrainState hy = make_train_state(cfg);
    EXPECT_NE(hy.teacher, nullptr);
    EXPECT_EQ(hy.adapters.size(), 3u);
    EXPECT_EQ(hy.fdp, nullptr);
    EXPECT_EQ(hy.aff_student, nullptr);
    LossBreakdown b = train_step(first_batch(cfg), hy, cfg.lr, false);
    EXPECT_GT(b.fl, 0.0);
    EXPECT_GT(b.logits_kl, 0.0);
    EXPECT_NEAR(b.total, b.ce + cfg.alpha * b.fl + cfg.beta * b.logits_kl, 1e-9);

    cfg.mode = TrainMode::kd_only;
    TrainState kd = make_train_state(cfg);
    EXPECT_TRUE(kd.adapters.empty());
    EXPECT_EQ(kd.fdp, nullptr);
    LossBreakdown bkd = train_step(first_batch(cfg), kd, cfg.lr, false);
    EXPECT_EQ(bkd.fl, 0.0);
    EXPECT_GT(bkd.logits_kl, 0.0);
    EXPECT_NEAR(bkd.total, bkd.ce + cfg.beta * bkd.logits_kl, 1e-12);
}

TEST(Schedule, StepDecayAtHalfAndThreeQuarters) {
    ExperimentConfig cfg = base_cfg(TrainMode::ce_only, "sched");
    cfg.epochs = 8;
    cfg.lr = 0.4;
    EXPECT_EQ(scheduled_lr(cfg, 0), 0.4);
    EXPECT_EQ(scheduled_lr(cfg, 3), 0.4);
    EXPECT_NEAR(scheduled_lr(cfg, 4), 0.04, 1e-15);
    EXPECT_NEAR(scheduled_lr(cfg, 5), 0.04, 1e-15);
    EXPECT_NEAR(scheduled_lr(cfg, 6), 0.004, 1e-15);
    EXPECT_NEAR(scheduled_lr(cfg, 7), 0.004, 1e-15);
}
