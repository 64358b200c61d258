#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "refine/checkpoint.hpp"
#include "refine/trainer.hpp"

using namespace refine;
namespace fs = std::filesystem;

namespace {

// A tiny end-to-end world: 16x16 scenes, 4-layer backbone and teacher, 2-layer student.
struct World {
  DataConfig data;
  ModelSpec spec;
  std::vector<Sample> sl, ssl, test;
  Backbone<float> backbone;
  ControlModule<float> teacher;
  EvalConfig eval;

  World() {
    data.scene.side = 16;
    data.scene.max_shapes = 2;
    data.scene.min_size = 2.0;
    data.scene.max_size = 3.0;
    data.scene.min_center_distance = 4.0;
    data.scene.mask_dilation = 1;
    data.sl = {24, 0};
    data.ssl = {24, 100};
    data.test = {8, 200};
    for (int i = 0; i < 24; ++i) sl.push_back(generate_sample(data, Split::SL, i));
    for (int i = 0; i < 24; ++i) ssl.push_back(generate_sample(data, Split::SSL, i));
    for (int i = 0; i < 8; ++i) test.push_back(generate_sample(data, Split::Test, i));
    spec.grid = {16, 4};
    spec.width = 8;
    spec.cond_dim = 8;
    spec.embed_dim = 4;
    spec.backbone_layers = 4;
    spec.teacher_layers = 4;
    spec.student_layers = 2;
    BackboneTrainConfig bc;
    bc.steps = 10;
    bc.batch = 8;
    backbone = pretrain_backbone(spec, prepare(sl), bc, 1).backbone;
    TeacherTrainConfig tc;
    tc.max_steps = 10;
    tc.batch = 8;
    tc.eval_every = 10;
    tc.holdout = 4;
    eval.batch = 8;
    eval.steps = 4;
    teacher = train_teacher(backbone, prepare(sl, 0, 20), {sl.begin() + 20, sl.end()}, tc, eval, 2).teacher;
  }

  TrainConfig base() const {
    TrainConfig c;
    c.stage1_steps = 6;
    c.stage2_steps = 3;
    c.batch = 4;
    c.heldout_samples = 4;
    c.seed = 5;
    return c;
  }

  VariantResult run(Variant v, std::uint64_t seed = 5) {
    TrainConfig c = resolve_variant(base(), v);
    c.seed = seed;
    VariantInputs in{&backbone, uses_teacher(v) ? &teacher : nullptr, &sl, &ssl, &test};
    return run_variant(c, in, eval);
  }
};

struct SingleParam {
  Param<float>* p;
  template <typename F>
  void for_each_param(F&& f) {
    f("p", *p);
  }
};

World& world() {
  static World w;
  return w;
}

}  // namespace

TEST(Variants, Names) {
  for (Variant v : kAllVariants) EXPECT_EQ(variant_from_string(to_string(v)), v);
  try {
    variant_from_string("best");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
  EXPECT_FALSE(uses_teacher(Variant::Fc));
  EXPECT_TRUE(uses_teacher(Variant::Ours));
  EXPECT_TRUE(uses_teacher(Variant::Sl));
}

TEST(Variants, ResolveKeepsTotalBudget) {
  TrainConfig base;
  base.stage1_steps = 3000;
  base.stage2_steps = 1000;
  for (Variant v : kAllVariants) EXPECT_EQ(resolve_variant(base, v).total_steps(), 4000) << to_string(v);
  const auto sl = resolve_variant(base, Variant::Sl);
  EXPECT_EQ(sl.stage1_steps, 4000);
  EXPECT_EQ(sl.stage2_steps, 0);
  EXPECT_FALSE(resolve_variant(base, Variant::WoMask).mask_weighting);
  EXPECT_TRUE(resolve_variant(base, Variant::Ours).mask_weighting);
  EXPECT_EQ(resolve_variant(base, Variant::WoCf).weights.lambda_af, 0.0);
  EXPECT_EQ(resolve_variant(base, Variant::Ours).weights.lambda_af, 1.0);
  EXPECT_EQ(resolve_variant(base, Variant::Ours).weights.lambda_task, 4.0);
  base.batch = 0;
  EXPECT_THROW(resolve_variant(base, Variant::Ours), Error);
}

TEST(EpochSampler, CoversEveryIndexPerEpoch) {
  EpochSampler s(10, 3);
  std::multiset<size_t> seen;
  for (int k = 0; k < 5; ++k)
    for (size_t i : s.next(4)) seen.insert(i);
  for (size_t i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 2u) << i;
}

TEST(PseudoSource, KeepsVisiblePixelsAndFillsMask) {
  const World& w = world();
  const PreparedSet set = prepare(w.ssl, 0, 4);
  EXPECT_FALSE(set.has_ground_truth());
  std::vector<const Condition*> p;
  for (const auto& c : set.local) p.push_back(&c);
  const auto cb = make_condition_batch<float>(p);
  std::mt19937_64 rng(1);
  const MatF src = pseudo_source(cb, rng);
  const int pixels = w.spec.grid.pixels();
  int inside = 0;
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < pixels; ++i) {
        const float m = cb.mask(i, n);
        if (m == 0.0f)
          EXPECT_EQ(src(c * pixels + i, n), cb.masked(c * pixels + i, n));
        else
          inside += src(c * pixels + i, n) != 0.0f;
      }
  EXPECT_GT(inside, 0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Param<float> p;
  p.value = MatF::Zero(2, 2);
  p.enable_grad();
  p.grad << 1, -2, 3, 0.5;
  SingleParam m{&p};
  Adam opt(0.01);
  opt.add(m);
  EXPECT_TRUE(opt.grads_finite());
  opt.step();
  EXPECT_NEAR(p.value(0, 0), -0.01, 1e-6);
  EXPECT_NEAR(p.value(0, 1), 0.01, 1e-6);
  EXPECT_TRUE(p.grad.isZero(0));
  p.grad(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(opt.grads_finite());
}

TEST(Stage2, RejectsGroundTruthSamples) {
  World& w = world();
  auto plan = build_injection_plan(build_alignment_plan(2, 4), identity_teacher_injection(4), 4);
  auto student = init_student_from_backbone(w.backbone, plan);
  student.set_trainable(true);
  Adam opt(1e-3);
  opt.add(student);
  DistillState st{&w.backbone, &w.teacher, &student, &plan};
  LossLog log;
  long step = 0;
  TrainConfig cfg = w.base();
  try {
    distill_stage2(st, w.sl, prepare(w.sl), cfg, opt, log, step);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GroundTruthExposure);
  }
  EXPECT_EQ(step, 0);
}

TEST(RunVariant, FreezesBackboneAndTeacher) {
  for (Variant v : kAllVariants) {
    const auto r = world().run(v);
    EXPECT_EQ(r.backbone_checksum_before, r.backbone_checksum_after) << to_string(v);
    EXPECT_EQ(r.teacher_checksum_before, r.teacher_checksum_after) << to_string(v);
    EXPECT_EQ(r.total_steps, 9) << to_string(v);
    EXPECT_TRUE(r.stage2_ids_disjoint);
    EXPECT_EQ(r.report.n_samples, 8);
    if (v == Variant::Fc) {
      EXPECT_TRUE(r.teacher_checksum_before.empty());
    }
  }
}

TEST(RunVariant, LogsStagesInOrder) {
  const auto r = world().run(Variant::Ours);
  ASSERT_EQ(r.log.rows().size(), 9u);
  for (size_t i = 0; i < 9; ++i) EXPECT_EQ(r.log.rows()[i].stage, i < 6 ? "stage1" : "stage2") << i;
  EXPECT_EQ(r.log.rows()[8].terms.task, 0.0);
  EXPECT_TRUE(r.heldout_distill_stage1.has_value());
  EXPECT_TRUE(r.heldout_distill_stage2.has_value());
  const auto sl = world().run(Variant::Sl);
  for (const auto& row : sl.log.rows()) EXPECT_EQ(row.stage, "stage1");
  EXPECT_FALSE(sl.heldout_distill_stage2.has_value());
}

TEST(RunVariant, FcRefusesTeacherAndOthersNeedOne) {
  World& w = world();
  VariantInputs with{&w.backbone, &w.teacher, &w.sl, &w.ssl, &w.test};
  EXPECT_THROW(run_variant(resolve_variant(w.base(), Variant::Fc), with, w.eval), Error);
  VariantInputs without{&w.backbone, nullptr, &w.sl, &w.ssl, &w.test};
  try {
    run_variant(resolve_variant(w.base(), Variant::Ours), without, w.eval);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingArtifact);
  }
}

TEST(RunVariant, Deterministic) {
  const auto a = world().run(Variant::Ours, 7);
  const auto b = world().run(Variant::Ours, 7);
  EXPECT_EQ(param_checksum(a.student), param_checksum(b.student));
  EXPECT_EQ(to_json(a.report.raw), to_json(b.report.raw));
  const auto c = world().run(Variant::Ours, 8);
  EXPECT_NE(param_checksum(a.student), param_checksum(c.student));
}

TEST(RunVariant, WritesCheckpoints) {
  World& w = world();
  const fs::path dir = fs::temp_directory_path() / ("refine_trainer_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  VariantInputs in{&w.backbone, &w.teacher, &w.sl, &w.ssl, &w.test};
  const auto r = run_variant(resolve_variant(w.base(), Variant::Ours), in, w.eval, dir, "hash");
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "stage1-6"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "stage2-9"));
  EXPECT_EQ(r.report.checkpoint, "stage2-9");
  fs::remove_all(dir);
}
