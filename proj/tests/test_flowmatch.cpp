#include <gtest/gtest.h>

#include <random>

#include "refine/flowmatch.hpp"
#include "refine/metrics.hpp"
#include "refine/trainer.hpp"

using namespace refine;
using MatD = Mat<double>;

TEST(AddNoise, Endpoints) {
  std::mt19937_64 rng(1);
  const MatD x0 = standard_normal<double>(6, 3, rng), eps = standard_normal<double>(6, 3, rng);
  EXPECT_TRUE(add_noise(x0, eps, 0.0).isApprox(x0, 0.0));
  EXPECT_TRUE(add_noise(x0, eps, 1.0).isApprox(eps, 0.0));
  const MatD q = add_noise<double>(MatD::Zero(4, 1), MatD::Ones(4, 1), 0.25);
  EXPECT_TRUE((q.array() == 0.25).all());
}

TEST(AddNoise, LinearAndFixedPoint) {
  std::mt19937_64 rng(2);
  const MatD a = standard_normal<double>(5, 2, rng), b = standard_normal<double>(5, 2, rng);
  const MatD e = standard_normal<double>(5, 2, rng);
  for (double t : {0.0, 0.1, 0.5, 0.77, 1.0}) {
    EXPECT_TRUE(add_noise(a, a, t).isApprox(a, 1e-15));
    EXPECT_TRUE(add_noise<double>(a + b, e + e, t).isApprox(add_noise(a, e, t) + add_noise(b, e, t), 1e-12));
  }
}

TEST(AddNoise, Errors) {
  try {
    add_noise<double>(MatD::Zero(2, 2), MatD::Zero(3, 2), 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
  for (double t : {-0.1, 1.5}) {
    try {
      add_noise<double>(MatD::Zero(2, 2), MatD::Zero(2, 2), t);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::DomainError);
    }
  }
}

TEST(Sampler, OneStepWithOracleRecoversX0) {
  std::mt19937_64 rng(3);
  const MatD x0 = standard_normal<double>(8, 2, rng);
  const MatD noise = standard_normal<double>(8, 2, rng);
  // At t = 1, x = eps exactly, so eps_hat = x is the oracle; the floored x0
  // estimate is (x - 1 * x) / 5e-3 = 0 and the step lands on 0 (x0 is unknown
  // at pure noise). From an interior t the identity is exact.
  for (double t0 : {0.3, 0.6, 0.9}) {
    const MatD x_t = add_noise(x0, noise, t0);
    const MatD rec = x0_estimate(x_t, noise, t0);
    EXPECT_TRUE(rec.isApprox(x0, 1e-12)) << t0;
    const MatD stepped = x_t - t0 * (noise - rec);
    EXPECT_TRUE(stepped.isApprox(x0, 1e-12));
  }
  int calls = 0;
  auto oracle = [&](const MatD& x, const std::vector<double>& t) {
    ++calls;
    EXPECT_EQ(t[0], 1.0);
    return MatD(x);
  };
  const MatD out = sample_from<double>(oracle, noise, 1);
  EXPECT_EQ(calls, 1);
  EXPECT_LT(out.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sampler, Deterministic) {
  auto denoiser = [](const MatD& x, const std::vector<double>& t) { return MatD(0.5 * x * (1.0 + t[0])); };
  std::mt19937_64 a(9), b(9);
  const MatD xa = sample<double>(denoiser, 12, 3, 16, a);
  const MatD xb = sample<double>(denoiser, 12, 3, 16, b);
  EXPECT_TRUE((xa.array() == xb.array()).all());
  std::mt19937_64 c(9);
  EXPECT_THROW(sample<double>(denoiser, 12, 3, 0, c), Error);
}

TEST(Sampler, SingularityFloor) {
  MatD x(1, 1), e(1, 1);
  x << 1.0;
  e << 0.0;
  EXPECT_DOUBLE_EQ(x0_estimate(x, e, 1.0)(0, 0), 1.0 / 5e-3);
  EXPECT_DOUBLE_EQ(x0_estimate(x, e, 0.996)(0, 0), 1.0 / 5e-3);
  EXPECT_NEAR(x0_estimate(x, e, 0.99)(0, 0), 1.0 / 0.01, 1e-9);
}

// Overfit oracle: a control module trained on a single image regenerates it.
TEST(Sampler, OverfitOneImage) {
  DataConfig dc;
  dc.scene.side = 16;
  dc.scene.max_shapes = 2;
  dc.scene.min_size = 2.5;
  dc.scene.max_size = 3.5;
  dc.scene.min_center_distance = 4.0;
  std::vector<Sample> one{generate_sample(dc, Split::SL, 0)};
  ModelSpec spec;
  spec.grid = {16, 4};
  spec.backbone_layers = 4;
  spec.teacher_layers = 4;
  spec.student_layers = 2;
  const PreparedSet set = prepare(one);
  BackboneTrainConfig bc;
  bc.steps = 1500;
  bc.batch = 16;
  const auto bb = pretrain_backbone(spec, set, bc, 1);
  TeacherTrainConfig tc;
  tc.max_steps = 1500;
  tc.batch = 16;
  tc.psnr_floor = 1e9;
  tc.eval_every = 1500;
  EvalConfig ev;
  ev.batch = 1;
  const auto te = train_teacher(bb.backbone, set, one, tc, ev, 2);
  const auto gen = generate(bb.backbone, &te.teacher, one, ev, PromptMode::Local);
  const double mse = (gen[0] - one[0].clean_image()).squaredNorm() / static_cast<double>(gen[0].size());
  EXPECT_LT(mse, 1e-2);
}
