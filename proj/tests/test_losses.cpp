#include <gtest/gtest.h>

#include <random>

#include "refine/gradcheck.hpp"
#include "refine/losses.hpp"

using namespace refine;
using MatD = Mat<double>;

namespace {

MatD zeros(Eigen::Index r, Eigen::Index c) { return MatD::Zero(r, c); }
MatD ones(Eigen::Index r, Eigen::Index c) { return MatD::Ones(r, c); }
MatD constant(Eigen::Index r, Eigen::Index c, double v) { return MatD::Constant(r, c, v); }

MatD random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

MatD random_mask(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() % 2);
  return m;
}

DistillOutputs<double> random_outputs(const AlignmentPlan& plan, int rows, int cols, std::mt19937_64& rng) {
  DistillOutputs<double> o;
  o.eps_hat = random_mat(rows, cols, rng);
  o.eps_teacher = random_mat(rows, cols, rng);
  for (int j = 0; j < plan.student_layers; ++j) o.f_student.push_back(random_mat(4, 6, rng));
  for (int i = 0; i < plan.teacher_layers; ++i) o.f_teacher.push_back(random_mat(4, 6, rng));
  return o;
}

}  // namespace

TEST(MaskWeight, Values) {
  MatD m(2, 1);
  m << 1, 0;
  const MatD w = mask_weight(m, 0.975);
  EXPECT_DOUBLE_EQ(w(0, 0), 0.975);
  EXPECT_NEAR(w(1, 0), 0.025, 1e-15);
  const MatD z = mask_weight(zeros(3, 2), 0.8);
  EXPECT_TRUE((z.array() == 1.0 - 0.8).all());
}

TEST(MaskWeight, RejectsAlphaAtOrBelowHalf) {
  for (double a : {0.5, 0.3, 1.2}) {
    try {
      mask_weight(zeros(1, 1), a);
      FAIL() << a;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::DomainError);
    }
  }
  EXPECT_THROW(mask_weight(constant(1, 1, 0.5), 0.9), Error);
}

TEST(MaskWeight, PartitionIsExact) {
  std::mt19937_64 rng(1);
  for (double a : {0.975, 0.51, 0.6, 0.9, 1.0, 0.7234}) {
    const MatD m = random_mask(37, 5, rng);
    const MatD flipped = ones(37, 5) - m;
    const MatD sum = mask_weight(m, a) + mask_weight(flipped, a);
    EXPECT_TRUE((sum.array() == 1.0).all()) << a;
  }
}

TEST(TaskLoss, SinglePixel) {
  MatD eps(1, 1), hat(1, 1), w(1, 1);
  eps << 1;
  hat << 0;
  w << 0.975;
  EXPECT_NEAR(task_loss(eps, hat, w).value, 0.950625, 1e-12);
  MatD m(1, 1);
  m << 1;
  EXPECT_NEAR(task_loss(eps, hat, mask_weight(m, 0.975)).value, 0.950625, 1e-12);
}

TEST(TaskLoss, ZeroResidualAndUniformWeight) {
  std::mt19937_64 rng(2);
  const MatD e = random_mat(12, 3, rng), h = random_mat(12, 3, rng);
  EXPECT_EQ(task_loss(e, e, constant(4, 3, 0.7)).value, 0.0);
  const double mse = (e - h).squaredNorm() / static_cast<double>(e.size());
  EXPECT_NEAR(task_loss(e, h, mask_weight(ones(4, 3), 1.0)).value, mse, 1e-14);
}

TEST(TaskLoss, ShapeMismatch) {
  EXPECT_THROW(task_loss(zeros(4, 2), zeros(4, 3), ones(4, 2)), Error);
  EXPECT_THROW(task_loss(zeros(4, 2), zeros(4, 2), ones(3, 2)), Error);
}

TEST(DistillLoss, ConstantOffset) {
  std::mt19937_64 rng(3);
  const MatD a = random_mat(8, 4, rng);
  EXPECT_EQ(distill_loss(a, a).value, 0.0);
  EXPECT_NEAR(distill_loss<double>(a, (a.array() + 0.3).matrix()).value, 0.09, 1e-14);
}

TEST(FeatureLoss, ZeroAtPairMean) {
  std::mt19937_64 rng(4);
  for (auto [s, t] : std::vector<std::pair<int, int>>{{2, 4}, {3, 5}, {4, 8}, {1, 1}}) {
    const auto plan = build_alignment_plan(s, t);
    std::vector<MatD> ft, fs;
    for (int i = 0; i < t; ++i) ft.push_back(random_mat(5, 7, rng));
    for (int j = 1; j <= s; ++j) {
      MatD mean = zeros(5, 7);
      for (int i : plan.pairs[j - 1]) mean += ft[i - 1];
      fs.push_back(mean / static_cast<double>(plan.pairs[j - 1].size()));
    }
    EXPECT_LE(asymmetric_feature_loss(fs, ft, plan).value, 1e-12) << s << "," << t;
  }
}

TEST(FeatureLoss, ScalarExample) {
  const auto plan = build_alignment_plan(1, 2);
  const std::vector<MatD> ft{ones(2, 1), ones(2, 1)};
  const std::vector<MatD> fs{zeros(2, 1)};
  EXPECT_DOUBLE_EQ(asymmetric_feature_loss(fs, ft, plan).value, 4.0);
}

TEST(FeatureLoss, TeacherDoublingQuadruples) {
  std::mt19937_64 rng(5);
  const auto plan = build_alignment_plan(2, 4);
  std::vector<MatD> ft, ft2, fs;
  for (int i = 0; i < 4; ++i) {
    ft.push_back(random_mat(3, 3, rng));
    ft2.push_back(2.0 * ft.back());
  }
  for (int j = 0; j < 2; ++j) fs.push_back(zeros(3, 3));
  EXPECT_NEAR(asymmetric_feature_loss(fs, ft2, plan).value, 4.0 * asymmetric_feature_loss(fs, ft, plan).value,
              1e-12);
}

TEST(FeatureLoss, PlanMismatch) {
  const auto plan = build_alignment_plan(2, 4);
  std::vector<MatD> three(3, zeros(2, 2)), four(4, zeros(2, 2)), two(2, zeros(2, 2));
  EXPECT_THROW(asymmetric_feature_loss(three, four, plan), Error);
  EXPECT_THROW(asymmetric_feature_loss(two, three, plan), Error);
  two[1] = zeros(3, 2);
  EXPECT_THROW(asymmetric_feature_loss(two, four, plan), Error);
}

TEST(StageLoss, DefaultsGiveSix) {
  // One-element tensors chosen so each term equals 1.
  const auto plan = build_alignment_plan(1, 2);
  DistillOutputs<double> o;
  o.eps_hat = zeros(1, 1);
  o.eps_teacher = ones(1, 1);
  o.f_student = {zeros(1, 1)};
  o.f_teacher = {ones(1, 1), zeros(1, 1)};
  const MatD eps = ones(1, 1);
  const auto s = stage1_loss(eps, ones(1, 1), o, plan, LossWeights{});
  EXPECT_DOUBLE_EQ(s.terms.task, 1.0);
  EXPECT_DOUBLE_EQ(s.terms.distill, 1.0);
  EXPECT_DOUBLE_EQ(s.terms.af, 1.0);
  EXPECT_DOUBLE_EQ(s.terms.total, 6.0);
}

TEST(StageLoss, Stage2EqualsStage1WithoutTask) {
  std::mt19937_64 rng(6);
  const auto plan = build_alignment_plan(3, 5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto o = random_outputs(plan, 12, 3, rng);
    const MatD eps = random_mat(12, 3, rng);
    const MatD w = mask_weight(random_mask(4, 3, rng), 0.975);
    LossWeights lw;
    lw.lambda_distill = 0.7;
    lw.lambda_af = 1.3;
    const auto s2 = stage2_loss(o, plan, lw);
    lw.lambda_task = 0.0;
    const auto s1 = stage1_loss(eps, w, o, plan, lw);
    EXPECT_EQ(s1.terms.total, s2.terms.total);
    EXPECT_TRUE((s1.d_eps_hat.array() == s2.d_eps_hat.array()).all());
    for (int j = 0; j < 3; ++j) EXPECT_TRUE((s1.d_features[j].array() == s2.d_features[j].array()).all());
    EXPECT_EQ(s2.terms.task, 0.0);
  }
}

TEST(StageLoss, LinearInEachLambda) {
  std::mt19937_64 rng(7);
  const auto plan = build_alignment_plan(2, 4);
  const auto o = random_outputs(plan, 8, 2, rng);
  const MatD eps = random_mat(8, 2, rng);
  const MatD w = mask_weight(random_mask(8, 2, rng), 0.975);
  const LossWeights base{0.0, 0.0, 0.0, 0.975};
  const double zero = stage1_loss(eps, w, o, plan, base).terms.total;
  EXPECT_EQ(zero, 0.0);
  for (int k = 0; k < 3; ++k) {
    LossWeights a = base, b = base;
    double* pa = k == 0 ? &a.lambda_task : k == 1 ? &a.lambda_distill : &a.lambda_af;
    double* pb = k == 0 ? &b.lambda_task : k == 1 ? &b.lambda_distill : &b.lambda_af;
    *pa = 0.8;
    *pb = 1.6;
    EXPECT_NEAR(stage1_loss(eps, w, o, plan, b).terms.total, 2.0 * stage1_loss(eps, w, o, plan, a).terms.total,
                1e-12);
  }
}

TEST(StageLoss, NonNegativeAndZeroAtMimicry) {
  std::mt19937_64 rng(8);
  const auto plan = build_alignment_plan(2, 4);
  auto o = random_outputs(plan, 8, 2, rng);
  EXPECT_GE(stage2_loss(o, plan, LossWeights{}).terms.total, 0.0);
  o.eps_hat = o.eps_teacher;
  for (int j = 0; j < 2; ++j) o.f_student[j] = 0.5 * (o.f_teacher[2 * j] + o.f_teacher[2 * j + 1]);
  EXPECT_LE(stage2_loss(o, plan, LossWeights{}).terms.total, 1e-12);
}

TEST(LossWeights, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.lambda_af = -1.0;
  EXPECT_THROW(w.validate(), Error);
  w = LossWeights{};
  w.alpha = 0.5;
  EXPECT_THROW(w.validate(), Error);
}

TEST(Gradcheck, AllOpsPass) {
  const auto entries = run_gradcheck();
  ASSERT_GE(entries.size(), 5u);
  for (const auto& e : entries) {
    EXPECT_TRUE(e.pass) << e.op << " rel err " << e.max_relative_error;
    EXPECT_GE(e.instances, 20);
    EXPECT_LT(e.max_relative_error, 1e-4);
  }
}

TEST(Gradcheck, PerturbedOpIsNamed) {
  GradcheckOptions o;
  o.perturb = "distill_loss";
  o.instances = 3;
  for (const auto& e : run_gradcheck(o)) EXPECT_EQ(e.pass, e.op != "distill_loss") << e.op;
}

TEST(Gradcheck, RelativeErrorNormwise) {
  EXPECT_EQ(relative_error({1.0, 2.0}, {1.0, 2.0}), 0.0);
  EXPECT_NEAR(relative_error({1.001, 0.0}, {1.0, 0.0}), 0.001 / 1.001, 1e-9);
}
