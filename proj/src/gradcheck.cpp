#include "refine/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "refine/losses.hpp"
#include "refine/nets.hpp"

namespace refine {

namespace {

using Mats = std::vector<MatD*>;

MatD random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return MatD::NullaryExpr(r, c, [&]() { return n(rng); });
}

MatD random_mask(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.3);
  return MatD::NullaryExpr(r, c, [&]() { return b(rng) ? 1.0 : 0.0; });
}

// Compares analytic gradients (flattened over `inputs`) with central differences of f.
double check(const std::function<double()>& f, const Mats& inputs, const std::vector<MatD>& analytic, double h,
             double scale) {
  std::vector<double> a, n;
  for (size_t k = 0; k < inputs.size(); ++k) {
    MatD& x = *inputs[k];
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double orig = x.data()[i];
      x.data()[i] = orig + h;
      const double up = f();
      x.data()[i] = orig - h;
      const double down = f();
      x.data()[i] = orig;
      n.push_back((up - down) / (2.0 * h));
      a.push_back(scale * analytic[k].data()[i]);
    }
  }
  return relative_error(a, n);
}

struct FeatureCase {
  AlignmentPlan plan;
  std::vector<MatD> fs, ft;
};

FeatureCase random_features(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> s_pick(1, 3);
  std::bernoulli_distribution odd(0.5);
  const int s = s_pick(rng);
  const int t = (odd(rng) && s > 1) ? 2 * s - 1 : 2 * s;
  FeatureCase c{build_alignment_plan(s, t), {}, {}};
  std::uniform_int_distribution<int> dim(1, 4);
  const int rows = dim(rng), cols = dim(rng);
  for (int j = 0; j < s; ++j) c.fs.push_back(random_mat(rows, cols, rng));
  for (int i = 0; i < t; ++i) c.ft.push_back(random_mat(rows, cols, rng));
  return c;
}

LossWeights random_weights(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 5.0), a(0.51, 1.0);
  return {u(rng), u(rng), u(rng), a(rng)};
}

GradcheckEntry run_op(const std::string& op, const GradcheckOptions& o,
                      const std::function<double(std::mt19937_64&, double)>& instance) {
  GradcheckEntry e{op, o.instances, 0.0, true};
  std::mt19937_64 rng(o.seed ^ std::hash<std::string>{}(op));
  const double scale = o.perturb == op ? 1.0 + o.perturb_factor : 1.0;
  for (int k = 0; k < o.instances; ++k) e.max_relative_error = std::max(e.max_relative_error, instance(rng, scale));
  e.pass = e.max_relative_error < o.tolerance;
  return e;
}

}  // namespace

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

std::vector<GradcheckEntry> run_gradcheck(const GradcheckOptions& o) {
  const double h = o.step;
  std::vector<GradcheckEntry> out;

  out.push_back(run_op("task_loss", o, [h](std::mt19937_64& rng, double scale) {
    std::uniform_int_distribution<int> dim(1, 5), ch(1, 3);
    std::uniform_real_distribution<double> alpha(0.51, 1.0);
    const int pixels = dim(rng), n = dim(rng), c = ch(rng);
    const MatD w = mask_weight<double>(random_mask(pixels, n, rng), alpha(rng));
    const MatD eps = random_mat(c * pixels, n, rng);
    MatD eps_hat = random_mat(c * pixels, n, rng);
    const auto g = task_loss(eps, eps_hat, w).grad;
    return check([&] { return task_loss(eps, eps_hat, w).value; }, {&eps_hat}, {g}, h, scale);
  }));

  out.push_back(run_op("distill_loss", o, [h](std::mt19937_64& rng, double scale) {
    std::uniform_int_distribution<int> dim(1, 6);
    const int r = dim(rng), c = dim(rng);
    const MatD teacher = random_mat(r, c, rng);
    MatD student = random_mat(r, c, rng);
    const auto g = distill_loss(teacher, student).grad;
    return check([&] { return distill_loss(teacher, student).value; }, {&student}, {g}, h, scale);
  }));

  out.push_back(run_op("asymmetric_feature_loss", o, [h](std::mt19937_64& rng, double scale) {
    FeatureCase fc = random_features(rng);
    const auto g = asymmetric_feature_loss(fc.fs, fc.ft, fc.plan).grad;
    Mats inputs;
    for (auto& m : fc.fs) inputs.push_back(&m);
    return check([&] { return asymmetric_feature_loss(fc.fs, fc.ft, fc.plan).value; }, inputs, g, h, scale);
  }));

  auto stage_case = [h](bool stage1) {
    return [h, stage1](std::mt19937_64& rng, double scale) {
      FeatureCase fc = random_features(rng);
      std::uniform_int_distribution<int> dim(1, 4);
      const int pixels = dim(rng), n = dim(rng);
      const LossWeights w = random_weights(rng);
      DistillOutputs<double> out{random_mat(3 * pixels, n, rng), random_mat(3 * pixels, n, rng), fc.fs, fc.ft};
      const MatD eps = random_mat(3 * pixels, n, rng);
      const MatD pw = mask_weight<double>(random_mask(pixels, n, rng), w.alpha);
      auto eval = [&] {
        return stage1 ? stage1_loss(eps, pw, out, fc.plan, w) : stage2_loss(out, fc.plan, w);
      };
      const auto loss = eval();
      Mats inputs{&out.eps_hat};
      std::vector<MatD> grads{loss.d_eps_hat};
      for (size_t j = 0; j < out.f_student.size(); ++j) {
        inputs.push_back(&out.f_student[j]);
        grads.push_back(loss.d_features[j]);
      }
      return check([&] { return eval().terms.total; }, inputs, grads, h, scale);
    };
  };
  out.push_back(run_op("stage1_loss", o, stage_case(true)));
  out.push_back(run_op("stage2_loss", o, stage_case(false)));

  // Backpropagation through a tiny controlled backbone, w.r.t. sampled student parameters.
  out.push_back(run_op("control_backprop", o, [h](std::mt19937_64& rng, double scale) {
    ModelSpec spec;
    spec.grid = {8, 2};
    spec.width = 4;
    spec.cond_dim = 4;
    spec.embed_dim = 3;
    spec.backbone_layers = 4;
    spec.teacher_layers = 4;
    spec.student_layers = 2;
    auto backbone = Backbone<double>::random(spec, rng);
    const auto plan = build_injection_plan(build_alignment_plan(2, 4), identity_teacher_injection(4), 4);
    auto student = ControlModule<double>::random(spec, ControlRole::Student, 2, plan.injection, rng);
    // Non-zero projections so every path carries gradient.
    student.for_each_param([&](const std::string& name, Param<double>& p) {
      if (name.find("proj") != std::string::npos) p.value = 0.3 * random_mat(p.value.rows(), p.value.cols(), rng);
    });
    student.set_trainable(true);
    const int n = 2;
    const MatD x_t = random_mat(spec.grid.image_dim(), n, rng);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    const std::vector<double> t{u(rng), u(rng)};
    ConditionBatch<double> cond;
    cond.prompts = {{0, 6}, {2, 7, 9, 1, 8}};
    cond.mask = random_mask(spec.grid.pixels(), n, rng);
    cond.masked = random_mat(spec.grid.image_dim(), n, rng);
    const MatD target = random_mat(spec.grid.image_dim(), n, rng);
    const std::vector<MatD> feat_target{random_mat(spec.width, spec.grid.tokens() * n, rng),
                                        random_mat(spec.width, spec.grid.tokens() * n, rng)};
    auto loss_of = [&](const ControlModule<double>::Output& o, const MatD& eps_hat) {
      double v = distill_loss(target, eps_hat).value;
      for (size_t j = 0; j < o.features.size(); ++j) v += distill_loss(feat_target[j], o.features[j]).value;
      return v;
    };
    ControlModule<double>::Tape ct;
    Backbone<double>::Tape bt;
    const auto o = student.forward(x_t, t, cond, &ct);
    const MatD eps_hat = backbone.forward(x_t, t, cond.prompts, o.injections, &bt);
    std::vector<MatD> df;
    for (size_t j = 0; j < o.features.size(); ++j) df.push_back(distill_loss(feat_target[j], o.features[j]).grad);
    const auto d_inj = backbone.backward(bt, cond.prompts, distill_loss(target, eps_hat).grad);
    student.backward(ct, cond.prompts, d_inj, &df);

    std::vector<double> a, num;
    std::uniform_real_distribution<double> pick(0.0, 1.0);
    student.for_each_param([&](const std::string&, Param<double>& p) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        if (pick(rng) > 0.15) continue;
        const double orig = p.value.data()[i];
        auto eval = [&] {
          const auto oo = student.forward(x_t, t, cond, nullptr);
          return loss_of(oo, backbone.forward(x_t, t, cond.prompts, oo.injections, nullptr));
        };
        p.value.data()[i] = orig + h;
        const double up = eval();
        p.value.data()[i] = orig - h;
        const double down = eval();
        p.value.data()[i] = orig;
        num.push_back((up - down) / (2 * h));
        a.push_back(scale * p.grad.data()[i]);
      }
    });
    return relative_error(a, num);
  }));
  return out;
}

}  // namespace refine
