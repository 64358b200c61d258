#pragma once

// Distillation objectives. Every term is a squared norm normalised by the
// per-sample element count and averaged over the batch; gradients are taken
// with respect to the student-side inputs only.

#include <vector>

#include <nlohmann/json.hpp>

#include "refine/alignment.hpp"
#include "refine/tensor.hpp"

namespace refine {

struct LossWeights {
  double lambda_task = 4.0;
  double lambda_distill = 1.0;
  double lambda_af = 1.0;
  double alpha = 0.975;

  void validate() const {
    require(lambda_task >= 0 && lambda_distill >= 0 && lambda_af >= 0, ErrorKind::DomainError,
            "loss weights must be non-negative");
    require(alpha > 0.5 && alpha <= 1.0, ErrorKind::DomainError, "alpha must lie in (0.5, 1]");
  }
  bool operator==(const LossWeights&) const = default;
};

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda_task", w.lambda_task}, {"lambda_distill", w.lambda_distill}, {"lambda_af", w.lambda_af},
          {"alpha", w.alpha}};
}

/// omega = alpha * M + (1 - alpha) * (J - M).
template <typename T>
Mat<T> mask_weight(const Mat<T>& mask, double alpha) {
  require(alpha > 0.5 && alpha <= 1.0, ErrorKind::DomainError, "alpha must satisfy alpha > 0.5 and alpha <= 1");
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  return mask.unaryExpr([a, b](T m) {
    require(m == T(0) || m == T(1), ErrorKind::DomainError, "mask must be binary");
    return m == T(1) ? a : b;
  });
}

template <typename T>
struct LossValue {
  T value = T(0);
  Mat<T> grad;  // d value / d (student-side argument)
};

/// weights are per pixel (pixels x N) and broadcast over channels.
template <typename T>
LossValue<T> task_loss(const Mat<T>& eps, const Mat<T>& eps_hat, const Mat<T>& weights) {
  require(eps.rows() == eps_hat.rows() && eps.cols() == eps_hat.cols(), ErrorKind::ShapeMismatch,
          "task_loss: eps / eps_hat shapes differ");
  require(weights.cols() == eps.cols() && weights.rows() > 0 && eps.rows() % weights.rows() == 0,
          ErrorKind::ShapeMismatch, "task_loss: weight matrix does not tile the image");
  const Mat<T> w = broadcast_channels(weights, static_cast<int>(eps.rows() / weights.rows()));
  const Mat<T> r = w.cwiseProduct(eps - eps_hat);
  const T count = static_cast<T>(eps.size());
  LossValue<T> out;
  out.value = r.squaredNorm() / count;
  out.grad = (T(-2) / count) * w.cwiseProduct(r);
  return out;
}

template <typename T>
LossValue<T> distill_loss(const Mat<T>& eps_teacher, const Mat<T>& eps_hat) {
  require(eps_teacher.rows() == eps_hat.rows() && eps_teacher.cols() == eps_hat.cols(), ErrorKind::ShapeMismatch,
          "distill_loss: output shapes differ");
  const Mat<T> r = eps_teacher - eps_hat;
  const T count = static_cast<T>(r.size());
  LossValue<T> out;
  out.value = r.squaredNorm() / count;
  out.grad = (T(-2) / count) * r;
  return out;
}

template <typename T>
struct FeatureLoss {
  T value = T(0);
  std::vector<Mat<T>> grad;  // per student layer
};

/// sum_j || c_j f_S^j - sum_{i in pairs[j]} f_T^i ||^2, c_j = |pairs[j]|.
template <typename T>
FeatureLoss<T> asymmetric_feature_loss(const std::vector<Mat<T>>& f_student, const std::vector<Mat<T>>& f_teacher,
                                       const AlignmentPlan& plan) {
  require(static_cast<int>(f_student.size()) == plan.student_layers, ErrorKind::PlanMismatch,
          "student feature count != S");
  require(static_cast<int>(f_teacher.size()) == plan.teacher_layers, ErrorKind::PlanMismatch,
          "teacher feature count != T");
  FeatureLoss<T> out;
  out.grad.resize(f_student.size());
  for (int j = 1; j <= plan.student_layers; ++j) {
    const Mat<T>& fs = f_student[j - 1];
    Mat<T> target = Mat<T>::Zero(fs.rows(), fs.cols());
    for (int i : plan.pairs[j - 1]) {
      const Mat<T>& ft = f_teacher[i - 1];
      require(ft.rows() == fs.rows() && ft.cols() == fs.cols(), ErrorKind::ShapeMismatch,
              "feature map shapes differ between student layer " + std::to_string(j) + " and teacher layer " +
                  std::to_string(i));
      target += ft;
    }
    const T coeff = static_cast<T>(plan.feature_coefficient(j));
    const Mat<T> r = coeff * fs - target;
    const T count = static_cast<T>(r.size());
    out.value += r.squaredNorm() / count;
    out.grad[j - 1] = (T(2) * coeff / count) * r;
  }
  return out;
}

struct LossBreakdown {
  double task = 0.0;
  double distill = 0.0;
  double af = 0.0;
  double total = 0.0;
};

template <typename T>
struct StageLoss {
  LossBreakdown terms;
  Mat<T> d_eps_hat;
  std::vector<Mat<T>> d_features;
};

/// Student and teacher outputs for one batch, evaluated on identical (x_t, t, cond).
template <typename T>
struct DistillOutputs {
  Mat<T> eps_hat;
  Mat<T> eps_teacher;
  std::vector<Mat<T>> f_student;
  std::vector<Mat<T>> f_teacher;
};

template <typename T>
StageLoss<T> stage2_loss(const DistillOutputs<T>& out, const AlignmentPlan& plan, const LossWeights& w);

/// lambda_task * L_task + lambda_distill * L_distill + lambda_af * L_af.
template <typename T>
StageLoss<T> stage1_loss(const Mat<T>& eps, const Mat<T>& pixel_weights, const DistillOutputs<T>& out,
                         const AlignmentPlan& plan, const LossWeights& w) {
  const auto task = task_loss(eps, out.eps_hat, pixel_weights);
  const auto distill = distill_loss(out.eps_teacher, out.eps_hat);
  const auto af = asymmetric_feature_loss(out.f_student, out.f_teacher, plan);
  const T lt = static_cast<T>(w.lambda_task);
  const T ld = static_cast<T>(w.lambda_distill);
  const T la = static_cast<T>(w.lambda_af);
  StageLoss<T> s;
  s.terms.task = static_cast<double>(task.value);
  s.terms.distill = static_cast<double>(distill.value);
  s.terms.af = static_cast<double>(af.value);
  // Same association as stage2_loss so that lambda_task = 0 reproduces it bitwise.
  const T guided = ld * distill.value + la * af.value;
  s.terms.total = static_cast<double>(lt * task.value + guided);
  s.d_eps_hat = lt * task.grad + ld * distill.grad;
  s.d_features.resize(af.grad.size());
  for (size_t j = 0; j < af.grad.size(); ++j) s.d_features[j] = la * af.grad[j];
  return s;
}

/// lambda_distill * L_distill + lambda_af * L_af; consumes no ground truth.
template <typename T>
StageLoss<T> stage2_loss(const DistillOutputs<T>& out, const AlignmentPlan& plan, const LossWeights& w) {
  const auto distill = distill_loss(out.eps_teacher, out.eps_hat);
  const auto af = asymmetric_feature_loss(out.f_student, out.f_teacher, plan);
  const T ld = static_cast<T>(w.lambda_distill);
  const T la = static_cast<T>(w.lambda_af);
  StageLoss<T> s;
  s.terms.distill = static_cast<double>(distill.value);
  s.terms.af = static_cast<double>(af.value);
  const T guided = ld * distill.value + la * af.value;
  s.terms.total = static_cast<double>(guided);
  s.d_eps_hat = ld * distill.grad;
  s.d_features.resize(af.grad.size());
  for (size_t j = 0; j < af.grad.size(); ++j) s.d_features[j] = la * af.grad[j];
  return s;
}

}  // namespace refine
