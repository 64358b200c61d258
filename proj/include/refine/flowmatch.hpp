#pragma once

// Rectified-flow noising x_t = (1 - t) x0 + t eps, and a deterministic Euler
// sampler driven by an eps-predicting denoiser.

#include <random>
#include <vector>

#include "refine/tensor.hpp"

namespace refine {

inline constexpr double kSingularityThreshold = 0.995;
inline constexpr double kMinOneMinusT = 5e-3;
inline constexpr int kDefaultSampleSteps = 16;

template <typename T>
Mat<T> add_noise(const Mat<T>& x0, const Mat<T>& eps, T t) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), ErrorKind::ShapeMismatch,
          "add_noise: x0 and eps shapes differ");
  require(t >= T(0) && t <= T(1), ErrorKind::DomainError, "add_noise: t outside [0,1]");
  return (T(1) - t) * x0 + t * eps;
}

/// Per-column timesteps.
template <typename T>
Mat<T> add_noise(const Mat<T>& x0, const Mat<T>& eps, const std::vector<T>& t) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), ErrorKind::ShapeMismatch,
          "add_noise: x0 and eps shapes differ");
  require(static_cast<Eigen::Index>(t.size()) == x0.cols(), ErrorKind::ShapeMismatch,
          "add_noise: one timestep per column required");
  Mat<T> out(x0.rows(), x0.cols());
  for (Eigen::Index n = 0; n < x0.cols(); ++n) {
    require(t[n] >= T(0) && t[n] <= T(1), ErrorKind::DomainError, "add_noise: t outside [0,1]");
    out.col(n) = (T(1) - t[n]) * x0.col(n) + t[n] * eps.col(n);
  }
  return out;
}

/// Clean-image estimate implied by an eps prediction; (1 - t) floored near t = 1.
template <typename T>
Mat<T> x0_estimate(const Mat<T>& x_t, const Mat<T>& eps_hat, T t) {
  T denom = T(1) - t;
  if (t > T(kSingularityThreshold)) denom = std::max(denom, T(kMinOneMinusT));
  return (x_t - t * eps_hat) / denom;
}

/// Integrates from t = 1 (x = noise) to t = 0 with `steps` uniform Euler steps.
/// denoiser(x_t, t_per_column) -> eps_hat. Never sees a clean image.
template <typename T, typename Denoiser>
Mat<T> sample_from(Denoiser&& denoiser, Mat<T> x, int steps) {
  require(steps >= 1, ErrorKind::DomainError, "sample: steps must be >= 1");
  const T dt = T(1) / static_cast<T>(steps);
  for (int k = 0; k < steps; ++k) {
    const T t = T(1) - static_cast<T>(k) * dt;
    const std::vector<T> tv(static_cast<size_t>(x.cols()), t);
    const Mat<T> eps_hat = denoiser(x, tv);
    require(eps_hat.rows() == x.rows() && eps_hat.cols() == x.cols(), ErrorKind::ShapeMismatch,
            "sample: denoiser output shape");
    const Mat<T> velocity = eps_hat - x0_estimate(x, eps_hat, t);
    x -= dt * velocity;
  }
  return x;
}

template <typename T>
Mat<T> standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat<T> out(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = static_cast<T>(dist(rng));
  return out;
}

template <typename T, typename Denoiser>
Mat<T> sample(Denoiser&& denoiser, Eigen::Index rows, Eigen::Index cols, int steps, std::mt19937_64& rng) {
  require(steps >= 1, ErrorKind::DomainError, "sample: steps must be >= 1");
  return sample_from<T>(denoiser, standard_normal<T>(rows, cols, rng), steps);
}

}  // namespace refine
