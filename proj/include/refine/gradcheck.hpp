#pragma once

// Central finite-difference checks of the loss gradients (double precision).

#include <cstdint>
#include <string>
#include <vector>

namespace refine {

struct GradcheckOptions {
  int instances = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 2024;
  // Name of an op whose analytic gradient is scaled by (1 + perturb_factor)
  // to confirm the check detects a wrong coefficient.
  std::string perturb;
  double perturb_factor = 1e-3;
};

struct GradcheckEntry {
  std::string op;
  int instances = 0;
  double max_relative_error = 0.0;
  bool pass = false;
};

/// Ops: task_loss (with mask_weight), distill_loss, asymmetric_feature_loss,
/// stage1_loss, stage2_loss, control_backprop (network parameters).
std::vector<GradcheckEntry> run_gradcheck(const GradcheckOptions& opts = {});

/// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

}  // namespace refine
