#pragma once

// Student/teacher layer pairing and the student -> backbone injection map.
// All layer indices are 1-based.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refine/errors.hpp"

namespace refine {

struct AlignmentPlan {
  int student_layers = 0;
  int teacher_layers = 0;
  // pairs[j-1] = teacher layers aggregated by student layer j.
  std::vector<std::vector<int>> pairs;
  // injection[j-1] = backbone layers student layer j injects into (sorted).
  std::vector<std::vector<int>> injection;

  // Weight on the student feature in the aggregated feature residual:
  // 2 for a two-layer group, 1 for the trailing single layer when T = 2S-1.
  int feature_coefficient(int j) const { return static_cast<int>(pairs.at(j - 1).size()); }

  bool operator==(const AlignmentPlan&) const = default;
};

inline AlignmentPlan build_alignment_plan(int student_layers, int teacher_layers) {
  require(student_layers >= 1 && teacher_layers >= 1, ErrorKind::ShapeMismatch,
          "layer counts must be positive");
  const int s = student_layers;
  const int t = teacher_layers;
  require(t == 2 * s || t == 2 * s - 1, ErrorKind::ShapeMismatch,
          "teacher layers " + std::to_string(t) + " not in {2S, 2S-1} for S=" + std::to_string(s));
  AlignmentPlan plan;
  plan.student_layers = s;
  plan.teacher_layers = t;
  plan.pairs.resize(s);
  for (int j = 1; j <= s; ++j) {
    plan.pairs[j - 1].push_back(2 * j - 1);
    if (2 * j <= t) plan.pairs[j - 1].push_back(2 * j);
  }
  plan.injection.assign(s, {});
  return plan;
}

/// Fills plan.injection with the union of backbone targets of each pair group.
/// teacher_injection[i-1] lists the backbone layers teacher layer i feeds.
inline AlignmentPlan build_injection_plan(AlignmentPlan plan,
                                          const std::vector<std::vector<int>>& teacher_injection,
                                          int backbone_layers) {
  require(static_cast<int>(teacher_injection.size()) == plan.teacher_layers,
          ErrorKind::ShapeMismatch, "teacher_injection length must equal teacher layer count");
  for (const auto& targets : teacher_injection) {
    for (int b : targets) {
      require(b >= 1 && b <= backbone_layers, ErrorKind::InvalidTarget,
              "backbone target " + std::to_string(b) + " outside 1.." +
                  std::to_string(backbone_layers));
    }
  }
  plan.injection.assign(plan.student_layers, {});
  for (int j = 0; j < plan.student_layers; ++j) {
    std::set<int> merged;
    for (int i : plan.pairs[j]) {
      const auto& targets = teacher_injection[i - 1];
      merged.insert(targets.begin(), targets.end());
    }
    plan.injection[j].assign(merged.begin(), merged.end());
  }
  return plan;
}

inline AlignmentPlan build_injection_plan(AlignmentPlan plan, const std::vector<int>& teacher_injection,
                                          int backbone_layers) {
  std::vector<std::vector<int>> nested;
  nested.reserve(teacher_injection.size());
  for (int b : teacher_injection) nested.push_back({b});
  return build_injection_plan(std::move(plan), nested, backbone_layers);
}

/// Teacher layer i feeds backbone layer i.
inline std::vector<std::vector<int>> identity_teacher_injection(int teacher_layers) {
  std::vector<std::vector<int>> out(teacher_layers);
  for (int i = 0; i < teacher_layers; ++i) out[i] = {i + 1};
  return out;
}

/// Checks the structural invariants; teacher_injection is optional (empty skips the union check).
inline void validate(const AlignmentPlan& plan,
                     const std::vector<std::vector<int>>& teacher_injection = {}) {
  const int s = plan.student_layers;
  const int t = plan.teacher_layers;
  require(static_cast<int>(plan.pairs.size()) == s, ErrorKind::PlanMismatch, "pairs length != S");
  require(static_cast<int>(plan.injection.size()) == s, ErrorKind::PlanMismatch,
          "injection length != S");
  std::vector<int> seen(t + 1, 0);
  int prev_max = 0;
  for (const auto& group : plan.pairs) {
    require(!group.empty(), ErrorKind::PlanMismatch, "empty pair group");
    for (int i : group) {
      require(i >= 1 && i <= t, ErrorKind::PlanMismatch, "teacher index out of range");
      ++seen[i];
    }
    const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
    require(*lo > prev_max, ErrorKind::PlanMismatch, "pair groups not ordered/disjoint");
    prev_max = *hi;
  }
  for (int i = 1; i <= t; ++i) {
    require(seen[i] == 1, ErrorKind::PlanMismatch,
            "teacher layer " + std::to_string(i) + " covered " + std::to_string(seen[i]) + " times");
  }
  if (t == 2 * s) {
    for (int j = 1; j <= s; ++j) {
      require(plan.pairs[j - 1] == std::vector<int>{2 * j - 1, 2 * j}, ErrorKind::PlanMismatch,
              "pairs entry does not match {2j-1, 2j}");
    }
  }
  if (!teacher_injection.empty()) {
    require(static_cast<int>(teacher_injection.size()) == t, ErrorKind::PlanMismatch,
            "teacher_injection length != T");
    for (int j = 0; j < s; ++j) {
      std::set<int> merged;
      for (int i : plan.pairs[j]) merged.insert(teacher_injection[i - 1].begin(), teacher_injection[i - 1].end());
      require(std::vector<int>(merged.begin(), merged.end()) == plan.injection[j],
              ErrorKind::PlanMismatch, "injection entry is not the union of its teacher targets");
    }
  }
}

inline nlohmann::json to_json(const AlignmentPlan& plan) {
  return {{"S", plan.student_layers},
          {"T", plan.teacher_layers},
          {"pairs", plan.pairs},
          {"injection", plan.injection}};
}

inline AlignmentPlan alignment_plan_from_json(const nlohmann::json& doc) {
  AlignmentPlan plan;
  plan.student_layers = doc.at("S").get<int>();
  plan.teacher_layers = doc.at("T").get<int>();
  plan.pairs = doc.at("pairs").get<std::vector<std::vector<int>>>();
  plan.injection = doc.at("injection").get<std::vector<std::vector<int>>>();
  validate(plan);
  return plan;
}

}  // namespace refine
