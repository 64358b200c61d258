#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "refine/alignment.hpp"

using namespace refine;

namespace {

std::vector<std::vector<int>> pairs_2s(int s) {
  std::vector<std::vector<int>> p;
  for (int j = 1; j <= s; ++j) p.push_back({2 * j - 1, 2 * j});
  return p;
}

}  // namespace

TEST(Alignment, EvenPairsSmall) {
  const auto plan = build_alignment_plan(2, 4);
  EXPECT_EQ(plan.pairs, (std::vector<std::vector<int>>{{1, 2}, {3, 4}}));
  EXPECT_EQ(plan.feature_coefficient(1), 2);
  EXPECT_EQ(plan.feature_coefficient(2), 2);
}

TEST(Alignment, EvenPairsTwelve) { EXPECT_EQ(build_alignment_plan(12, 24).pairs, pairs_2s(12)); }

TEST(Alignment, OddTeacherTwelveTwentyThree) {
  const auto plan = build_alignment_plan(12, 23);
  auto expected = pairs_2s(11);
  expected.push_back({23});
  EXPECT_EQ(plan.pairs, expected);
  EXPECT_EQ(plan.feature_coefficient(12), 1);
  std::vector<int> seen(24, 0);
  for (const auto& g : plan.pairs)
    for (int i : g) ++seen[i];
  for (int i = 1; i <= 23; ++i) EXPECT_EQ(seen[i], 1) << "teacher layer " << i;
}

TEST(Alignment, RejectsOtherRatios) {
  for (auto [s, t] : std::vector<std::pair<int, int>>{{2, 5}, {3, 4}, {4, 2}, {0, 0}, {1, 3}}) {
    try {
      build_alignment_plan(s, t);
      FAIL() << "accepted S=" << s << " T=" << t;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
  }
}

TEST(Alignment, FlattenRoundTrip) {
  for (int s = 1; s <= 16; ++s) {
    std::vector<int> flat;
    for (const auto& g : build_alignment_plan(s, 2 * s).pairs) flat.insert(flat.end(), g.begin(), g.end());
    ASSERT_EQ(static_cast<int>(flat.size()), 2 * s);
    for (int i = 0; i < 2 * s; ++i) EXPECT_EQ(flat[i], i + 1);
  }
}

TEST(Alignment, Monotone) {
  for (int s = 1; s <= 16; ++s)
    for (int t : {2 * s, 2 * s - 1}) {
      if (t < 1) continue;
      const auto plan = build_alignment_plan(s, t);
      for (int j = 0; j + 1 < s; ++j)
        EXPECT_LT(*std::max_element(plan.pairs[j].begin(), plan.pairs[j].end()),
                  *std::min_element(plan.pairs[j + 1].begin(), plan.pairs[j + 1].end()));
    }
}

TEST(Injection, UnionOfPair) {
  const auto plan = build_injection_plan(build_alignment_plan(1, 2), std::vector<int>{1, 2}, 4);
  EXPECT_EQ(plan.injection, (std::vector<std::vector<int>>{{1, 2}}));
}

TEST(Injection, CollapsesDuplicates) {
  const auto plan = build_injection_plan(build_alignment_plan(2, 4), std::vector<int>{1, 1, 2, 2}, 4);
  EXPECT_EQ(plan.injection, (std::vector<std::vector<int>>{{1}, {2}}));
}

TEST(Injection, InvalidTarget) {
  AlignmentPlan plan = build_alignment_plan(1, 1);
  try {
    build_injection_plan(plan, std::vector<int>{5}, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidTarget);
  }
}

TEST(Injection, PreservesTeacherTargetSet) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int s = 1 + static_cast<int>(rng() % 8);
    const int t = (rng() % 2 == 0 || s == 1) ? 2 * s : 2 * s - 1;
    const int b = 1 + static_cast<int>(rng() % 12);
    std::vector<std::vector<int>> teacher(t);
    std::set<int> teacher_targets;
    for (auto& tg : teacher) {
      const int k = static_cast<int>(rng() % 3);
      for (int i = 0; i < k; ++i) {
        tg.push_back(1 + static_cast<int>(rng() % b));
        teacher_targets.insert(tg.back());
      }
    }
    const auto plan = build_injection_plan(build_alignment_plan(s, t), teacher, b);
    std::set<int> student_targets;
    for (const auto& e : plan.injection) student_targets.insert(e.begin(), e.end());
    EXPECT_EQ(student_targets, teacher_targets);
    EXPECT_NO_THROW(validate(plan, teacher));
  }
}

TEST(Alignment, JsonRoundTrip) {
  const auto plan =
      build_injection_plan(build_alignment_plan(4, 7), identity_teacher_injection(7), 8);
  const auto j = to_json(plan);
  EXPECT_EQ(j.at("S"), 4);
  EXPECT_EQ(j.at("T"), 7);
  EXPECT_EQ(alignment_plan_from_json(j), plan);
}

TEST(Alignment, ValidateRejectsOverlap) {
  AlignmentPlan plan = build_alignment_plan(2, 4);
  plan.pairs[1] = {2, 3, 4};
  EXPECT_THROW(validate(plan), Error);
}
