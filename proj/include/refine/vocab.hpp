#pragma once

// Closed prompt vocabulary: 6 colors, 3 shape kinds, one connective.

#include <array>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "refine/errors.hpp"

namespace refine {

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };
inline constexpr int kNumKinds = 3;
inline constexpr int kNumColors = 6;

inline constexpr std::array<std::string_view, kNumColors> kColorNames = {"red", "green", "blue",
                                                                          "yellow", "white", "brown"};
inline constexpr std::array<std::string_view, kNumKinds> kKindNames = {"circle", "square", "triangle"};

// RGB in [0,1].
inline constexpr std::array<std::array<double, 3>, kNumColors> kPalette = {{
    {0.90, 0.12, 0.10},
    {0.10, 0.75, 0.20},
    {0.15, 0.30, 0.95},
    {0.95, 0.88, 0.12},
    {0.96, 0.96, 0.96},
    {0.55, 0.30, 0.10},
}};
inline constexpr std::array<double, 3> kBackground = {0.18, 0.20, 0.26};

inline constexpr std::string_view kConnective = "and";

/// Token ids: colors 0..5, kinds 6..8, "and" 9.
inline constexpr int kVocabSize = kNumColors + kNumKinds + 1;

inline int color_token(int color) { return color; }
inline int kind_token(int kind) { return kNumColors + kind; }

inline int token_id(std::string_view word) {
  for (int i = 0; i < kNumColors; ++i)
    if (kColorNames[i] == word) return color_token(i);
  for (int i = 0; i < kNumKinds; ++i)
    if (kKindNames[i] == word) return kind_token(i);
  if (word == kConnective) return kVocabSize - 1;
  throw Error(ErrorKind::UnknownToken, "'" + std::string(word) + "' is not in the vocabulary");
}

inline std::vector<int> tokenize(const std::string& prompt) {
  std::istringstream in(prompt);
  std::vector<int> ids;
  for (std::string word; in >> word;) ids.push_back(token_id(word));
  return ids;
}

}  // namespace refine
