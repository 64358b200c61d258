#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace refine {

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;              // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> data;  // interleaved, row-major
};

void write_png(const std::filesystem::path& path, const RawImage& img);
RawImage read_png(const std::filesystem::path& path);

/// CHW floats in [0,1] <-> 8-bit interleaved.
RawImage to_raw(const Eigen::VectorXf& chw, int side, int channels);
Eigen::VectorXf from_raw(const RawImage& img);

}  // namespace refine
