#pragma once

// Dense storage conventions shared by the model, losses and metrics.
//
// A batch of images is a (channels*side*side) x N matrix, one column per sample,
// channel-major (CHW) within a column. A batch of masks is (side*side) x N.
// Hidden states are width x (tokens*N), sample-major along columns.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "refine/errors.hpp"

namespace refine {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

inline constexpr int kImageChannels = 3;
// Fill for masked pixels, in [0,1] pixel space (0 in model space).
inline constexpr double kSentinelFill = 0.5;

struct PatchGrid {
  int side = 32;
  int patch = 4;

  int grid() const { return side / patch; }
  int tokens() const { return grid() * grid(); }
  int pixels() const { return side * side; }
  int image_dim() const { return kImageChannels * pixels(); }
  int patch_pixels() const { return patch * patch; }
};

/// Images (ch*side^2 x N) -> patch tokens (ch*patch^2 x tokens*N).
template <typename T>
Mat<T> patchify(const Mat<T>& images, const PatchGrid& g, int channels) {
  require(images.rows() == channels * g.pixels(), ErrorKind::ShapeMismatch, "patchify: row count");
  const int n = static_cast<int>(images.cols());
  const int gp = g.grid();
  const int pp = g.patch_pixels();
  Mat<T> out(channels * pp, static_cast<Eigen::Index>(g.tokens()) * n);
  for (int s = 0; s < n; ++s) {
    for (int gy = 0; gy < gp; ++gy) {
      for (int gx = 0; gx < gp; ++gx) {
        const Eigen::Index col = static_cast<Eigen::Index>(s) * g.tokens() + gy * gp + gx;
        for (int c = 0; c < channels; ++c) {
          for (int py = 0; py < g.patch; ++py) {
            const int y = gy * g.patch + py;
            for (int px = 0; px < g.patch; ++px) {
              const int x = gx * g.patch + px;
              out(c * pp + py * g.patch + px, col) = images(c * g.pixels() + y * g.side + x, s);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Inverse of patchify.
template <typename T>
Mat<T> unpatchify(const Mat<T>& tokens, const PatchGrid& g, int channels) {
  const int pp = g.patch_pixels();
  require(tokens.rows() == channels * pp && tokens.cols() % g.tokens() == 0,
          ErrorKind::ShapeMismatch, "unpatchify: shape");
  const int n = static_cast<int>(tokens.cols() / g.tokens());
  const int gp = g.grid();
  Mat<T> out(channels * g.pixels(), n);
  for (int s = 0; s < n; ++s) {
    for (int gy = 0; gy < gp; ++gy) {
      for (int gx = 0; gx < gp; ++gx) {
        const Eigen::Index col = static_cast<Eigen::Index>(s) * g.tokens() + gy * gp + gx;
        for (int c = 0; c < channels; ++c) {
          for (int py = 0; py < g.patch; ++py) {
            const int y = gy * g.patch + py;
            for (int px = 0; px < g.patch; ++px) {
              const int x = gx * g.patch + px;
              out(c * g.pixels() + y * g.side + x, s) = tokens(c * pp + py * g.patch + px, col);
            }
          }
        }
      }
    }
  }
  return out;
}

/// [0,1] pixels -> [-1,1] model space.
template <typename Derived>
auto to_model_space(const Eigen::MatrixBase<Derived>& pixels) {
  return (pixels.array() * typename Derived::Scalar(2) - typename Derived::Scalar(1)).matrix();
}

/// [-1,1] model space -> [0,1] pixels, clamped.
template <typename Derived>
auto to_pixel_space(const Eigen::MatrixBase<Derived>& model) {
  using S = typename Derived::Scalar;
  return ((model.array() + S(1)) * S(0.5)).cwiseMax(S(0)).cwiseMin(S(1)).matrix();
}

/// Repeats a per-pixel mask (pixels x N) across image channels.
template <typename T>
Mat<T> broadcast_channels(const Mat<T>& per_pixel, int channels) {
  Mat<T> out(per_pixel.rows() * channels, per_pixel.cols());
  for (int c = 0; c < channels; ++c) out.middleRows(c * per_pixel.rows(), per_pixel.rows()) = per_pixel;
  return out;
}

}  // namespace refine
