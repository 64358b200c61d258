#include "refine/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "refine/errors.hpp"

namespace refine {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const RawImage& img) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::ShapeMismatch, "png: 1 or 3 channels");
  require(img.data.size() == static_cast<size_t>(img.width) * img.height * img.channels, ErrorKind::ShapeMismatch,
          "png: buffer size");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, ErrorKind::IOFailure, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IOFailure, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IOFailure, "libpng write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.data.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RawImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, ErrorKind::IOFailure, "cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::IOFailure, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::IOFailure, "libpng read failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  RawImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::IOFailure, "unsupported png layout in " + path.string());
  }
  img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  img.data.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.data.data() + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

RawImage to_raw(const Eigen::VectorXf& chw, int side, int channels) {
  const int pixels = side * side;
  require(chw.size() == static_cast<Eigen::Index>(pixels) * channels, ErrorKind::ShapeMismatch, "to_raw: size");
  RawImage img{side, side, channels, std::vector<std::uint8_t>(static_cast<size_t>(pixels) * channels)};
  for (int p = 0; p < pixels; ++p) {
    for (int c = 0; c < channels; ++c) {
      const float v = std::clamp(chw[c * pixels + p], 0.0f, 1.0f);
      img.data[static_cast<size_t>(p) * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return img;
}

Eigen::VectorXf from_raw(const RawImage& img) {
  const int pixels = img.width * img.height;
  Eigen::VectorXf out(static_cast<Eigen::Index>(pixels) * img.channels);
  for (int p = 0; p < pixels; ++p)
    for (int c = 0; c < img.channels; ++c)
      out[c * pixels + p] = static_cast<float>(img.data[static_cast<size_t>(p) * img.channels + c]) / 255.0f;
  return out;
}

}  // namespace refine
