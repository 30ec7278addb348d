#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vql/core/box.hpp"
#include "vql/core/errors.hpp"

namespace vql {

/// Planar image: `data` is channels x (height * width), pixel (y, x) at column y * width + x.
template <typename Scalar>
struct ImageT {
  using Planes = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int height = 0;
  int width = 0;
  Planes data;

  ImageT() = default;
  ImageT(int channels, int h, int w) : height(h), width(w), data(Planes::Zero(channels, h * w)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  bool empty() const { return height <= 0 || width <= 0 || data.size() == 0; }
  Eigen::Index index(int y, int x) const { return static_cast<Eigen::Index>(y) * width + x; }
  Scalar& at(int c, int y, int x) { return data(c, index(y, x)); }
  Scalar at(int c, int y, int x) const { return data(c, index(y, x)); }

  template <typename Other>
  ImageT<Other> cast() const {
    ImageT<Other> out;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    return out;
  }
};

using Image = ImageT<double>;

/// 8-bit interleaved RGB storage; the on-disk and in-memory frame representation.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3, row-major, interleaved

  bool operator==(const ImageU8&) const = default;
};

/// Normalizes bytes to reals in [0, 1].
template <typename Scalar = double>
ImageT<Scalar> to_real(const ImageU8& img) {
  ImageT<Scalar> out(3, img.height, img.width);
  const auto n = static_cast<Eigen::Index>(img.height) * img.width;
  for (Eigen::Index p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) out.data(c, p) = static_cast<Scalar>(img.rgb[3 * p + c]) / Scalar(255);
  }
  return out;
}

/// Rounds reals (clamped to [0, 1]) to bytes.
template <typename Scalar>
ImageU8 to_bytes(const ImageT<Scalar>& img) {
  if (img.channels() != 3) throw DataError("to_bytes expects a 3-channel image");
  ImageU8 out{img.height, img.width, std::vector<std::uint8_t>(3 * img.height * img.width)};
  const auto n = static_cast<Eigen::Index>(img.height) * img.width;
  for (Eigen::Index p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(img.data(c, p)), 0.0, 1.0);
      out.rgb[3 * p + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return out;
}

/// Integer-pixel crop of the box's covering pixels, clipped to the image.
template <typename Scalar>
ImageT<Scalar> crop(const ImageT<Scalar>& img, const Box& box) {
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(box.right())));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(box.bottom())));
  if (x1 <= x0 || y1 <= y0) throw DataError("crop box does not overlap the image");
  ImageT<Scalar> out(img.channels(), y1 - y0, x1 - x0);
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) out.at(c, y - y0, x - x0) = img.at(c, y, x);
    }
  }
  return out;
}

ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& img);

}  // namespace vql
