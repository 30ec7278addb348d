#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "vql/core/errors.hpp"

namespace vql {

/// Axis-aligned box in pixels, corner encoded. Covers the half-open
/// extent [x, x + w) x [y, y + h).
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  bool operator==(const Box&) const = default;
};

inline bool is_valid(const Box& b) {
  return std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.w) &&
         std::isfinite(b.h) && b.w > 0.0 && b.h > 0.0;
}

/// Constructs a box and enforces w > 0, h > 0 and finite coordinates.
inline Box make_box(double x, double y, double w, double h) {
  Box b{x, y, w, h};
  if (!is_valid(b)) {
    throw DataError("invalid box [" + std::to_string(x) + ", " + std::to_string(y) + ", " +
                    std::to_string(w) + ", " + std::to_string(h) + "]");
  }
  return b;
}

inline Box box_from_corners(double x0, double y0, double x1, double y1) {
  return make_box(x0, y0, x1 - x0, y1 - y0);
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

inline double union_area(const Box& a, const Box& b) {
  return a.area() + b.area() - intersection_area(a, b);
}

/// Analytic intersection over union; symmetric, in [0, 1].
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  if (a == b) return 1.0;
  return inter / (a.area() + b.area() - inter);
}

/// Intersection with [0, width) x [0, height); empty when fully outside.
inline std::optional<Box> clip_to_frame(const Box& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width);
  const double y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.right(), 0.0, width);
  const double y1 = std::clamp(b.bottom(), 0.0, height);
  if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) return std::nullopt;
  return Box{x0, y0, x1 - x0, y1 - y0};
}

inline std::array<double, 4> to_array(const Box& b) { return {b.x, b.y, b.w, b.h}; }

/// Box plus confidence, the per-frame (x, y, w, h, c) detector output.
struct Detection {
  Box box;
  double confidence = 0.0;
};

inline Detection make_detection(const Box& box, double confidence) {
  if (!is_valid(box)) throw DataError("detection box is invalid");
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw DataError("detection confidence outside [0, 1]: " + std::to_string(confidence));
  }
  return {box, confidence};
}

}  // namespace vql
