#include <algorithm>
#include <cmath>

#include "vql/features/backbone.hpp"

namespace vql::features {

std::vector<PoolTap> pool_taps(const Box& box, int height, int width, int grid, int samples) {
  if (!is_valid(box)) throw DataError("pool: invalid box");
  if (!clip_to_frame(box, width, height)) throw DataError("pool: box lies entirely outside the frame");
  std::vector<PoolTap> taps;
  taps.reserve(static_cast<std::size_t>(grid * grid * samples * samples * 4));
  const double cell_w = box.w / grid;
  const double cell_h = box.h / grid;
  const double w_sample = 1.0 / (samples * samples);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int cell = gy * grid + gx;
      for (int sy = 0; sy < samples; ++sy) {
        for (int sx = 0; sx < samples; ++sx) {
          // Continuous pixel coordinate; pixel k has its centre at k + 0.5.
          const double py = box.y + (gy + (sy + 0.5) / samples) * cell_h - 0.5;
          const double px = box.x + (gx + (sx + 0.5) / samples) * cell_w - 0.5;
          const double cy = std::clamp(py, 0.0, static_cast<double>(height - 1));
          const double cx = std::clamp(px, 0.0, static_cast<double>(width - 1));
          const int y0 = static_cast<int>(std::floor(cy));
          const int x0 = static_cast<int>(std::floor(cx));
          const int y1 = std::min(y0 + 1, height - 1);
          const int x1 = std::min(x0 + 1, width - 1);
          const double fy = cy - y0;
          const double fx = cx - x0;
          auto tap = [&](int y, int x, double w) {
            if (w != 0.0) taps.push_back({cell, static_cast<Eigen::Index>(y) * width + x, w * w_sample});
          };
          tap(y0, x0, (1.0 - fy) * (1.0 - fx));
          tap(y0, x1, (1.0 - fy) * fx);
          tap(y1, x0, fy * (1.0 - fx));
          tap(y1, x1, fy * fx);
        }
      }
    }
  }
  return taps;
}

}  // namespace vql::features
