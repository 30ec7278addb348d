#include "vql/cli/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace vql::cli {
using nlohmann::json;

namespace {

using Rgb = std::array<std::uint8_t, 3>;
constexpr Rgb kBackground{255, 255, 255};
constexpr Rgb kAxis{0, 0, 0};
constexpr Rgb kGtShade{200, 240, 200};
constexpr Rgb kLine{30, 60, 200};
constexpr Rgb kPeak{220, 30, 30};

class Canvas {
 public:
  Canvas(int w, int h) : img_{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * w * h))} {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) put(x, y, kBackground);
    }
  }

  void put(int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    const std::size_t p = 3 * (static_cast<std::size_t>(y) * img_.width + x);
    std::copy(c.begin(), c.end(), img_.rgb.begin() + static_cast<std::ptrdiff_t>(p));
  }

  void fill(int xa, int ya, int xb, int yb, const Rgb& c) {
    for (int y = std::min(ya, yb); y <= std::max(ya, yb); ++y) {
      for (int x = std::min(xa, xb); x <= std::max(xa, xb); ++x) put(x, y, c);
    }
  }

  void line(int xa, int ya, int xb, int yb, const Rgb& c) {
    const int steps = std::max({std::abs(xb - xa), std::abs(yb - ya), 1});
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      put(static_cast<int>(std::lround(xa + t * (xb - xa))), static_cast<int>(std::lround(ya + t * (yb - ya))), c);
    }
  }

  ImageU8 take() { return std::move(img_); }

 private:
  ImageU8 img_;
};

}  // namespace

int PlotLayout::column(double frame, int first, int last) const {
  if (last <= first) return x0;
  return x0 + static_cast<int>(std::lround((frame - first) / (last - first) * (x1 - x0)));
}

int PlotLayout::row(double score) const {
  return y1 - static_cast<int>(std::lround(std::clamp(score, 0.0, 1.0) * (y1 - y0)));
}

TimelinePlot render_timeline(const localize::ScoreTimeline& timeline, const ResponseTrack& gt,
                             std::optional<int> peak_frame, int last_frame, const PlotLayout& layout) {
  Canvas canvas(layout.width, layout.height);
  const int gx0 = layout.column(gt.start, 0, last_frame);
  const int gx1 = layout.column(gt.last(), 0, last_frame);
  canvas.fill(gx0, layout.y0, gx1, layout.y1, kGtShade);
  canvas.line(layout.x0, layout.y1, layout.x1, layout.y1, kAxis);
  canvas.line(layout.x0, layout.y0, layout.x0, layout.y1, kAxis);
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = layout.row(tick / 4.0);
    canvas.line(layout.x0 - 4, y, layout.x0 - 1, y, kAxis);
  }
  for (std::size_t i = 1; i < timeline.size(); ++i) {
    canvas.line(layout.column(timeline[i - 1].frame, 0, last_frame), layout.row(timeline[i - 1].top.confidence),
                layout.column(timeline[i].frame, 0, last_frame), layout.row(timeline[i].top.confidence), kLine);
  }
  json meta = {{"width", layout.width},
               {"height", layout.height},
               {"plot_area", {{"x0", layout.x0}, {"x1", layout.x1}, {"y0", layout.y0}, {"y1", layout.y1}}},
               {"frame_axis", {0, last_frame}},
               {"gt_span", {{"frames", {gt.start, gt.last()}}, {"pixels", {gx0, gx1}}}},
               {"points", timeline.size()},
               {"colors",
                {{"gt_shade", kGtShade}, {"line", kLine}, {"peak", kPeak}, {"axis", kAxis}, {"background", kBackground}}}};
  if (peak_frame) {
    double score = 0.0;
    for (const auto& e : timeline) {
      if (e.frame == *peak_frame) score = e.top.confidence;
    }
    const int px = layout.column(*peak_frame, 0, last_frame);
    const int py = layout.row(score);
    for (int y = layout.y0; y <= layout.y1; y += 4) canvas.put(px, y, kPeak);
    canvas.fill(px - 2, py - 2, px + 2, py + 2, kPeak);
    meta["peak"] = {{"frame", *peak_frame}, {"score", score}, {"pixel", {px, py}}};
  }
  return {canvas.take(), meta};
}

std::string timeline_csv(const localize::ScoreTimeline& timeline) {
  std::ostringstream os;
  os << "frame,score\n";
  char buf[64];
  for (const auto& e : timeline) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", e.frame, e.top.confidence);
    os << buf;
  }
  return os.str();
}

}  // namespace vql::cli
