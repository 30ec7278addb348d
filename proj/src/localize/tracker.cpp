#include <algorithm>
#include <cmath>

#include "vql/localize/localize.hpp"

namespace vql::localize {
namespace {

struct Window {
  int x = 0;
  int y = 0;
  int w = 1;
  int h = 1;
};

/// Integer pixel window covering `box` plus a context margin, shifted (not shrunk)
/// to lie inside the frame. The margin keeps the object's outline in the
/// template; a solid object filling its box would otherwise give a flat patch.
Window window_of(const Box& box, int width, int height) {
  const int margin = std::max(2, static_cast<int>(std::lround(0.25 * std::min(box.w, box.h))));
  Window win;
  win.w = std::clamp(static_cast<int>(std::lround(box.w)) + 2 * margin, 1, width);
  win.h = std::clamp(static_cast<int>(std::lround(box.h)) + 2 * margin, 1, height);
  win.x = std::clamp(static_cast<int>(std::lround(box.x)) - margin, 0, width - win.w);
  win.y = std::clamp(static_cast<int>(std::lround(box.y)) - margin, 0, height - win.h);
  return win;
}

/// RGB patch with each channel's mean removed, scaled to unit norm; all zeros for
/// a flat patch. A single mean over all channels would leave the background's
/// colour offsets in the vector and make every background patch look alike.
Eigen::VectorXd patch(const ImageU8& img, const Window& win) {
  Eigen::VectorXd v(3 * win.w * win.h);
  Eigen::Index k = 0;
  for (int y = win.y; y < win.y + win.h; ++y) {
    const std::uint8_t* row = img.rgb.data() + (static_cast<std::size_t>(y) * img.width + win.x) * 3;
    for (int i = 0; i < 3 * win.w; ++i) v(k++) = row[i];
  }
  const Eigen::Index pixels = v.size() / 3;
  auto channels = Eigen::Map<Eigen::Matrix<double, 3, Eigen::Dynamic>>(v.data(), 3, pixels);
  channels.colwise() -= channels.rowwise().mean();
  const double n = v.norm();
  if (n > 1e-9) {
    v /= n;
  } else {
    v.setZero();
  }
  return v;
}

/// Follows the template through frames seed+step, seed+2 step, ... while it matches.
void follow(const VideoClip& clip, int seed_frame, const Box& seed_box, const TrackerConfig& cfg, int step,
            int end_frame, int budget, std::vector<std::pair<int, Box>>& out) {
  const int width = clip.width(), height = clip.height();
  const Window seed = window_of(seed_box, width, height);
  Eigen::VectorXd tmpl = patch(clip.frames[static_cast<std::size_t>(seed_frame)].pixels, seed);
  const int radius = static_cast<int>(std::ceil(cfg.search_radius * std::max(width, height)));
  Window cur = seed;
  for (int f = seed_frame + step; f >= 0 && f < end_frame && budget > 0; f += step, --budget) {
    const ImageU8& img = clip.frames[static_cast<std::size_t>(f)].pixels;
    double best = -2.0;
    Window best_win = cur;
    int best_dist = 0;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        Window cand{cur.x + dx, cur.y + dy, cur.w, cur.h};
        if (cand.x < 0 || cand.y < 0 || cand.x + cand.w > width || cand.y + cand.h > height) continue;
        const double sim = tmpl.dot(patch(img, cand));
        const int dist = dx * dx + dy * dy;
        if (sim > best || (sim == best && dist < best_dist)) {
          best = sim;
          best_win = cand;
          best_dist = dist;
        }
      }
    }
    if (best < cfg.similarity_threshold) break;
    cur = best_win;
    const Box moved{seed_box.x + (cur.x - seed.x), seed_box.y + (cur.y - seed.y), seed_box.w, seed_box.h};
    const auto clipped = clip_to_frame(moved, width, height);
    if (!clipped) break;
    out.emplace_back(f, *clipped);
    tmpl = (1.0 - cfg.update_rate) * tmpl + cfg.update_rate * patch(img, cur);
    const double n = tmpl.norm();
    if (n > 1e-9) tmpl /= n;
  }
}

}  // namespace

ResponseTrack track_bidirectional(const VideoClip& clip, int seed_frame, const Box& seed_box, const TrackerConfig& cfg,
                                  int end_frame) {
  validate(cfg);
  if (!is_valid(seed_box) || !clip_to_frame(seed_box, clip.width(), clip.height())) {
    throw DataError("tracker: degenerate seed box");
  }
  end_frame = std::min(end_frame, clip.size());
  if (seed_frame < 0 || seed_frame >= end_frame) throw DataError("tracker: seed frame outside the tracked range");
  const int budget = cfg.max_length > 0 ? cfg.max_length - 1 : clip.size();

  std::vector<std::pair<int, Box>> backward, forward;
  follow(clip, seed_frame, seed_box, cfg, -1, end_frame, budget, backward);
  const int remaining = cfg.max_length > 0 ? budget - static_cast<int>(backward.size()) : budget;
  follow(clip, seed_frame, seed_box, cfg, +1, end_frame, remaining, forward);

  ResponseTrack track;
  track.start = backward.empty() ? seed_frame : backward.back().first;
  for (auto it = backward.rbegin(); it != backward.rend(); ++it) track.boxes.push_back(it->second);
  track.boxes.push_back(seed_box);
  for (const auto& [_, b] : forward) track.boxes.push_back(b);
  return track;
}

}  // namespace vql::localize
