#pragma once

#include <optional>
#include <vector>

#include "vql/core/box.hpp"

namespace vql {

/// Temporally contiguous per-frame boxes covering frames [start, start + size()).
struct ResponseTrack {
  int start = 0;
  std::vector<Box> boxes;

  int size() const { return static_cast<int>(boxes.size()); }
  /// Last covered frame (inclusive).
  int last() const { return start + size() - 1; }
  bool covers(int frame) const { return frame >= start && frame <= last(); }
  std::optional<Box> box_at(int frame) const {
    if (!covers(frame)) return std::nullopt;
    return boxes[static_cast<std::size_t>(frame - start)];
  }

  bool operator==(const ResponseTrack&) const = default;
};

/// Throws DataError when the track is empty, starts before frame 0 or holds an invalid box.
void validate(const ResponseTrack& track);

/// IoU of the integer frame spans [start, last] of two tracks.
double temporal_iou(const ResponseTrack& p, const ResponseTrack& g);

/// Spatiotemporal IoU: summed per-frame intersections over summed per-frame
/// union areas across the temporal union of both tracks.
double tube_iou(const ResponseTrack& p, const ResponseTrack& g);

}  // namespace vql
