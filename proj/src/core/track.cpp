#include "vql/core/track.hpp"

#include <algorithm>
#include <string>

namespace vql {

void validate(const ResponseTrack& track) {
  if (track.boxes.empty()) throw DataError("response track has no boxes");
  if (track.start < 0) throw DataError("response track starts at negative frame " + std::to_string(track.start));
  for (const Box& b : track.boxes) {
    if (!is_valid(b)) throw DataError("response track holds an invalid box");
  }
}

double temporal_iou(const ResponseTrack& p, const ResponseTrack& g) {
  const int inter = std::min(p.last(), g.last()) - std::max(p.start, g.start) + 1;
  if (inter <= 0) return 0.0;
  const int uni = p.size() + g.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double tube_iou(const ResponseTrack& p, const ResponseTrack& g) {
  const int first = std::min(p.start, g.start);
  const int last = std::max(p.last(), g.last());
  double inter = 0.0;
  double uni = 0.0;
  for (int f = first; f <= last; ++f) {
    const auto a = p.box_at(f);
    const auto b = g.box_at(f);
    if (a && b) {
      inter += intersection_area(*a, *b);
      uni += union_area(*a, *b);
    } else if (a) {
      uni += a->area();
    } else if (b) {
      uni += b->area();
    }
  }
  if (inter <= 0.0) return 0.0;
  if (p == g) return 1.0;
  return inter / uni;
}

}  // namespace vql
