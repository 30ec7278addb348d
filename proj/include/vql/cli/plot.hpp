#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "vql/core/image.hpp"
#include "vql/core/track.hpp"
#include "vql/localize/localize.hpp"

namespace vql::cli {

/// Plot frame: frames map linearly onto [x0, x1], scores [0, 1] onto [y1, y0].
struct PlotLayout {
  int width = 640;
  int height = 240;
  int x0 = 40, x1 = 620;  // plot area, inclusive pixel columns
  int y0 = 10, y1 = 210;  // top and bottom pixel rows

  /// Pixel column of `frame` on an axis spanning [first, last].
  int column(double frame, int first, int last) const;
  int row(double score) const;
};

struct TimelinePlot {
  ImageU8 image;
  nlohmann::json metadata;  // axis range, GT span and peak in frames and pixels
};

/// Line plot of the top-1 score per sampled frame over frames [0, last_frame],
/// the ground-truth span shaded and the peak marked.
TimelinePlot render_timeline(const localize::ScoreTimeline& timeline, const ResponseTrack& gt,
                             std::optional<int> peak_frame, int last_frame, const PlotLayout& layout = {});

/// "frame,score" rows, one per timeline entry.
std::string timeline_csv(const localize::ScoreTimeline& timeline);

}  // namespace vql::cli
