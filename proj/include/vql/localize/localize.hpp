#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vql/core/dataset.hpp"
#include "vql/core/track.hpp"
#include "vql/features/proposals.hpp"
#include "vql/heads/heads.hpp"

namespace vql::localize {

struct PeakConfig {
  int window = 5;          // centered moving average width, odd
  double threshold = 0.6;  // tau
  int stride = 0;          // detector stride in frames; 0 derives it from the clip fps
};

struct TrackerConfig {
  double similarity_threshold = 0.4;  // theta, on normalized cross-correlation
  double update_rate = 0.1;           // alpha
  double search_radius = 0.06;        // fraction of the larger frame side
  int max_length = 0;                 // 0 for unbounded
};

void validate(const PeakConfig& cfg);
void validate(const TrackerConfig& cfg);

/// Frames between detector runs: round(fps / 5), at least 1.
int detector_stride(double fps);

struct TimelineEntry {
  int frame = 0;
  Detection top;
};
using ScoreTimeline = std::vector<TimelineEntry>;

/// Ranked detections of single frames of one clip for one query.
class FrameScorer {
 public:
  virtual ~FrameScorer() = default;
  /// Detections on frame `frame`, sorted by confidence (highest first), never empty.
  virtual std::vector<Detection> detections(int frame) = 0;
};

/// Scores frames with a trained head over cached proposal sets.
class HeadScorer : public FrameScorer {
 public:
  HeadScorer(const heads::HeadModel<double>& head, features::FeatureCache& cache, const VideoClip& clip,
             Eigen::VectorXd query_feature, std::optional<Eigen::VectorXd> title_embedding);
  std::vector<Detection> detections(int frame) override;

 private:
  const heads::HeadModel<double>* head_;
  features::FeatureCache* cache_;
  const VideoClip* clip_;
  Eigen::VectorXd query_;
  std::optional<Eigen::VectorXd> title_;
};

/// Ground-truth oracle: each heuristic proposal scores its IoU with the annotated
/// box on that frame, or 0 where the track does not cover the frame.
class OracleScorer : public FrameScorer {
 public:
  OracleScorer(const VideoClip& clip, ResponseTrack gt, features::ProposalConfig cfg = {});
  std::vector<Detection> detections(int frame) override;

 private:
  const VideoClip* clip_;
  ResponseTrack gt_;
  features::ProposalConfig cfg_;
};

/// Top-1 detections on frames 0, stride, 2 stride, ... strictly before `query_frame`.
ScoreTimeline score_video(const VideoClip& clip, int query_frame, FrameScorer& scorer, int stride);

struct Peak {
  std::size_t position = 0;  // index into the timeline
  int frame = 0;
  Detection detection;
};

/// Latest local maximum of the smoothed confidences that reaches the threshold,
/// else the global maximum. The chosen point then moves to the raw maximum
/// inside its smoothing window (latest on ties).
Peak most_recent_peak(const ScoreTimeline& timeline, const PeakConfig& cfg);

/// Position of the smoothed peak before the snap to the raw maximum.
std::size_t smoothed_peak_position(const std::vector<double>& scores, const PeakConfig& cfg);

/// Centered moving average, truncated at the ends.
std::vector<double> smooth(const std::vector<double>& scores, int window);

/// Normalized cross-correlation tracking forward and backward from the seed.
/// Frames at or after `end_frame` are never visited.
ResponseTrack track_bidirectional(const VideoClip& clip, int seed_frame, const Box& seed_box, const TrackerConfig& cfg,
                                  int end_frame);

struct Prediction {
  std::string video_id;
  int query_index = 0;
  ResponseTrack track;
  Peak peak;
  ScoreTimeline timeline;
};

Prediction vq2d_pipeline(const VideoClip& clip, const AnnotationRecord& record, FrameScorer& scorer,
                         const PeakConfig& peak_cfg, const TrackerConfig& tracker_cfg);

nlohmann::json to_json(const Prediction& p);
Prediction prediction_from_json(const nlohmann::json& j);
void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

/// Ranked detections on the annotated frames of one query.
struct FrameDetections {
  std::string video_id;
  int query_index = 0;
  int frame = 0;
  std::vector<Detection> detections;
};

void write_detections(const std::filesystem::path& path, const std::vector<FrameDetections>& dets);
/// Reads either a detections file or an annotations document; the latter yields
/// each annotated box as a single detection with confidence 1.
std::vector<FrameDetections> read_detections(const std::filesystem::path& path);

}  // namespace vql::localize
