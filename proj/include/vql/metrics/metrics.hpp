#pragma once

#include <vector>

#include "json.hpp"
#include "vql/core/box.hpp"
#include "vql/core/dataset.hpp"
#include "vql/core/track.hpp"
#include "vql/localize/localize.hpp"

namespace vql::metrics {

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

struct DetEvalResult {
  double ap = 0.0;  // mean over the threshold list
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar10 = 0.0;  // recall of the top 10 per frame, mean over the threshold list
};

/// Area under the precision envelope of a ranked hit list, with `num_gt`
/// ground truths. `hits[i]` says whether the i-th ranked prediction matched.
double average_precision(const std::vector<bool>& hits, int num_gt);

/// One ground-truth box per frame, ranked detections per frame. Detections are
/// pooled across frames in confidence order (ties: frame, then rank) and
/// greedily matched, one match per ground truth.
DetEvalResult detection_ap(const std::vector<std::vector<Detection>>& preds, const std::vector<Box>& gts,
                           const std::vector<double>& iou_thresholds = coco_thresholds());

struct TrackPrediction {
  ResponseTrack track;  // may be empty: a query answered with nothing
  double confidence = 0.0;
};

struct Vq2dOptions {
  double match_threshold = 0.25;  // on temporal / tube IoU for tAP and stAP
  double success_threshold = 0.0; // succ counts tube IoU strictly above this
  double recovery_iou = 0.5;      // per-frame box IoU for rec%
};

struct Vq2dEvalResult {
  double tap25 = 0.0;
  double stap25 = 0.0;
  double rec_percent = 0.0;
  double succ = 0.0;  // percent
};

/// preds[i] answers gts[i]. Queries are ranked by confidence (ties by index).
Vq2dEvalResult vq2d_metrics(const std::vector<TrackPrediction>& preds, const std::vector<ResponseTrack>& gts,
                            const Vq2dOptions& opts = {});

/// Fraction of timeline frames strictly after the ground-truth track and
/// before the query frame whose top score reaches `tau`. 0 when no such frame exists.
double fp_rate_on_negatives(const std::vector<localize::ScoreTimeline>& timelines,
                            const std::vector<const AnnotationRecord*>& records, double tau);

/// Joins predictions to annotation records by (video_id, query_index). A
/// prediction without a record, a duplicate or a record without a prediction
/// raises DataError.
Vq2dEvalResult evaluate_vq2d(const std::vector<localize::Prediction>& preds,
                             const std::vector<AnnotationRecord>& records, const Vq2dOptions& opts = {});

/// Every annotated frame of every record is evaluated; frames without
/// detections count as misses. Detections for unknown queries or frames raise DataError.
DetEvalResult evaluate_detections(const std::vector<localize::FrameDetections>& dets,
                                  const std::vector<AnnotationRecord>& records,
                                  const std::vector<double>& iou_thresholds = coco_thresholds());

nlohmann::json to_json(const DetEvalResult& r);
nlohmann::json to_json(const Vq2dEvalResult& r);

}  // namespace vql::metrics
