#include "vql/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "vql/core/errors.hpp"

namespace vql::metrics {
using nlohmann::json;

namespace {

using QueryId = std::pair<std::string, int>;

/// Indices of `conf` in descending order; equal values keep their input order.
std::vector<std::size_t> rank_desc(const std::vector<double>& conf) {
  std::vector<std::size_t> order(conf.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
  return order;
}

double box_iou_at(const ResponseTrack& t, int frame, const Box& gt) {
  const auto b = t.box_at(frame);
  return b ? iou(*b, gt) : 0.0;
}

}  // namespace

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double average_precision(const std::vector<bool>& hits, int num_gt) {
  if (num_gt <= 0) throw DataError("average precision needs at least one ground truth");
  const std::size_t n = hits.size();
  std::vector<double> precision(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += hits[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Envelope: best precision at any equal or higher recall.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i]) ap += precision[i];
  }
  return ap / num_gt;
}

DetEvalResult detection_ap(const std::vector<std::vector<Detection>>& preds, const std::vector<Box>& gts,
                           const std::vector<double>& iou_thresholds) {
  if (gts.empty()) throw DataError("detection AP: empty ground truth");
  if (preds.size() != gts.size()) throw DataError("detection AP: prediction and ground-truth frame counts differ");
  if (iou_thresholds.empty()) throw ConfigError("detection AP: no IoU thresholds");

  struct Pooled {
    std::size_t frame;
    double iou;
  };
  std::vector<Pooled> pooled;
  std::vector<double> conf;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    for (const Detection& d : preds[f]) {
      pooled.push_back({f, iou(d.box, gts[f])});
      conf.push_back(d.confidence);
    }
  }
  const std::vector<std::size_t> order = rank_desc(conf);
  const int num_gt = static_cast<int>(gts.size());

  auto ap_at = [&](double t) {
    std::vector<bool> matched(gts.size(), false), hits;
    for (std::size_t k : order) {
      const Pooled& p = pooled[k];
      const bool hit = !matched[p.frame] && p.iou >= t;
      if (hit) matched[p.frame] = true;
      hits.push_back(hit);
    }
    return average_precision(hits, num_gt);
  };
  auto ar10_at = [&](double t) {
    int found = 0;
    for (std::size_t f = 0; f < preds.size(); ++f) {
      const std::vector<std::size_t> top = rank_desc([&] {
        std::vector<double> c;
        for (const Detection& d : preds[f]) c.push_back(d.confidence);
        return c;
      }());
      for (std::size_t r = 0; r < top.size() && r < 10; ++r) {
        if (iou(preds[f][top[r]].box, gts[f]) >= t) {
          ++found;
          break;
        }
      }
    }
    return static_cast<double>(found) / num_gt;
  };

  DetEvalResult out;
  for (double t : iou_thresholds) {
    out.ap += ap_at(t);
    out.ar10 += ar10_at(t);
  }
  out.ap /= static_cast<double>(iou_thresholds.size());
  out.ar10 /= static_cast<double>(iou_thresholds.size());
  out.ap50 = ap_at(0.5);
  out.ap75 = ap_at(0.75);
  return out;
}

Vq2dEvalResult vq2d_metrics(const std::vector<TrackPrediction>& preds, const std::vector<ResponseTrack>& gts,
                            const Vq2dOptions& opts) {
  if (gts.empty()) throw DataError("VQ2D metrics: no queries");
  if (preds.size() != gts.size()) throw DataError("VQ2D metrics: prediction and query counts differ");
  std::vector<double> conf, tiou(gts.size(), 0.0), stiou(gts.size(), 0.0);
  Vq2dEvalResult out;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const ResponseTrack& p = preds[i].track;
    const ResponseTrack& g = gts[i];
    conf.push_back(preds[i].confidence);
    if (p.size() > 0) {
      tiou[i] = temporal_iou(p, g);
      stiou[i] = tube_iou(p, g);
    }
    if (stiou[i] > opts.success_threshold) out.succ += 1.0;
    int recovered = 0;
    for (int f = g.start; f <= g.last(); ++f) {
      if (box_iou_at(p, f, *g.box_at(f)) >= opts.recovery_iou) ++recovered;
    }
    out.rec_percent += static_cast<double>(recovered) / g.size();
  }
  const auto order = rank_desc(conf);
  std::vector<bool> thits, sthits;
  for (std::size_t k : order) {
    thits.push_back(tiou[k] >= opts.match_threshold);
    sthits.push_back(stiou[k] >= opts.match_threshold);
  }
  const int n = static_cast<int>(gts.size());
  out.tap25 = average_precision(thits, n);
  out.stap25 = average_precision(sthits, n);
  out.succ = 100.0 * out.succ / n;
  out.rec_percent = 100.0 * out.rec_percent / n;
  return out;
}

double fp_rate_on_negatives(const std::vector<localize::ScoreTimeline>& timelines,
                            const std::vector<const AnnotationRecord*>& records, double tau) {
  if (timelines.size() != records.size()) throw DataError("fp rate: timeline and record counts differ");
  long negatives = 0, positives = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int end = records[i]->gt_track.last();
    const int query = records[i]->query.query_frame;
    for (const auto& e : timelines[i]) {
      if (e.frame <= end || e.frame >= query) continue;
      ++negatives;
      if (e.top.confidence >= tau) ++positives;
    }
  }
  return negatives == 0 ? 0.0 : static_cast<double>(positives) / static_cast<double>(negatives);
}

Vq2dEvalResult evaluate_vq2d(const std::vector<localize::Prediction>& preds,
                             const std::vector<AnnotationRecord>& records, const Vq2dOptions& opts) {
  std::map<QueryId, const localize::Prediction*> by_id;
  for (const auto& p : preds) {
    if (!by_id.emplace(QueryId{p.video_id, p.query_index}, &p).second) {
      throw DataError("duplicate prediction for " + p.video_id + "#" + std::to_string(p.query_index));
    }
  }
  std::vector<TrackPrediction> tp;
  std::vector<ResponseTrack> gts;
  for (const auto& r : records) {
    const auto it = by_id.find({r.video_id, r.query_index});
    if (it == by_id.end()) throw DataError("no prediction for query " + r.video_id + "#" + std::to_string(r.query_index));
    tp.push_back({it->second->track, it->second->peak.detection.confidence});
    gts.push_back(r.gt_track);
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    const auto& id = by_id.begin()->first;
    throw DataError("prediction for unknown query " + id.first + "#" + std::to_string(id.second));
  }
  return vq2d_metrics(tp, gts, opts);
}

DetEvalResult evaluate_detections(const std::vector<localize::FrameDetections>& dets,
                                  const std::vector<AnnotationRecord>& records,
                                  const std::vector<double>& iou_thresholds) {
  using FrameId = std::tuple<std::string, int, int>;
  std::map<FrameId, std::size_t> slot;
  std::vector<std::vector<Detection>> preds;
  std::vector<Box> gts;
  for (const auto& r : records) {
    for (int f = r.gt_track.start; f <= r.gt_track.last(); ++f) {
      slot[{r.video_id, r.query_index, f}] = gts.size();
      gts.push_back(*r.gt_track.box_at(f));
      preds.emplace_back();
    }
  }
  for (const auto& d : dets) {
    const auto it = slot.find({d.video_id, d.query_index, d.frame});
    if (it == slot.end()) {
      throw DataError("detections for unannotated frame " + d.video_id + "#" + std::to_string(d.query_index) + " @" +
                      std::to_string(d.frame));
    }
    auto& out = preds[it->second];
    out.insert(out.end(), d.detections.begin(), d.detections.end());
  }
  return detection_ap(preds, gts, iou_thresholds);
}

json to_json(const DetEvalResult& r) {
  return {{"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"AR@10", r.ar10}};
}

json to_json(const Vq2dEvalResult& r) {
  return {{"tAP25", r.tap25}, {"stAP25", r.stap25}, {"rec%", r.rec_percent}, {"Succ", r.succ}};
}

}  // namespace vql::metrics
