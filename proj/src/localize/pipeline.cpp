#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "vql/localize/localize.hpp"

namespace vql::localize {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

Box box_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("box must be [x, y, w, h]");
  return make_box(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw DataError(path.filename().string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void sort_ranked(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
}

}  // namespace

void validate(const PeakConfig& cfg) {
  if (cfg.window < 1 || cfg.window % 2 == 0) throw ConfigError("peak window must be an odd integer >= 1");
  if (!(cfg.threshold >= 0.0 && cfg.threshold <= 1.0)) throw ConfigError("peak threshold must lie in [0, 1]");
  if (cfg.stride < 0) throw ConfigError("detector stride must be >= 0");
}

void validate(const TrackerConfig& cfg) {
  if (!(cfg.similarity_threshold >= -1.0 && cfg.similarity_threshold <= 1.0)) {
    throw ConfigError("tracker similarity threshold must lie in [-1, 1]");
  }
  if (!(cfg.update_rate >= 0.0 && cfg.update_rate <= 1.0)) throw ConfigError("tracker update rate must lie in [0, 1]");
  if (!(cfg.search_radius >= 0.0 && cfg.search_radius <= 1.0)) throw ConfigError("tracker search radius must lie in [0, 1]");
  if (cfg.max_length < 0) throw ConfigError("tracker max length must be >= 0");
}

int detector_stride(double fps) { return std::max(1, static_cast<int>(std::lround(fps / 5.0))); }

HeadScorer::HeadScorer(const heads::HeadModel<double>& head, features::FeatureCache& cache, const VideoClip& clip,
                       Eigen::VectorXd query_feature, std::optional<Eigen::VectorXd> title_embedding)
    : head_(&head), cache_(&cache), clip_(&clip), query_(std::move(query_feature)), title_(std::move(title_embedding)) {}

std::vector<Detection> HeadScorer::detections(int frame) {
  const features::ProposalSet& pset = cache_->get(clip_->frames.at(static_cast<std::size_t>(frame)));
  const heads::HeadOutput out = head_->score(query_, title_ ? &*title_ : nullptr, pset);
  std::vector<Detection> dets;
  for (int j = 0; j < pset.size(); ++j) dets.push_back({out.boxes[j], out.scores(j)});
  sort_ranked(dets);
  return dets;
}

OracleScorer::OracleScorer(const VideoClip& clip, ResponseTrack gt, features::ProposalConfig cfg)
    : clip_(&clip), gt_(std::move(gt)), cfg_(cfg) {}

std::vector<Detection> OracleScorer::detections(int frame) {
  const Frame& f = clip_->frames.at(static_cast<std::size_t>(frame));
  const auto gt_box = gt_.box_at(frame);
  std::vector<Detection> dets;
  for (const auto& p : features::propose_heuristic(f.image(), cfg_)) {
    dets.push_back({p.box, gt_box ? iou(p.box, *gt_box) : 0.0});
  }
  sort_ranked(dets);
  return dets;
}

ScoreTimeline score_video(const VideoClip& clip, int query_frame, FrameScorer& scorer, int stride) {
  if (stride < 1) throw ConfigError("detector stride must be >= 1");
  if (clip.size() == 0) throw DataError("score_video: empty clip");
  const int end = std::clamp(query_frame, 1, clip.size());
  ScoreTimeline timeline;
  for (int f = 0; f < end; f += stride) {
    const auto dets = scorer.detections(f);
    if (dets.empty()) throw DataError("scorer returned no detections");
    timeline.push_back({f, dets.front()});
  }
  return timeline;
}

std::vector<double> smooth(const std::vector<double>& scores, int window) {
  const int n = static_cast<int>(scores.size());
  const int half = window / 2;
  std::vector<double> out(scores.size());
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
    double s = 0.0;
    for (int k = lo; k <= hi; ++k) s += scores[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(i)] = s / (hi - lo + 1);
  }
  return out;
}

std::size_t smoothed_peak_position(const std::vector<double>& scores, const PeakConfig& cfg) {
  validate(cfg);
  if (scores.empty()) throw DataError("most_recent_peak: empty timeline");
  const std::vector<double> s = smooth(scores, cfg.window);
  const std::size_t n = s.size();
  for (std::size_t i = n; i-- > 0;) {
    const bool left = i == 0 || s[i] >= s[i - 1];
    const bool right = i + 1 == n || s[i] >= s[i + 1];
    if (left && right && s[i] >= cfg.threshold) return i;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (s[i] >= s[best]) best = i;
  }
  return best;
}

Peak most_recent_peak(const ScoreTimeline& timeline, const PeakConfig& cfg) {
  std::vector<double> scores;
  for (const auto& e : timeline) scores.push_back(e.top.confidence);
  const std::size_t center = smoothed_peak_position(scores, cfg);
  const std::size_t half = static_cast<std::size_t>(cfg.window / 2);
  const std::size_t lo = center >= half ? center - half : 0;
  const std::size_t hi = std::min(timeline.size() - 1, center + half);
  std::size_t best = lo;
  for (std::size_t i = lo; i <= hi; ++i) {
    if (scores[i] >= scores[best]) best = i;
  }
  return Peak{best, timeline[best].frame, timeline[best].top};
}

Prediction vq2d_pipeline(const VideoClip& clip, const AnnotationRecord& record, FrameScorer& scorer,
                         const PeakConfig& peak_cfg, const TrackerConfig& tracker_cfg) {
  validate(peak_cfg);
  const int stride = peak_cfg.stride > 0 ? peak_cfg.stride : detector_stride(clip.fps);
  Prediction p;
  p.video_id = record.video_id;
  p.query_index = record.query_index;
  p.timeline = score_video(clip, record.query.query_frame, scorer, stride);
  p.peak = most_recent_peak(p.timeline, peak_cfg);
  const int end = std::max(1, std::min(record.query.query_frame, clip.size()));
  p.track = track_bidirectional(clip, p.peak.frame, p.peak.detection.box, tracker_cfg, end);
  return p;
}

json to_json(const Prediction& p) {
  json boxes = json::array();
  for (const Box& b : p.track.boxes) boxes.push_back(box_json(b));
  json timeline = json::array();
  for (const auto& e : p.timeline) timeline.push_back(json::array({e.frame, e.top.confidence}));
  return {{"video_id", p.video_id},
          {"query_index", p.query_index},
          {"response_track", {{"start", p.track.start}, {"boxes", boxes}}},
          {"peak", {{"frame", p.peak.frame}, {"confidence", p.peak.detection.confidence},
                    {"box", box_json(p.peak.detection.box)}}},
          {"timeline", timeline}};
}

Prediction prediction_from_json(const json& j) {
  try {
    Prediction p;
    p.video_id = j.at("video_id").get<std::string>();
    p.query_index = j.at("query_index").get<int>();
    p.track.start = j.at("response_track").at("start").get<int>();
    for (const json& b : j.at("response_track").at("boxes")) p.track.boxes.push_back(box_from(b));
    validate(p.track);
    const json& peak = j.at("peak");
    p.peak.frame = peak.at("frame").get<int>();
    p.peak.detection.confidence = peak.at("confidence").get<double>();
    p.peak.detection.box = peak.contains("box") ? box_from(peak.at("box")) : p.track.boxes.front();
    for (const json& e : j.at("timeline")) {
      if (!e.is_array() || e.size() != 2) throw DataError("timeline entries must be [frame, score]");
      TimelineEntry t;
      t.frame = e[0].get<int>();
      t.top.confidence = e[1].get<double>();
      if (t.frame == p.peak.frame) p.peak.position = p.timeline.size();
      p.timeline.push_back(t);
    }
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed prediction: ") + e.what());
  }
}

void write_predictions(const fs::path& path, const std::vector<Prediction>& preds) {
  json doc = json::array();
  for (const auto& p : preds) doc.push_back(to_json(p));
  write_text(path, doc.dump(1) + "\n");
}

std::vector<Prediction> read_predictions(const fs::path& path) {
  const json doc = read_json(path);
  if (!doc.is_array()) throw DataError(path.filename().string() + ": expected a list of predictions");
  std::vector<Prediction> out;
  for (const json& j : doc) out.push_back(prediction_from_json(j));
  return out;
}

void write_detections(const fs::path& path, const std::vector<FrameDetections>& dets) {
  json doc = json::array();
  for (const auto& fd : dets) {
    json list = json::array();
    for (const auto& d : fd.detections) list.push_back({d.box.x, d.box.y, d.box.w, d.box.h, d.confidence});
    doc.push_back({{"video_id", fd.video_id}, {"query_index", fd.query_index}, {"frame", fd.frame}, {"detections", list}});
  }
  write_text(path, doc.dump(1) + "\n");
}

std::vector<FrameDetections> read_detections(const fs::path& path) {
  const json doc = read_json(path);
  if (!doc.is_array()) throw DataError(path.filename().string() + ": expected a list");
  std::vector<FrameDetections> out;
  if (!doc.empty() && doc[0].contains("response_track")) {
    for (const AnnotationRecord& rec : read_annotations(path)) {
      for (int k = 0; k < rec.gt_track.size(); ++k) {
        out.push_back({rec.video_id, rec.query_index, rec.gt_track.start + k,
                       {Detection{rec.gt_track.boxes[static_cast<std::size_t>(k)], 1.0}}});
      }
    }
    return out;
  }
  try {
    for (const json& j : doc) {
      FrameDetections fd;
      fd.video_id = j.at("video_id").get<std::string>();
      fd.query_index = j.at("query_index").get<int>();
      fd.frame = j.at("frame").get<int>();
      for (const json& d : j.at("detections")) {
        if (!d.is_array() || d.size() != 5) throw DataError("detections must be [x, y, w, h, confidence]");
        fd.detections.push_back(make_detection(
            make_box(d[0].get<double>(), d[1].get<double>(), d[2].get<double>(), d[3].get<double>()),
            d[4].get<double>()));
      }
      out.push_back(std::move(fd));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed detections: ") + e.what());
  }
  return out;
}

}  // namespace vql::localize
