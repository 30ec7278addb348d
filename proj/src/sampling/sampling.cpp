#include "vql/sampling/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace vql::sampling {
using nlohmann::json;

namespace {

bool passes_filters(const Box& b, int width, int height, const SamplerConfig& cfg) {
  const double area = b.area() / (static_cast<double>(width) * height);
  const double aspect = b.w / b.h;
  return area >= cfg.pufs_area_range.first && area <= cfg.pufs_area_range.second &&
         aspect >= cfg.pufs_aspect_range.first && aspect <= cfg.pufs_aspect_range.second;
}

TrainingPair pair_from_record(const AnnotationRecord& rec, int frame, std::optional<Box> gt, Provenance prov) {
  TrainingPair p;
  p.video_id = rec.video_id;
  p.query_index = rec.query_index;
  p.crop_frame = rec.query.crop_frame;
  p.crop_box = rec.query.crop_box;
  p.title = rec.query.title;
  p.frame = frame;
  p.gt_box = gt;
  p.provenance = prov;
  return p;
}

json range_json(const std::pair<double, double>& r) { return json::array({r.first, r.second}); }

std::pair<double, double> range_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(key + " must be [min, max]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kAnnotated: return "annotated";
    case Provenance::kPufs: return "pufs";
    case Provenance::kNufs: return "nufs";
  }
  return "?";
}

std::string TrainingPair::query_key() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s@%d:%.6g,%.6g,%.6g,%.6g", video_id.c_str(), crop_frame, crop_box.x, crop_box.y,
                crop_box.w, crop_box.h);
  return buf;
}

void validate(const SamplerConfig& cfg) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(cfg.bps_positive_prob)) throw ConfigError("bps_positive_prob must lie in [0, 1]");
  if (!unit(cfg.pufs_confidence_threshold)) throw ConfigError("pufs_confidence_threshold must lie in [0, 1]");
  if (!(cfg.pufs_fps > 0.0)) throw ConfigError("pufs_fps must be positive");
  if (!(cfg.pufs_multiplier >= 0.0)) throw ConfigError("pufs_multiplier must be >= 0");
  for (const auto& r : {cfg.pufs_area_range, cfg.pufs_aspect_range}) {
    if (!(r.first > 0.0 && r.first <= r.second)) throw ConfigError("P-UFS ranges must satisfy 0 < min <= max");
  }
}

json to_json(const SamplerConfig& cfg) {
  return {{"bps_enabled", cfg.bps_enabled},
          {"bps_positive_prob", cfg.bps_positive_prob},
          {"nufs_enabled", cfg.nufs_enabled},
          {"pufs_enabled", cfg.pufs_enabled},
          {"pufs_confidence_threshold", cfg.pufs_confidence_threshold},
          {"pufs_fps", cfg.pufs_fps},
          {"pufs_area_range", range_json(cfg.pufs_area_range)},
          {"pufs_aspect_range", range_json(cfg.pufs_aspect_range)},
          {"pufs_multiplier", cfg.pufs_multiplier},
          {"seed", cfg.seed}};
}

SamplerConfig sampler_config_from_json(const json& j) {
  SamplerConfig cfg;
  if (!j.is_object()) throw ConfigError("sampler config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "bps_enabled") cfg.bps_enabled = v.get<bool>();
      else if (key == "bps_positive_prob") cfg.bps_positive_prob = v.get<double>();
      else if (key == "nufs_enabled") cfg.nufs_enabled = v.get<bool>();
      else if (key == "pufs_enabled") cfg.pufs_enabled = v.get<bool>();
      else if (key == "pufs_confidence_threshold") cfg.pufs_confidence_threshold = v.get<double>();
      else if (key == "pufs_fps") cfg.pufs_fps = v.get<double>();
      else if (key == "pufs_area_range") cfg.pufs_area_range = range_from(v, key);
      else if (key == "pufs_aspect_range") cfg.pufs_aspect_range = range_from(v, key);
      else if (key == "pufs_multiplier") cfg.pufs_multiplier = v.get<double>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown sampler config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("sampler config key '" + key + "': " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

Eigen::VectorXd proposal_labels(const features::ProposalSet& pset, const std::optional<Box>& gt) {
  Eigen::VectorXd labels = Eigen::VectorXd::Zero(pset.size());
  if (!gt) return labels;
  for (int j = 0; j < pset.size(); ++j) labels(j) = iou(pset.proposals[j].box, *gt) >= kPositiveIou ? 1.0 : 0.0;
  return labels;
}

std::pair<features::ProposalSet, bool> bps_sample(const features::ProposalSet& pset, const Box& gt_box, double p,
                                                  Rng& rng) {
  features::validate(pset);
  if (rng.uniform() < p) return {pset, proposal_labels(pset, gt_box).sum() > 0.0};
  std::vector<int> keep;
  for (int j = 0; j < pset.size(); ++j) {
    if (iou(pset.proposals[j].box, gt_box) < kPositiveIou) keep.push_back(j);
  }
  features::ProposalSet out = features::select(pset, keep);
  if (out.proposals.empty()) {
    std::vector<int> pads;
    for (std::size_t k = 0; k < pset.reserve.size(); ++k) {
      if (iou(pset.reserve[k].box, gt_box) < kPositiveIou) pads.push_back(static_cast<int>(k));
    }
    if (pads.empty()) throw DataError("bps_sample: no non-overlapping reserve box to pad an emptied set");
    const int n = std::min<int>(static_cast<int>(pads.size()), pset.size());
    out.features.resize(n, pset.features.cols());
    for (int k = 0; k < n; ++k) {
      out.proposals.push_back(pset.reserve[static_cast<std::size_t>(pads[k])]);
      out.features.row(k) = pset.reserve_features.row(pads[k]);
    }
  }
  return {out, false};
}

std::vector<TrainingPair> nufs_sample(const VideoClip& clip, const AnnotationRecord& record, Rng& rng) {
  const int first = record.gt_track.last() + 1;
  const int last = std::min(record.query.query_frame, clip.size() - 1);
  std::vector<TrainingPair> out;
  if (last < first) return out;
  const int len = last - first + 1;
  std::vector<int> picks = rng.sample_without_replacement(len, std::min(len, record.gt_track.size()));
  std::sort(picks.begin(), picks.end());
  for (int k : picks) out.push_back(pair_from_record(record, first + k, std::nullopt, Provenance::kNufs));
  return out;
}

std::vector<PufsTrack> pufs_tracks(const VideoClip& clip, const std::vector<AnnotationRecord>& records,
                                   const SamplerConfig& cfg, const localize::TrackerConfig& tracker,
                                   const features::ProposalConfig& proposals) {
  validate(cfg);
  std::vector<PufsTrack> out;
  if (clip.size() < 2) return out;
  const int step = std::max(1, static_cast<int>(std::lround(clip.fps / cfg.pufs_fps)));
  std::vector<ResponseTrack> raw;
  for (int f = 0; f < clip.size(); f += step) {
    for (const auto& det : features::propose_heuristic(clip.frames[static_cast<std::size_t>(f)].image(), proposals)) {
      if (!(det.objectness > cfg.pufs_confidence_threshold)) continue;
      const bool known = std::any_of(raw.begin(), raw.end(), [&](const ResponseTrack& t) {
        const auto b = t.box_at(f);
        return b && iou(*b, det.box) >= kPositiveIou;
      });
      if (known) continue;
      raw.push_back(localize::track_bidirectional(clip, f, det.box, tracker, clip.size()));
    }
  }
  for (const ResponseTrack& t : raw) {
    const bool annotated = std::any_of(records.begin(), records.end(), [&](const AnnotationRecord& r) {
      for (int k = 0; k < t.size(); ++k) {
        const auto g = r.gt_track.box_at(t.start + k);
        if (g && iou(*g, t.boxes[static_cast<std::size_t>(k)]) >= kPositiveIou) return true;
      }
      return false;
    });
    if (annotated) continue;
    PufsTrack pt;
    pt.video_id = clip.video_id;
    pt.instance = static_cast<int>(out.size());
    for (int k = 0; k < t.size(); ++k) {
      const Box& b = t.boxes[static_cast<std::size_t>(k)];
      if (passes_filters(b, clip.width(), clip.height(), cfg)) pt.boxes.emplace_back(t.start + k, b);
    }
    if (pt.boxes.size() >= 2) out.push_back(std::move(pt));
  }
  return out;
}

std::vector<TrainingPair> pufs_pairs(const std::vector<PufsTrack>& tracks) {
  std::vector<TrainingPair> out;
  for (const PufsTrack& t : tracks) {
    for (const auto& [crop_frame, crop_box] : t.boxes) {
      for (const auto& [frame, box] : t.boxes) {
        if (frame == crop_frame) continue;
        TrainingPair p;
        p.video_id = t.video_id;
        p.query_index = t.instance;
        p.crop_frame = crop_frame;
        p.crop_box = crop_box;
        p.frame = frame;
        p.gt_box = box;
        p.provenance = Provenance::kPufs;
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

std::vector<TrainingPair> pufs_generate(const VideoClip& clip, const std::vector<AnnotationRecord>& records,
                                        const SamplerConfig& cfg) {
  return pufs_pairs(pufs_tracks(clip, records, cfg));
}

json pairs_document(const std::vector<TrainingPair>& pairs, const Dataset& data) {
  json doc = json::array();
  for (const TrainingPair& p : pairs) {
    const VideoEntry& v = find_video(data, p.video_id);
    json track = {{"start", p.frame}, {"boxes", json::array()}};
    if (p.gt_box) track["boxes"].push_back({p.gt_box->x, p.gt_box->y, p.gt_box->w, p.gt_box->h});
    json q = {{"frame_idx", p.frame},
              {"crop_frame", p.crop_frame},
              {"box", {p.crop_box.x, p.crop_box.y, p.crop_box.w, p.crop_box.h}},
              {"title", p.title ? json(*p.title) : json(nullptr)}};
    doc.push_back({{"video_id", p.video_id},
                   {"fps", v.clip.fps},
                   {"query", q},
                   {"response_track", track},
                   {"provenance", to_string(p.provenance)},
                   {"instance", p.query_index}});
  }
  return doc;
}

std::vector<TrainingPair> pairs_from_document(const json& doc) {
  if (!doc.is_array()) throw DataError("pairs document: expected a list of records");
  auto box_of = [](const json& b) { return Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}; };
  std::vector<TrainingPair> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& r = doc[i];
    try {
      TrainingPair p;
      p.video_id = r.at("video_id").get<std::string>();
      const json& q = r.at("query");
      p.frame = q.at("frame_idx").get<int>();
      p.crop_frame = q.at("crop_frame").get<int>();
      p.crop_box = box_of(q.at("box"));
      if (q.contains("title") && !q.at("title").is_null()) p.title = q.at("title").get<std::string>();
      const json& boxes = r.at("response_track").at("boxes");
      if (!boxes.empty()) p.gt_box = box_of(boxes.at(0));
      const std::string prov = r.at("provenance").get<std::string>();
      if (prov == "annotated") p.provenance = Provenance::kAnnotated;
      else if (prov == "pufs") p.provenance = Provenance::kPufs;
      else if (prov == "nufs") p.provenance = Provenance::kNufs;
      else throw DataError("unknown provenance '" + prov + "'");
      p.query_index = r.value("instance", 0);
      if (p.gt_box.has_value() == (p.provenance == Provenance::kNufs)) throw DataError("box presence contradicts provenance");
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw DataError("pairs document record " + std::to_string(i) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("pairs document record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

Image pair_crop(const Dataset& data, const TrainingPair& pair) {
  return extract_crop(find_video(data, pair.video_id).clip, pair.crop_frame, pair.crop_box);
}

std::vector<EpochItem> build_epoch(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                   const std::vector<TrainingPair>& pufs, features::FeatureCache& cache,
                                   const SamplerConfig& cfg, std::uint64_t epoch) {
  validate(cfg);
  if (records.empty()) throw DataError("build_epoch: no training records");
  Rng rng(derive_seed(cfg.seed, epoch));

  std::vector<TrainingPair> pairs;
  std::size_t annotated = 0;
  for (const AnnotationRecord* rec : records) {
    for (int k = 0; k < rec->gt_track.size(); ++k) {
      pairs.push_back(pair_from_record(*rec, rec->gt_track.start + k, rec->gt_track.boxes[static_cast<std::size_t>(k)],
                                       Provenance::kAnnotated));
      ++annotated;
    }
  }
  if (cfg.nufs_enabled) {
    for (const AnnotationRecord* rec : records) {
      for (auto& p : nufs_sample(find_video(data, rec->video_id).clip, *rec, rng)) pairs.push_back(std::move(p));
    }
  }
  if (cfg.pufs_enabled && !pufs.empty()) {
    const auto budget = static_cast<int>(std::floor(cfg.pufs_multiplier * static_cast<double>(annotated)));
    for (int k : rng.sample_without_replacement(static_cast<int>(pufs.size()), budget)) pairs.push_back(pufs[k]);
  }
  rng.shuffle(pairs);

  const double keep_prob = cfg.bps_enabled ? cfg.bps_positive_prob : 1.0;
  std::vector<EpochItem> out;
  out.reserve(pairs.size());
  for (TrainingPair& p : pairs) {
    const VideoClip& clip = find_video(data, p.video_id).clip;
    const features::ProposalSet& full = cache.get(clip.frames.at(static_cast<std::size_t>(p.frame)));
    EpochItem item;
    if (p.gt_box) {
      auto [pset, exists] = bps_sample(full, *p.gt_box, keep_prob, rng);
      item.proposals = std::move(pset);
      item.exists = exists;
    } else {
      item.proposals = full;
    }
    item.labels = proposal_labels(item.proposals, p.gt_box);
    item.pair = std::move(p);
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace vql::sampling
