#include "vql/cli/recipes.hpp"

#include <map>
#include <sstream>

namespace vql::cli {
using nlohmann::json;

Split split_records(const Dataset& data) {
  Split s;
  for (std::size_t v = 0; v < data.size(); ++v) {
    for (const auto& r : data[v].records) (v % 4 == 3 ? s.test : s.train).push_back(&r);
  }
  return s;
}

std::vector<const AnnotationRecord*> select_split(const Dataset& data, const std::string& name) {
  Split s = split_records(data);
  if (name == "train") return s.train;
  if (name == "test") return s.test;
  if (name == "all") {
    s.train.insert(s.train.end(), s.test.begin(), s.test.end());
    return s.train;
  }
  throw ConfigError("unknown split '" + name + "' (expected train, test or all)");
}

void validate(const InferenceConfig& cfg) {
  localize::validate(cfg.peak);
  localize::validate(cfg.tracker);
  if (!(cfg.fp_threshold >= 0.0 && cfg.fp_threshold <= 1.0)) throw ConfigError("fp_threshold must lie in [0, 1]");
}

json to_json(const InferenceConfig& cfg) {
  return {{"peak", {{"window", cfg.peak.window}, {"threshold", cfg.peak.threshold}, {"stride", cfg.peak.stride}}},
          {"tracker",
           {{"similarity_threshold", cfg.tracker.similarity_threshold},
            {"update_rate", cfg.tracker.update_rate},
            {"search_radius", cfg.tracker.search_radius},
            {"max_length", cfg.tracker.max_length}}},
          {"fp_threshold", cfg.fp_threshold}};
}

InferenceConfig inference_config_from_json(const json& j) {
  InferenceConfig cfg;
  auto unknown = [](const std::string& key) { return ConfigError("unknown config key '" + key + "'"); };
  if (!j.is_object()) throw ConfigError("inference config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "peak") {
        for (const auto& [k, x] : v.items()) {
          if (k == "window") cfg.peak.window = x.get<int>();
          else if (k == "threshold") cfg.peak.threshold = x.get<double>();
          else if (k == "stride") cfg.peak.stride = x.get<int>();
          else throw unknown("peak." + k);
        }
      } else if (key == "tracker") {
        for (const auto& [k, x] : v.items()) {
          if (k == "similarity_threshold") cfg.tracker.similarity_threshold = x.get<double>();
          else if (k == "update_rate") cfg.tracker.update_rate = x.get<double>();
          else if (k == "search_radius") cfg.tracker.search_radius = x.get<double>();
          else if (k == "max_length") cfg.tracker.max_length = x.get<int>();
          else throw unknown("tracker." + k);
        }
      } else if (key == "fp_threshold") {
        cfg.fp_threshold = v.get<double>();
      } else {
        throw unknown(key);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("inference config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

const Eigen::VectorXd& query_feature(features::FeatureCache& cache, const AnnotationRecord& rec) {
  return cache.embedding("query:" + rec.video_id + "#" + std::to_string(rec.query_index), rec.query.crop);
}

std::optional<Eigen::VectorXd> title_feature(const heads::HeadConfig& cfg, const AnnotationRecord& rec) {
  if (!cfg.use_text) return std::nullopt;
  return heads::embed_title(rec.query.title.value_or("object"), cfg.title_dim);
}

std::vector<localize::Prediction> predict_vq2d(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                               const heads::HeadModel<double>& head, features::FeatureCache& cache,
                                               const InferenceConfig& cfg) {
  std::vector<localize::Prediction> out;
  for (const AnnotationRecord* rec : records) {
    const VideoClip& clip = find_video(data, rec->video_id).clip;
    localize::HeadScorer scorer(head, cache, clip, query_feature(cache, *rec), title_feature(head.config(), *rec));
    out.push_back(localize::vq2d_pipeline(clip, *rec, scorer, cfg.peak, cfg.tracker));
  }
  return out;
}

std::vector<localize::FrameDetections> detect_annotated(const Dataset& data,
                                                        const std::vector<const AnnotationRecord*>& records,
                                                        const heads::HeadModel<double>& head,
                                                        features::FeatureCache& cache) {
  std::vector<localize::FrameDetections> out;
  for (const AnnotationRecord* rec : records) {
    const VideoClip& clip = find_video(data, rec->video_id).clip;
    localize::HeadScorer scorer(head, cache, clip, query_feature(cache, *rec), title_feature(head.config(), *rec));
    for (int f = rec->gt_track.start; f <= rec->gt_track.last(); ++f) {
      out.push_back({rec->video_id, rec->query_index, f, scorer.detections(f)});
    }
  }
  return out;
}

json to_json(const EvalSummary& s) {
  json j = metrics::to_json(s.det);
  j.update(metrics::to_json(s.vq2d));
  j["fp_rate"] = s.fp_rate;
  return j;
}

EvalSummary evaluate_head(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                          const heads::HeadModel<double>& head, features::FeatureCache& cache,
                          const InferenceConfig& cfg) {
  std::vector<AnnotationRecord> copies;
  for (const AnnotationRecord* r : records) copies.push_back(*r);
  EvalSummary s;
  s.det = metrics::evaluate_detections(detect_annotated(data, records, head, cache), copies);
  const auto preds = predict_vq2d(data, records, head, cache, cfg);
  s.vq2d = metrics::evaluate_vq2d(preds, copies);
  std::vector<localize::ScoreTimeline> timelines;
  for (const auto& p : preds) timelines.push_back(p.timeline);
  s.fp_rate = metrics::fp_rate_on_negatives(timelines, records, cfg.fp_threshold);
  return s;
}

std::vector<sampling::TrainingPair> pufs_for(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                             const sampling::SamplerConfig& cfg,
                                             const localize::TrackerConfig& tracker,
                                             const features::ProposalConfig& proposals) {
  std::map<std::string, std::vector<AnnotationRecord>> by_video;
  for (const AnnotationRecord* r : records) by_video[r->video_id].push_back(*r);
  std::vector<sampling::TrainingPair> out;
  for (const VideoEntry& v : data) {
    const auto it = by_video.find(v.clip.video_id);
    if (it == by_video.end()) continue;
    const auto pairs = sampling::pufs_pairs(sampling::pufs_tracks(v.clip, it->second, cfg, tracker, proposals));
    out.insert(out.end(), pairs.begin(), pairs.end());
  }
  return out;
}

std::vector<RunOutcome> run_grid(const Dataset& data, const std::vector<RunSpec>& specs, const InferenceConfig& infer,
                                 features::FeatureCache& cache, const std::function<void(const RunOutcome&)>& progress) {
  const Split split = split_records(data);
  if (split.train.empty() || split.test.empty()) throw DataError("dataset too small for a train/test split");
  std::vector<sampling::TrainingPair> pufs;
  for (const RunSpec& s : specs) {
    if (s.train.sampler.pufs_enabled) {
      pufs = pufs_for(data, split.train, s.train.sampler, infer.tracker, s.train.proposals);
      break;
    }
  }
  std::vector<RunOutcome> out;
  for (const RunSpec& s : specs) {
    train::FitLog log;
    const train::Checkpoint ck = train::fit(data, split.train, pufs, cache, s.train, &log);
    RunOutcome r;
    r.name = s.name;
    r.seed = s.train.seed;
    r.final_loss = log.step_loss.empty() ? 0.0 : log.step_loss.back();
    r.eval = evaluate_head(data, split.test, ck.head, cache, infer);
    if (progress) progress(r);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RunSpec> ablation_grid(const train::TrainConfig& base) {
  std::vector<RunSpec> specs;
  for (auto v : {heads::Variant::kSiam, heads::Variant::kSelfAttention, heads::Variant::kCrossAttention,
                 heads::Variant::kCocoConcat, heads::Variant::kCocoCond}) {
    RunSpec s{heads::to_string(v), base};
    s.train.head.variant = v;
    specs.push_back(s);
  }
  for (bool bps : {false, true}) {
    for (bool nufs : {false, true}) {
      RunSpec s{std::string("coco_cond") + (bps ? "+bps" : "-bps") + (nufs ? "+nufs" : "-nufs"), base};
      s.train.head.variant = heads::Variant::kCocoCond;
      s.train.sampler.bps_enabled = bps;
      s.train.sampler.nufs_enabled = nufs;
      specs.push_back(s);
    }
  }
  return specs;
}

json summarize(const std::vector<RunOutcome>& runs) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunOutcome*>> groups;
  for (const auto& r : runs) {
    if (groups[r.name].empty()) order.push_back(r.name);
    groups[r.name].push_back(&r);
  }
  json rows = json::array();
  for (const auto& name : order) {
    json mean = json::object();
    json seeds = json::array();
    for (const RunOutcome* r : groups[name]) {
      const json m = to_json(r->eval);
      for (const auto& [k, v] : m.items()) mean[k] = mean.value(k, 0.0) + v.get<double>() / groups[name].size();
      seeds.push_back(r->seed);
    }
    rows.push_back({{"name", name}, {"seeds", seeds}, {"mean", mean}});
  }
  return rows;
}

std::string summary_table(const json& summary) {
  static const char* kCols[] = {"AP", "AP50", "AP75", "AR@10", "tAP25", "stAP25", "rec%", "Succ", "fp_rate"};
  std::ostringstream os;
  os << "| run |";
  for (const char* c : kCols) os << ' ' << c << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < std::size(kCols); ++i) os << "---|";
  os << '\n';
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& row : summary) {
    os << "| " << row["name"].get<std::string>() << " |";
    for (const char* c : kCols) os << ' ' << row["mean"].value(c, 0.0) << " |";
    os << '\n';
  }
  return os.str();
}

}  // namespace vql::cli
