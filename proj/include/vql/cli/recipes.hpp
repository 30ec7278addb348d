#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vql/core/dataset.hpp"
#include "vql/localize/localize.hpp"
#include "vql/metrics/metrics.hpp"
#include "vql/train/train.hpp"

namespace vql::cli {

/// Records of every fourth video (position 3 mod 4) form the test split.
struct Split {
  std::vector<const AnnotationRecord*> train;
  std::vector<const AnnotationRecord*> test;
};
Split split_records(const Dataset& data);

/// Records of the named split: "train", "test" or "all".
std::vector<const AnnotationRecord*> select_split(const Dataset& data, const std::string& name);

struct InferenceConfig {
  localize::PeakConfig peak;
  localize::TrackerConfig tracker;
  double fp_threshold = 0.6;  // tau of the negative-frame false-positive rate
};

void validate(const InferenceConfig& cfg);
nlohmann::json to_json(const InferenceConfig& cfg);
InferenceConfig inference_config_from_json(const nlohmann::json& j);

/// Backbone embedding of the record's query crop, cached under the query id.
const Eigen::VectorXd& query_feature(features::FeatureCache& cache, const AnnotationRecord& rec);
std::optional<Eigen::VectorXd> title_feature(const heads::HeadConfig& cfg, const AnnotationRecord& rec);

std::vector<localize::Prediction> predict_vq2d(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                               const heads::HeadModel<double>& head, features::FeatureCache& cache,
                                               const InferenceConfig& cfg);

/// Ranked head detections on every annotated frame of the records.
std::vector<localize::FrameDetections> detect_annotated(const Dataset& data,
                                                        const std::vector<const AnnotationRecord*>& records,
                                                        const heads::HeadModel<double>& head,
                                                        features::FeatureCache& cache);

struct EvalSummary {
  metrics::DetEvalResult det;
  metrics::Vq2dEvalResult vq2d;
  double fp_rate = 0.0;
};
nlohmann::json to_json(const EvalSummary& s);

EvalSummary evaluate_head(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                          const heads::HeadModel<double>& head, features::FeatureCache& cache,
                          const InferenceConfig& cfg);

/// P-UFS pairs over the videos of `records`.
std::vector<sampling::TrainingPair> pufs_for(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                             const sampling::SamplerConfig& cfg,
                                             const localize::TrackerConfig& tracker = {},
                                             const features::ProposalConfig& proposals = {});

/// One training run on the train split, evaluated on the test split.
struct RunSpec {
  std::string name;
  train::TrainConfig train;
};

struct RunOutcome {
  std::string name;
  std::uint64_t seed = 0;
  EvalSummary eval;
  double final_loss = 0.0;
};

/// Trains and evaluates every spec. P-UFS pairs are generated once, only when
/// some spec enables them. `progress` receives each finished run.
std::vector<RunOutcome> run_grid(const Dataset& data, const std::vector<RunSpec>& specs, const InferenceConfig& infer,
                                 features::FeatureCache& cache,
                                 const std::function<void(const RunOutcome&)>& progress = {});

/// The five head variants plus the four BPS / N-UFS on/off combinations of coco_cond.
std::vector<RunSpec> ablation_grid(const train::TrainConfig& base);

/// Per-name means of a grid run.
nlohmann::json summarize(const std::vector<RunOutcome>& runs);
/// Markdown table of summarize() output.
std::string summary_table(const nlohmann::json& summary);

}  // namespace vql::cli
