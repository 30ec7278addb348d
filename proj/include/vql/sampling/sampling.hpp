#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vql/core/dataset.hpp"
#include "vql/core/rng.hpp"
#include "vql/features/proposals.hpp"
#include "vql/localize/localize.hpp"

namespace vql::sampling {

enum class Provenance { kAnnotated, kPufs, kNufs };
std::string to_string(Provenance p);

/// A query crop (by location in its clip) paired with one frame of the same clip.
struct TrainingPair {
  std::string video_id;
  int query_index = 0;  // annotation record index; P-UFS pairs use the tracked instance index
  int crop_frame = 0;
  Box crop_box;
  std::optional<std::string> title;
  int frame = 0;
  std::optional<Box> gt_box;  // present iff provenance is annotated or pufs
  Provenance provenance = Provenance::kAnnotated;

  /// Cache key of the crop embedding.
  std::string query_key() const;
};

struct SamplerConfig {
  bool bps_enabled = true;
  double bps_positive_prob = 0.5;
  bool nufs_enabled = true;
  bool pufs_enabled = false;
  double pufs_confidence_threshold = 0.5;  // detections must score strictly above this
  double pufs_fps = 1.0;
  std::pair<double, double> pufs_area_range{0.005, 0.2};  // box area as a fraction of the frame area
  std::pair<double, double> pufs_aspect_range{0.33, 3.0}; // width / height
  double pufs_multiplier = 0.43;  // P-UFS pairs kept per annotated positive pair
  std::uint64_t seed = 0;
};

void validate(const SamplerConfig& cfg);
nlohmann::json to_json(const SamplerConfig& cfg);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// IoU >= 0.5 with the ground truth marks a proposal as positive.
inline constexpr double kPositiveIou = 0.5;

/// Per-proposal labels: 1 where IoU(proposal, gt) >= 0.5.
Eigen::VectorXd proposal_labels(const features::ProposalSet& pset, const std::optional<Box>& gt);

/// With probability p the set is returned as is; otherwise every positive is
/// removed and, if that empties the set, reserve boxes not overlapping the
/// ground truth are substituted. Second member: whether a positive remains.
std::pair<features::ProposalSet, bool> bps_sample(const features::ProposalSet& pset, const Box& gt_box, double p,
                                                  Rng& rng);

/// Frames of (track end, query frame], as many as the track has frames (fewer if
/// the interval is shorter), drawn without replacement and returned ascending.
std::vector<TrainingPair> nufs_sample(const VideoClip& clip, const AnnotationRecord& record, Rng& rng);

/// One pseudo-labelled instance: tracked boxes that passed the area/aspect filter.
struct PufsTrack {
  std::string video_id;
  int instance = 0;
  std::vector<std::pair<int, Box>> boxes;  // (frame, box), ascending frames
};

/// Detects salient blobs every round(fps / pufs_fps) frames, tracks each in both
/// directions, filters outlier boxes and drops instances that overlap an
/// annotated ground-truth box. Seeds overlapping an existing track are skipped.
std::vector<PufsTrack> pufs_tracks(const VideoClip& clip, const std::vector<AnnotationRecord>& records,
                                   const SamplerConfig& cfg, const localize::TrackerConfig& tracker = {},
                                   const features::ProposalConfig& proposals = {});

/// Every ordered (crop frame, target frame) pair of every track: k (k - 1) per track.
std::vector<TrainingPair> pufs_pairs(const std::vector<PufsTrack>& tracks);

std::vector<TrainingPair> pufs_generate(const VideoClip& clip, const std::vector<AnnotationRecord>& records,
                                        const SamplerConfig& cfg);

/// Records in annotation layout plus a provenance field.
nlohmann::json pairs_document(const std::vector<TrainingPair>& pairs, const Dataset& data);
std::vector<TrainingPair> pairs_from_document(const nlohmann::json& doc);

struct EpochItem {
  TrainingPair pair;
  features::ProposalSet proposals;
  bool exists = false;
  Eigen::VectorXd labels;
};

/// Annotated positives of the given records, optional N-UFS negatives and a
/// seeded subsample of `pufs` (at most multiplier x annotated pairs), shuffled
/// with a seed derived from (cfg.seed, epoch). BPS is applied to positive frames.
std::vector<EpochItem> build_epoch(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
                                   const std::vector<TrainingPair>& pufs, features::FeatureCache& cache,
                                   const SamplerConfig& cfg, std::uint64_t epoch);

/// Query crop of a pair, cut from its clip.
Image pair_crop(const Dataset& data, const TrainingPair& pair);

}  // namespace vql::sampling
