#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vql/core/dataset.hpp"
#include "vql/core/rng.hpp"
#include "vql/features/backbone.hpp"

namespace vql::features {

struct Proposal {
  Box box;
  double objectness = 0.0;
};

/// Candidate boxes of one frame with their pooled features (row j describes proposal j).
/// `reserve` holds random background boxes (with features) used to pad emptied sets.
struct ProposalSet {
  int frame_index = 0;
  int frame_width = 0;
  int frame_height = 0;
  std::vector<Proposal> proposals;
  Eigen::MatrixXd features;
  std::vector<Proposal> reserve;
  Eigen::MatrixXd reserve_features;

  int size() const { return static_cast<int>(proposals.size()); }
};

/// Throws DataError unless |proposals| == rows(features) >= 1.
void validate(const ProposalSet& pset);

/// Keeps the listed rows, in order.
ProposalSet select(const ProposalSet& pset, const std::vector<int>& rows);

enum class ProposalMode { kHeuristic, kJitteredGt };

struct ProposalConfig {
  int max_proposals = 16;          // N_max
  double contrast_threshold = 0.12;  // foreground residual against the fitted background
  double fit_threshold = 0.08;     // inlier residual for the background fit
  int min_area = 6;                // smallest connected component kept, pixels
  double merge_gap = 6.0;          // components closer than this also yield a union box
  double jitter = 0.2;             // jittered_gt: max perturbation as a fraction of size
  int num_reserve = 4;
};

/// Connected-component blobs on a background-contrast map, ranked by saliency in
/// [0, 1] and truncated to max_proposals. A uniform frame yields one full-frame box.
std::vector<Proposal> propose_heuristic(const Image& image, const ProposalConfig& cfg);

/// Ground-truth boxes perturbed by uniform jitter (fraction of size), padded with
/// uniformly random boxes up to max_proposals.
std::vector<Proposal> propose_jittered(int width, int height, const std::vector<Box>& gt, const ProposalConfig& cfg,
                                       Rng& rng);

/// Per-pixel contrast against a robust planar background fit (max over channels).
Eigen::MatrixXd contrast_map(const Image& image, const ProposalConfig& cfg);

/// Couples proposal generation with the backbone to produce ProposalSets.
class Featurizer {
 public:
  Featurizer(Backbone<double> backbone, ProposalConfig cfg) : backbone_(std::move(backbone)), cfg_(cfg) {}

  const Backbone<double>& backbone() const { return backbone_; }
  Backbone<double>& backbone() { return backbone_; }
  const ProposalConfig& proposal_config() const { return cfg_; }
  int feature_dim() const { return backbone_.feature_dim(); }

  /// Heuristic proposals plus `num_reserve` background boxes drawn with `seed`.
  ProposalSet featurize(const Frame& frame, std::uint64_t seed) const;

  /// Pools the given proposals (and seeded reserve boxes) on the frame.
  ProposalSet featurize(const Frame& frame, const std::vector<Proposal>& proposals, std::uint64_t seed) const;

  FeatureVector<double> embed(const Image& region) const { return backbone_.embed(region); }

 private:
  Backbone<double> backbone_;
  ProposalConfig cfg_;
};

/// Lazily computed proposal sets keyed by (video id, frame index), plus query
/// embeddings keyed by caller-chosen names. Reserve boxes use a seed derived
/// from the frame identity, so cached and fresh results agree. Not thread-safe.
class FeatureCache {
 public:
  explicit FeatureCache(const Featurizer& featurizer) : featurizer_(&featurizer) {}

  const Featurizer& featurizer() const { return *featurizer_; }

  const ProposalSet& get(const Frame& frame);
  const FeatureVector<double>& embedding(const std::string& key, const Image& region);

  std::size_t size() const { return sets_.size(); }

 private:
  const Featurizer* featurizer_;
  std::map<std::pair<std::string, int>, ProposalSet> sets_;
  std::map<std::string, FeatureVector<double>> embeddings_;
};

/// Seed of the reserve boxes of a frame.
std::uint64_t frame_seed(const std::string& video_id, int frame_index);

}  // namespace vql::features
