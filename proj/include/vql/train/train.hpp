#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vql/features/backbone.hpp"
#include "vql/features/proposals.hpp"
#include "vql/heads/heads.hpp"
#include "vql/sampling/sampling.hpp"

namespace vql::train {

struct Schedule {
  double initial_lr = 0.01;
  std::vector<int> decay_steps{2000, 4000};
  double decay_factor = 0.1;

  double lr_at(int step) const;
};

struct TrainConfig {
  heads::HeadConfig head;
  sampling::SamplerConfig sampler;
  Schedule schedule;
  int batch_size = 8;
  int total_steps = 5000;
  std::uint64_t seed = 0;
  double cls_weight = 1.0;
  double box_weight = 1.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double pos_weight_cap = 10.0;
  double clamp_eps = 1e-7;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::uint64_t backbone_seed = 1234;
  features::BackboneConfig backbone;
  features::ProposalConfig proposals;
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
/// Unknown keys raise ConfigError naming the key.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Class weights of the balanced BCE: positives get min(neg / pos, cap), negatives 1.
Eigen::VectorXd bce_weights(const Eigen::VectorXd& labels, double cap);

struct LossValue {
  double total = 0.0;
  double cls = 0.0;
  double box = 0.0;
};

/// Classification plus box loss of one proposal set. `deltas` (N x 4) may be
/// empty; the box term then vanishes.
LossValue loss(const Eigen::VectorXd& scores, const Eigen::MatrixXd& deltas, const Eigen::VectorXd& labels,
               const std::optional<Box>& gt, const features::ProposalSet& pset, const TrainConfig& cfg);

/// Recorded version of loss() for the training step.
ad::Var<double> loss(const heads::HeadModel<double>::Graph& g, const Eigen::VectorXd& labels,
                     const std::optional<Box>& gt, const features::ProposalSet& pset, const TrainConfig& cfg);

struct Checkpoint {
  static constexpr const char* kVersion = "vqlab-checkpoint-1";

  TrainConfig config;
  int step = 0;
  std::string rng_state;
  heads::HeadModel<double> head;
  std::map<std::string, Eigen::MatrixXd> momentum;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws DataError on a corrupt file or a version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The frozen backbone and proposal settings a checkpoint was trained with.
features::Featurizer make_featurizer(const TrainConfig& cfg);

/// Per-dimension mean and standard deviation of the proposal features of the
/// frames that annotated and N-UFS pairs draw from.
std::pair<Eigen::VectorXd, Eigen::VectorXd> feature_statistics(const Dataset& data,
                                                               const std::vector<const AnnotationRecord*>& records,
                                                               features::FeatureCache& cache);

struct FitLog {
  std::vector<double> step_loss;  // mean loss of each step's batch
  int epochs = 0;
};

struct FitHooks {
  std::function<void(const Checkpoint&)> on_checkpoint;  // every checkpoint_every steps
  std::function<void(int step, double loss)> on_step;
};

/// SGD with momentum and coupled weight decay over build_epoch streams. Throws
/// NumericError when a batch loss is not finite.
Checkpoint fit(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
               const std::vector<sampling::TrainingPair>& pufs, features::FeatureCache& cache, const TrainConfig& cfg,
               FitLog* log = nullptr, const FitHooks& hooks = {});

/// Applies one update: v = momentum v + g + wd theta; theta -= lr v.
void sgd_step(heads::HeadModel<double>& head, std::map<std::string, Eigen::MatrixXd>& momentum, double lr,
              const TrainConfig& cfg);

}  // namespace vql::train
