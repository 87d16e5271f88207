#pragma once

// Experiment configuration: every hyperparameter of a run, loaded from one
// JSON file. Unknown keys are rejected; missing keys take the defaults below.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/augment.hpp"
#include "driftlab/domainstream.hpp"
#include "driftlab/losses.hpp"
#include "driftlab/netcore.hpp"

namespace driftlab {

struct NetworkConfig {
  std::vector<std::size_t> hidden{32, 32};
  std::size_t feature_dim = 16;
  Activation activation = Activation::Softplus;
};

struct PretrainConfig {
  int epochs = 30;
  double lr = 0.01;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
};

struct RunConfig {
  LossVariant variant = LossVariant::AclsAdis;
  double alpha = 5.0;
  double temperature = 2.0;
  ThresholdSchedule taus;  // (0.1, 0.5)
  int epochs_per_domain = 10;
  double lr = 0.001;
  int lr_decay_epoch = 5;
  double lr_decay_factor = 0.1;
  int regen_period = 5;
  int refine_rounds = 1;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
  bool reset_optimizer = true;
  bool cache_teacher = true;
  bool eval_unseen = true;
  double strong_magnitude = 1.0;
  AugmentPolicy weak = AugmentPolicy::weak_default();
  AugmentPolicy strong = AugmentPolicy::strong_default();
  std::uint64_t seed = 1;
  unsigned threads = 1;  // performance only; results do not depend on it

  LossSettings loss_settings() const { return {variant, alpha, temperature, taus}; }
};

struct ExperimentConfig {
  RunConfig run;
  NetworkConfig network;
  PretrainConfig pretrain;
  SequenceConfig sequence;
  std::string out_dir = "out";
  std::string checkpoint;  // pretrained checkpoint to start from; empty = pretrain inline
  std::string manifest;    // external data manifest; empty = synthetic domains
};

/// Built-in defaults, identical to configs/default.json.
ExperimentConfig default_config();

/// Parses and validates; throws Error(Config) naming the offending field.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

void validate(const ExperimentConfig& cfg);

/// Digest of every setting that influences results (paths and thread count
/// excluded).
std::string config_digest(const ExperimentConfig& cfg);

/// Threads from --threads when given, else DRIFTLAB_THREADS, else 1.
unsigned resolve_threads(int flag_value);

}  // namespace driftlab
