#pragma once

// Source pretraining and the continual adaptation loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/config.hpp"
#include "driftlab/domainstream.hpp"
#include "driftlab/metrics.hpp"
#include "driftlab/netcore.hpp"
#include "driftlab/pseudolabel.hpp"

namespace driftlab {

struct AdaptState {
  ExtractorParams theta_current;
  ExtractorParams theta_source;       // frozen
  ClassifierParams phi;               // frozen
  ExtractorParams theta_snapshot;     // generates pseudo labels
  ExtractorParams theta_prev_domain;  // parameters at the end of the previous step
  OptimizerState optimizer;
  std::size_t step = 0;  // completed adaptation steps
  int epoch = 0;         // epochs completed within the current step
  PseudoLabelSet labels;

  bool operator==(const AdaptState& o) const;
};

enum class CheckpointKind { Pretrained, Run };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::Pretrained;
  std::uint64_t seed = 0;
  std::string config_digest;
  AdaptState state;
  std::vector<double> pretrain_losses;
  MetricsLedger ledger;  // run checkpoints only
};

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Trains extractor and classifier jointly with cross-entropy on the clean
/// source split. Throws Error(Numeric) naming the epoch and batch on a
/// non-finite loss.
Checkpoint pretrain_source(const ExperimentConfig& cfg, const Dataset& source_train);

/// Starting state for adaptation from a pretrained model.
AdaptState initial_state(const ExtractorParams& theta, const ClassifierParams& phi);

struct AdaptLog {
  std::vector<EpochRecord> epochs;
  std::vector<Event> events;
};

/// Identifies a step for view seeding.
struct StepKey {
  std::size_t step = 1;  // 1-based
  std::size_t domain_index = 0;
  int half = 1;
};

/// Runs every epoch of one adaptation step on `domain`'s training split.
/// The labels in `domain` are read only for the pseudo-label accuracy
/// diagnostic.
AdaptState adapt_domain(AdaptState state, const Dataset& domain, const StepKey& key,
                        const RunConfig& cfg, AdaptLog* log = nullptr);

/// Builds the synthetic sequence, or the external one when cfg.manifest is set
/// (first manifest entry is the source domain, the rest are targets).
SequenceSpec make_sequence(const ExperimentConfig& cfg);

struct RunResult {
  MetricsLedger ledger;
  Checkpoint final_checkpoint;
};

struct RunOptions {
  // Pretrained or mid-run checkpoint to start from; pretrains inline if empty.
  std::optional<Checkpoint> start;
  // Called after every completed step with the run checkpoint.
  std::function<void(const Checkpoint&)> on_step;
  // Stop after this many completed steps (0 = run to the end).
  std::size_t stop_after = 0;
};

/// Adapts through the whole sequence, evaluating after every step.
RunResult run_sequence(const ExperimentConfig& cfg, const SequenceSpec& seq, const RunOptions& opts = {});

/// Logits for every row, optionally split across threads. Output does not
/// depend on the thread count.
Matrix infer_logits(const ExtractorParams& theta, const ClassifierParams& phi, const Matrix& X,
                    unsigned threads);

}  // namespace driftlab
