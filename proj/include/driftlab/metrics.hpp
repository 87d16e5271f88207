#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/domainstream.hpp"
#include "driftlab/netcore.hpp"

namespace driftlab {

struct DomainAccuracy {
  std::string domain_id;
  std::size_t correct = 0;
  std::size_t total = 0;
  bool seen = true;  // false for domains not yet adapted to

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  bool operator==(const DomainAccuracy&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  std::size_t batches = 0;
  // Batch-mean loss terms averaged over the epoch's batches.
  double classification = 0.0;
  double distillation = 0.0;
  double total = 0.0;
  std::vector<std::size_t> pass_counts;
  std::size_t masked = 0;
  bool regenerated = false;
  std::string snapshot_id;        // parameters that produced the active pseudo labels
  double pseudo_label_accuracy = 0.0;  // diagnostic, uses the hidden labels
  std::string theta_digest;       // parameters after the epoch

  bool operator==(const EpochRecord&) const = default;
};

struct Event {
  std::size_t step = 0;
  int epoch = -1;
  std::string kind;  // "regen", "lr_decay", "freeze_check", "checkpoint"
  std::string detail;

  bool operator==(const Event&) const = default;
};

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::string domain_id;
  int half = 1;
  std::vector<DomainAccuracy> accuracies;  // seen domains first, in first-seen order
  std::vector<EpochRecord> epochs;

  const DomainAccuracy* find(const std::string& domain) const;
  bool operator==(const StepRecord&) const = default;
};

struct MetricsLedger {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string phi_digest;
  std::string theta_source_digest;
  std::vector<DomainAccuracy> source_model;  // pretrained model on every domain
  std::vector<StepRecord> steps;
  std::vector<Event> events;

  bool operator==(const MetricsLedger&) const = default;
};

struct EvalCounts {
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Top-1 accuracy with argmax ties going to the lowest class index.
/// `threads` splits the rows; the integer reduction makes the result
/// independent of the split.
EvalCounts evaluate_counts(const ExtractorParams& theta, const ClassifierParams& phi,
                           const Dataset& testset, unsigned threads = 1);
double evaluate(const ExtractorParams& theta, const ClassifierParams& phi, const Dataset& testset,
                unsigned threads = 1);

/// Mean over steps of the accuracy on the step's own domain right after
/// adapting to it.
double mean_adaptation_accuracy(const MetricsLedger& ledger);

/// Mean accuracy drop over `seen` between two consecutive models.
double transition_forgetting(const StepRecord& prev, const StepRecord& cur,
                             std::span<const std::string> seen);

/// Mean over steps t >= 2 of the mean accuracy drop, across domains adapted
/// before step t, between the models after steps t-1 and t. Negative values
/// mean the model improved on earlier domains.
double mean_forgetting(const MetricsLedger& ledger);

/// Mean accuracy of the final model over every domain it was evaluated on.
double final_model_accuracy(const MetricsLedger& ledger);

enum class ReportFormat { Csv, Json };

nlohmann::json to_json(const MetricsLedger& ledger);
MetricsLedger ledger_from_json(const nlohmann::json& j);

std::string ledger_csv(const MetricsLedger& ledger);

/// Rebuilds the accuracy table (and the summary values) from ledger CSV text.
struct CsvReport {
  MetricsLedger ledger;  // steps and accuracies only
  double mean_acc = 0.0;
  double mean_forget = 0.0;
  bool has_forget = false;
};
CsvReport parse_ledger_csv(const std::string& text);

void emit_report(const MetricsLedger& ledger, const std::filesystem::path& path, ReportFormat format);

}  // namespace driftlab
