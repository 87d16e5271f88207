#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "driftlab/tensor.hpp"

namespace driftlab {

/// Confidence thresholds tau_1 < ... < tau_M in [0, 1).
class ThresholdSchedule {
 public:
  ThresholdSchedule() : taus_{0.1, 0.5} {}
  explicit ThresholdSchedule(std::vector<double> taus);

  std::span<const double> taus() const { return taus_; }
  std::size_t size() const { return taus_.size(); }

  /// Number of thresholds strictly below `conf`.
  int weight(double conf) const;

 private:
  std::vector<double> taus_;
};

enum class LossVariant {
  AclsAdis,       // strong-view classification + strong-view distillation (default)
  AclsDis,        // strong-view classification + weak-view distillation
  ClsDis,         // weak-view classification + weak-view distillation
  Cls,            // weak-view classification only
  AclsAdisM1,     // default with a single zero threshold
  AclsDisA10,     // AclsDis with alpha forced to 10
  AclsAdisPrime,  // default, teacher is the model from the end of the previous domain
};

std::string to_string(LossVariant v);
LossVariant variant_from_string(const std::string& name);
std::span<const LossVariant> all_variants();

enum class View { Strong, Weak };
enum class TeacherKind { Source, PreviousDomain };

struct VariantTraits {
  View classification_view = View::Strong;
  std::optional<View> distillation_view = View::Strong;  // nullopt: no distillation term
  TeacherKind teacher = TeacherKind::Source;
  std::optional<double> alpha_override;
  bool single_zero_threshold = false;
};

VariantTraits traits(LossVariant v);

struct AttentiveResult {
  double loss = 0.0;
  Matrix d_logits;
  std::vector<int> weights;
  std::vector<std::size_t> pass_counts;  // per threshold
};

/// (1/N) sum_i w_i CE(p_i, y_i) with w_i = #{m : conf_i > tau_m}.
AttentiveResult attentive_ce(const Matrix& student_probs, std::span<const std::size_t> labels,
                             std::span<const double> confidences, const ThresholdSchedule& taus);

struct DistillResult {
  double loss = 0.0;
  Matrix d_student_logits;
};

/// (1/N) sum_i KL(softmax(t_i / T) || softmax(s_i / T)); the teacher is a
/// constant. No T^2 rescaling of the gradient.
DistillResult kl_distill(const Matrix& teacher_logits, const Matrix& student_logits,
                         double temperature);

struct LossBreakdown {
  double classification = 0.0;
  double distillation = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double temperature = 0.0;
  std::vector<std::size_t> pass_counts;
  std::size_t masked = 0;  // samples with weight 0
};

struct LossSettings {
  LossVariant variant = LossVariant::AclsAdis;
  double alpha = 5.0;
  double temperature = 2.0;
  ThresholdSchedule taus;
};

/// Student logits per view plus teacher logits (teacher always sees weak
/// views). Unused inputs may be null.
struct LossInputs {
  const Matrix* strong_logits = nullptr;
  const Matrix* weak_logits = nullptr;
  const Matrix* teacher_logits = nullptr;
  std::span<const std::size_t> pseudo_labels;
};

struct CombinedLoss {
  LossBreakdown breakdown;
  Matrix d_strong;  // empty when the variant does not use the strong view
  Matrix d_weak;    // empty when the variant does not use the weak view
};

double effective_alpha(const LossSettings& s);
ThresholdSchedule effective_taus(const LossSettings& s);

CombinedLoss combined_loss(const LossSettings& settings, const LossInputs& inputs);

}  // namespace driftlab
