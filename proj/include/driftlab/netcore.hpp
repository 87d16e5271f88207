#pragma once

// Minimal differentiable network: a perceptron feature extractor followed by
// a linear classifier, with hand-written reverse mode and SGD.
//
// Hidden layers use a smooth activation (softplus by default) so central
// differences are clean everywhere; the feature layer is linear.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "driftlab/tensor.hpp"

namespace driftlab {

enum class Activation { Softplus, Tanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

struct DenseLayer {
  Matrix weight;  // [out x in]
  Vector bias;    // [out]

  bool operator==(const DenseLayer&) const = default;
};

/// Parameters of the feature extractor g.
struct ExtractorParams {
  std::vector<DenseLayer> layers;
  std::vector<Activation> activations;  // one per hidden layer

  std::size_t input_dim() const { return layers.front().weight.cols(); }
  std::size_t feature_dim() const { return layers.back().weight.rows(); }
  std::vector<std::size_t> dims() const;

  bool operator==(const ExtractorParams&) const = default;
};

/// Parameters of the classifier h. Frozen once source pretraining ends.
struct ClassifierParams {
  Matrix weight;  // [K x d_feat]
  Vector bias;    // [K]

  std::size_t num_classes() const { return weight.rows(); }
  bool operator==(const ClassifierParams&) const = default;
};

/// Gradient with the same layout as ExtractorParams::layers.
struct ExtractorGrad {
  std::vector<DenseLayer> layers;
};

struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;   // pre-activations per layer
  std::vector<Matrix> post;  // activations per layer; post.back() is the feature matrix
};

struct ForwardResult {
  Matrix features;
  Matrix logits;
  ForwardTrace trace;
};

struct OptimizerState {
  std::vector<DenseLayer> velocity;
  std::uint64_t steps = 0;
};

struct SgdOptions {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
};

ExtractorParams init_extractor(std::uint64_t seed, std::span<const std::size_t> dims,
                               Activation activation = Activation::Softplus);
ClassifierParams init_classifier(std::uint64_t seed, std::size_t feature_dim,
                                 std::size_t num_classes);

/// Standard deviation used for a layer's weights given its fan-in.
double init_weight_std(std::size_t fan_in);

ForwardResult forward(const ExtractorParams& theta, const ClassifierParams& phi,
                      const Matrix& batch);

/// Logits only, no trace. Rows are independent, so callers may split the
/// batch across threads and concatenate.
Matrix predict_logits(const ExtractorParams& theta, const ClassifierParams& phi,
                      const Matrix& batch);

Matrix softmax(const Matrix& logits, double temperature = 1.0);
Vector softmax_row(std::span<const double> logits, double temperature = 1.0);

/// Gradient of sum(dLogits .* logits) with respect to the extractor only.
ExtractorGrad backward(const ExtractorParams& theta, const ClassifierParams& phi,
                       const ForwardTrace& trace, const Matrix& d_logits);

/// Same as backward() but also returns the classifier gradient. Used only by
/// source pretraining; adaptation never touches the classifier.
struct FullGrad {
  ExtractorGrad extractor;
  DenseLayer classifier;
};
FullGrad backward_full(const ExtractorParams& theta, const ClassifierParams& phi,
                       const ForwardTrace& trace, const Matrix& d_logits);

void accumulate(ExtractorGrad& into, const ExtractorGrad& add);

OptimizerState make_optimizer_state(std::span<const DenseLayer> like);

/// One momentum step; weight decay is added to the gradient before the
/// velocity update. Nesterov uses the look-ahead form g + mu * v.
void sgd_step(std::span<DenseLayer> params, std::span<const DenseLayer> grads,
              OptimizerState& state, const SgdOptions& opts);
void sgd_step(ExtractorParams& theta, const ExtractorGrad& grad, OptimizerState& state,
              const SgdOptions& opts);

std::vector<double> flatten(std::span<const DenseLayer> layers);
void unflatten(std::span<const double> flat, std::span<DenseLayer> layers);
std::size_t parameter_count(std::span<const DenseLayer> layers);

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates checked; 0 means every coordinate. Above the cutoff a
  // seeded subsample is drawn.
  std::size_t max_coords = 0;
  std::uint64_t subsample_seed = 0;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double denom_floor = 1e-4;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

using FlatLoss = std::function<double(std::span<const double>)>;

GradCheckResult grad_check(const FlatLoss& loss, std::span<const double> point,
                           std::span<const double> analytic, const GradCheckOptions& opts = {});

GradCheckResult grad_check(const std::function<double(const ExtractorParams&)>& loss,
                           const ExtractorParams& theta, const ExtractorGrad& analytic,
                           const GradCheckOptions& opts = {});

// Serialization. Doubles are written in shortest round-trip form, so a
// save/load cycle is bit-exact.
nlohmann::json to_json(const ExtractorParams& theta);
nlohmann::json to_json(const ClassifierParams& phi);
nlohmann::json to_json(const OptimizerState& state);
ExtractorParams extractor_from_json(const nlohmann::json& j);
ClassifierParams classifier_from_json(const nlohmann::json& j);
OptimizerState optimizer_from_json(const nlohmann::json& j);

/// Raw bytes of every parameter, in layout order. Used for freeze checks.
std::vector<unsigned char> param_bytes(std::span<const DenseLayer> layers);
std::vector<unsigned char> param_bytes(const ClassifierParams& phi);

/// FNV-1a digest of the parameter bytes, as 16 hex digits.
std::string digest(const ExtractorParams& theta);
std::string digest(const ClassifierParams& phi);

}  // namespace driftlab
