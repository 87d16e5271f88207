#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "driftlab/losses.hpp"
#include "driftlab/netcore.hpp"

namespace driftlab {

/// One randomized end-to-end check: raw inputs are augmented into weak and
/// strong views, pushed through the extractor and frozen classifier, and fed
/// to combined_loss. Only extractor coordinates are perturbed.
struct GradCheckTrial {
  LossVariant variant = LossVariant::AclsAdis;
  std::uint64_t seed = 0;
  std::size_t batch = 0;
  std::size_t classes = 0;
  std::vector<std::size_t> dims;  // extractor widths, input first
  double temperature = 0.0;
  GradCheckResult result;
};

struct GradCheckSuiteOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 100;  // per variant
  double tolerance = 1e-5;
  double eps = 1e-5;
  // Test fixture: negates the gradient flowing back from the first view.
  bool inject_sign_flip = false;
};

struct GradCheckReport {
  std::vector<GradCheckTrial> trials;
  std::size_t failures = 0;

  bool passed() const { return failures == 0 && !trials.empty(); }
  const GradCheckTrial& worst() const;
};

/// Builds one trial of `variant`. Configurations whose confidences sit within
/// 1e-3 of a threshold, or whose pseudo-label probability is inside the
/// cross-entropy floor, are redrawn.
GradCheckTrial run_gradcheck_trial(LossVariant variant, std::uint64_t seed, double eps,
                                   bool inject_sign_flip);

GradCheckReport run_gradcheck_suite(const GradCheckSuiteOptions& opts);

}  // namespace driftlab
