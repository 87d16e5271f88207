#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "json.hpp"
#include "driftlab/tensor.hpp"

namespace driftlab {

enum class AugmentKind { Identity, Weak, Strong };

std::string to_string(AugmentKind k);

/// Label-preserving perturbation of a feature vector:
///   x' = x * s + sigma * z + b, then each feature zeroed with prob. mask_fraction
/// with s ~ U[scale_low, scale_high], z ~ N(0, 1), b ~ U[-shift_bound, shift_bound].
struct AugmentPolicy {
  AugmentKind kind = AugmentKind::Identity;
  double noise_sigma = 0.0;
  double scale_low = 1.0;
  double scale_high = 1.0;
  double mask_fraction = 0.0;
  double shift_bound = 0.0;

  static AugmentPolicy identity();
  static AugmentPolicy weak_default();
  static AugmentPolicy strong_default();

  void validate() const;
  bool operator==(const AugmentPolicy&) const = default;
};

/// Throws unless every magnitude of `weak` is no larger than in `strong`.
void check_weaker(const AugmentPolicy& weak, const AugmentPolicy& strong);

/// Linear interpolation of every magnitude; t = 0 gives `weak` exactly.
AugmentPolicy interpolate(const AugmentPolicy& weak, const AugmentPolicy& strong, double t);

struct SampleView {
  Vector values;
  std::uint64_t view_seed = 0;
  AugmentKind kind = AugmentKind::Identity;
  std::size_t masked = 0;
};

/// Every feature consumes the same random words whatever the policy, so two
/// policies applied with one seed share their noise realisation.
SampleView apply_policy(std::span<const double> x, const AugmentPolicy& policy, std::uint64_t seed);

SampleView weak_augment(std::span<const double> x, std::uint64_t seed,
                        const AugmentPolicy& weak = AugmentPolicy::weak_default());

SampleView strong_augment(std::span<const double> x, std::uint64_t seed, double magnitude,
                          const AugmentPolicy& weak = AugmentPolicy::weak_default(),
                          const AugmentPolicy& strong = AugmentPolicy::strong_default());

/// Seed of one view: hash of (global seed, domain, half, epoch, sample, kind).
std::uint64_t view_seed(std::uint64_t global_seed, std::uint64_t domain, std::uint64_t half,
                        std::uint64_t epoch, std::uint64_t sample, AugmentKind kind);

nlohmann::json to_json(const AugmentPolicy& p);
AugmentPolicy policy_from_json(const nlohmann::json& j, AugmentKind kind);

}  // namespace driftlab
