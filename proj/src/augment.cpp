#include "driftlab/augment.hpp"

#include <cmath>

#include "driftlab/error.hpp"
#include "driftlab/seeding.hpp"

namespace driftlab {

std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::Identity: return "identity";
    case AugmentKind::Weak: return "weak";
    case AugmentKind::Strong: return "strong";
  }
  return "identity";
}

AugmentPolicy AugmentPolicy::identity() { return {}; }

AugmentPolicy AugmentPolicy::weak_default() {
  return {AugmentKind::Weak, 0.05, 0.95, 1.05, 0.0, 0.0};
}

AugmentPolicy AugmentPolicy::strong_default() {
  return {AugmentKind::Strong, 0.4, 0.8, 1.2, 0.15, 0.3};
}

void AugmentPolicy::validate() const {
  const bool finite = std::isfinite(noise_sigma) && std::isfinite(scale_low) &&
                      std::isfinite(scale_high) && std::isfinite(mask_fraction) &&
                      std::isfinite(shift_bound);
  if (!finite) raise(ErrorKind::Config, "augmentation magnitudes must be finite");
  if (noise_sigma < 0.0) raise(ErrorKind::Config, "noise_sigma must be non-negative");
  if (scale_low > scale_high) raise(ErrorKind::Config, "scale_low must not exceed scale_high");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) raise(ErrorKind::Config, "mask_fraction must lie in [0, 1)");
  if (shift_bound < 0.0) raise(ErrorKind::Config, "shift_bound must be non-negative");
  if (kind == AugmentKind::Identity &&
      (noise_sigma != 0.0 || scale_low != 1.0 || scale_high != 1.0 || mask_fraction != 0.0 ||
       shift_bound != 0.0)) {
    raise(ErrorKind::Config, "identity policy must have zero magnitudes");
  }
}

void check_weaker(const AugmentPolicy& weak, const AugmentPolicy& strong) {
  const bool ok = weak.noise_sigma <= strong.noise_sigma && weak.scale_low >= strong.scale_low &&
                  weak.scale_high <= strong.scale_high &&
                  weak.mask_fraction <= strong.mask_fraction &&
                  weak.shift_bound <= strong.shift_bound;
  if (!ok) raise(ErrorKind::Config, "weak augmentation must be no stronger than strong augmentation");
}

AugmentPolicy interpolate(const AugmentPolicy& weak, const AugmentPolicy& strong, double t) {
  auto lerp = [t](double a, double b) { return a + t * (b - a); };
  AugmentPolicy p;
  p.kind = AugmentKind::Strong;
  p.noise_sigma = lerp(weak.noise_sigma, strong.noise_sigma);
  p.scale_low = lerp(weak.scale_low, strong.scale_low);
  p.scale_high = lerp(weak.scale_high, strong.scale_high);
  p.mask_fraction = lerp(weak.mask_fraction, strong.mask_fraction);
  p.shift_bound = lerp(weak.shift_bound, strong.shift_bound);
  return p;
}

SampleView apply_policy(std::span<const double> x, const AugmentPolicy& policy, std::uint64_t seed) {
  SampleView view;
  view.values.resize(x.size());
  view.view_seed = seed;
  view.kind = policy.kind;
  Rng rng(seed);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double u_scale = rng.uniform();
    const double z = rng.normal();
    const double u_shift = rng.uniform();
    const double u_mask = rng.uniform();
    const double s = policy.scale_low + u_scale * (policy.scale_high - policy.scale_low);
    const double shift = policy.shift_bound * (2.0 * u_shift - 1.0);
    double v = x[j] * s + policy.noise_sigma * z + shift;
    if (u_mask < policy.mask_fraction) {
      v = 0.0;
      ++view.masked;
    }
    view.values[j] = v;
  }
  return view;
}

SampleView weak_augment(std::span<const double> x, std::uint64_t seed, const AugmentPolicy& weak) {
  SampleView v = apply_policy(x, weak, seed);
  v.kind = AugmentKind::Weak;
  return v;
}

SampleView strong_augment(std::span<const double> x, std::uint64_t seed, double magnitude,
                          const AugmentPolicy& weak, const AugmentPolicy& strong) {
  if (!(magnitude >= 0.0 && magnitude <= 1.0)) raise(ErrorKind::Domain, "augmentation magnitude must lie in [0, 1]");
  SampleView v = apply_policy(x, interpolate(weak, strong, magnitude), seed);
  v.kind = AugmentKind::Strong;
  return v;
}

std::uint64_t view_seed(std::uint64_t global_seed, std::uint64_t domain, std::uint64_t half,
                        std::uint64_t epoch, std::uint64_t sample, AugmentKind kind) {
  return seed_of({global_seed, domain, half, epoch, sample, static_cast<std::uint64_t>(kind)});
}

nlohmann::json to_json(const AugmentPolicy& p) {
  return {{"noise_sigma", p.noise_sigma}, {"scale_low", p.scale_low},
          {"scale_high", p.scale_high},   {"mask_fraction", p.mask_fraction},
          {"shift_bound", p.shift_bound}};
}

AugmentPolicy policy_from_json(const nlohmann::json& j, AugmentKind kind) {
  AugmentPolicy p = kind == AugmentKind::Strong ? AugmentPolicy::strong_default()
                                                : AugmentPolicy::weak_default();
  p.kind = kind;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (!it->is_number()) raise(ErrorKind::Config, "augment." + key + " must be a number");
    const double v = it->get<double>();
    if (key == "noise_sigma") p.noise_sigma = v;
    else if (key == "scale_low") p.scale_low = v;
    else if (key == "scale_high") p.scale_high = v;
    else if (key == "mask_fraction") p.mask_fraction = v;
    else if (key == "shift_bound") p.shift_bound = v;
    else raise(ErrorKind::Config, "unknown key augment." + key);
  }
  p.validate();
  return p;
}

}  // namespace driftlab
