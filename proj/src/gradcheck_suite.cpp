#include "driftlab/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "driftlab/augment.hpp"
#include "driftlab/error.hpp"
#include "driftlab/pseudolabel.hpp"
#include "driftlab/seeding.hpp"

namespace driftlab {

namespace {

constexpr double kThresholdMargin = 1e-3;
constexpr int kMaxRedraws = 64;
// The cross-entropy floors probabilities at 1e-30; points inside the floored
// region are flat in the loss but not in the gradient formula.
constexpr double kFloorMargin = 1e-25;

struct Problem {
  ExtractorParams theta;
  ExtractorParams teacher;
  ClassifierParams phi;
  Matrix strong;
  Matrix weak;
  std::vector<std::size_t> labels;
  LossSettings settings;
};

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

void scale_params(ExtractorParams& p, double s) {
  for (auto& l : p.layers) {
    for (double& w : l.weight.flat()) w *= s;
  }
}

Problem draw_problem(LossVariant variant, std::uint64_t seed, GradCheckTrial& trial) {
  Rng rng(seed);
  const std::size_t n = pick(rng, 2, 8), k = pick(rng, 2, 5);
  const std::vector<std::size_t> dims{pick(rng, 2, 6), pick(rng, 2, 6), pick(rng, 2, 6), pick(rng, 2, 5)};
  trial.batch = n;
  trial.classes = k;
  trial.dims = dims;

  Problem p;
  p.theta = init_extractor(rng.next(), dims, Activation::Softplus);
  p.teacher = init_extractor(rng.next(), dims, Activation::Softplus);
  // Non-zero biases so every term in the chain is exercised.
  for (auto* params : {&p.theta, &p.teacher}) {
    for (auto& l : params->layers) {
      for (double& b : l.bias) b = 0.3 * rng.normal();
    }
  }
  scale_params(p.teacher, 1.0 + 0.2 * rng.uniform());
  p.phi = init_classifier(rng.next(), dims.back(), k);
  for (double& w : p.phi.weight.flat()) w *= 2.0;
  for (double& b : p.phi.bias) b = 0.5 * rng.normal();

  const std::uint64_t view_base = rng.next();
  Matrix raw(n, dims.front());
  for (double& v : raw.flat()) v = 1.5 * rng.normal();
  p.strong = Matrix(n, dims.front());
  p.weak = Matrix(n, dims.front());
  for (std::size_t i = 0; i < n; ++i) {
    const SampleView w = weak_augment(raw.row(i), view_seed(view_base, 0, 1, 0, i, AugmentKind::Weak));
    const SampleView s = strong_augment(raw.row(i), view_seed(view_base, 0, 1, 0, i, AugmentKind::Strong), 1.0);
    std::copy(w.values.begin(), w.values.end(), p.weak.row(i).begin());
    std::copy(s.values.begin(), s.values.end(), p.strong.row(i).begin());
  }
  for (std::size_t i = 0; i < n; ++i) p.labels.push_back(rng.below(k));

  p.settings.variant = variant;
  p.settings.alpha = 0.5 + 9.5 * rng.uniform();
  p.settings.temperature = 0.5 + 2.5 * rng.uniform();
  trial.temperature = p.settings.temperature;
  return p;
}

bool near_nonsmooth(const Problem& p) {
  const VariantTraits tr = traits(p.settings.variant);
  const Matrix& view = tr.classification_view == View::Strong ? p.strong : p.weak;
  const Matrix probs = softmax(predict_logits(p.theta, p.phi, view), 1.0);
  const Vector conf = confidences(probs);
  for (double tau : effective_taus(p.settings).taus()) {
    for (double c : conf) {
      if (std::abs(c - tau) < kThresholdMargin) return true;
    }
  }
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (probs(i, p.labels[i]) < kFloorMargin) return true;
  }
  return false;
}

struct Evaluated {
  double loss = 0.0;
  ExtractorGrad grad;
};

Evaluated evaluate_problem(const Problem& p, const ExtractorParams& theta, bool with_grad, bool flip) {
  const VariantTraits tr = traits(p.settings.variant);
  const bool strong_used = tr.classification_view == View::Strong ||
                           (tr.distillation_view && *tr.distillation_view == View::Strong);
  const bool weak_used = tr.classification_view == View::Weak ||
                         (tr.distillation_view && *tr.distillation_view == View::Weak);
  std::optional<ForwardResult> fs, fw;
  if (strong_used) fs = forward(theta, p.phi, p.strong);
  if (weak_used) fw = forward(theta, p.phi, p.weak);
  std::optional<Matrix> teacher;
  if (tr.distillation_view) teacher = predict_logits(p.teacher, p.phi, p.weak);

  LossInputs in;
  in.strong_logits = fs ? &fs->logits : nullptr;
  in.weak_logits = fw ? &fw->logits : nullptr;
  in.teacher_logits = teacher ? &*teacher : nullptr;
  in.pseudo_labels = p.labels;
  CombinedLoss loss = combined_loss(p.settings, in);

  Evaluated out;
  out.loss = loss.breakdown.total;
  if (!with_grad) return out;
  bool flipped = false;
  auto seed_grad = [&](Matrix d) {
    if (flip && !flipped) {
      for (double& v : d.flat()) v = -v;
      flipped = true;
    }
    return d;
  };
  if (fs) accumulate(out.grad, backward(theta, p.phi, fs->trace, seed_grad(std::move(loss.d_strong))));
  if (fw) accumulate(out.grad, backward(theta, p.phi, fw->trace, seed_grad(std::move(loss.d_weak))));
  return out;
}

}  // namespace

const GradCheckTrial& GradCheckReport::worst() const {
  if (trials.empty()) raise(ErrorKind::EmptyInput, "no gradient-check trials were run");
  return *std::max_element(trials.begin(), trials.end(), [](const auto& a, const auto& b) {
    return a.result.max_rel_error < b.result.max_rel_error;
  });
}

GradCheckTrial run_gradcheck_trial(LossVariant variant, std::uint64_t seed, double eps,
                                   bool inject_sign_flip) {
  GradCheckTrial trial;
  trial.variant = variant;
  trial.seed = seed;
  Problem p;
  int redraw = 0;
  do {
    p = draw_problem(variant, seed_of({seed, static_cast<std::uint64_t>(redraw)}), trial);
  } while (near_nonsmooth(p) && ++redraw < kMaxRedraws);
  if (redraw == kMaxRedraws) raise(ErrorKind::Numeric, "could not draw a configuration away from the non-smooth points");

  const Evaluated at = evaluate_problem(p, p.theta, true, inject_sign_flip);
  GradCheckOptions opts;
  opts.eps = eps;
  trial.result = grad_check(
      [&](const ExtractorParams& theta) { return evaluate_problem(p, theta, false, false).loss; }, p.theta,
      at.grad, opts);
  return trial;
}

GradCheckReport run_gradcheck_suite(const GradCheckSuiteOptions& opts) {
  if (opts.trials == 0) raise(ErrorKind::Config, "trials must be positive");
  GradCheckReport report;
  for (LossVariant v : all_variants()) {
    for (std::size_t t = 0; t < opts.trials; ++t) {
      const std::uint64_t seed = seed_of({opts.seed, static_cast<std::uint64_t>(v), t});
      GradCheckTrial trial = run_gradcheck_trial(v, seed, opts.eps, opts.inject_sign_flip);
      if (!(trial.result.max_rel_error < opts.tolerance)) ++report.failures;
      report.trials.push_back(std::move(trial));
    }
  }
  return report;
}

}  // namespace driftlab
