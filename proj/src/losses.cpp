#include "driftlab/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "driftlab/error.hpp"
#include "driftlab/netcore.hpp"
#include "driftlab/pseudolabel.hpp"

namespace driftlab {

namespace {

constexpr double kProbFloor = 1e-30;

constexpr std::array<LossVariant, 7> kVariants{
    LossVariant::AclsAdis,   LossVariant::AclsDis,    LossVariant::ClsDis,
    LossVariant::Cls,        LossVariant::AclsAdisM1, LossVariant::AclsDisA10,
    LossVariant::AclsAdisPrime};

Vector log_softmax_row(std::span<const double> z, double temperature) {
  double top = z[0];
  for (double v : z) top = std::max(top, v);
  double total = 0.0;
  for (double v : z) total += std::exp((v - top) / temperature);
  const double lse = std::log(total);
  Vector out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = (z[k] - top) / temperature - lse;
  return out;
}

void add_into(Matrix& dst, const Matrix& src, double factor) {
  if (dst.empty()) {
    dst = scaled(src, factor);
    return;
  }
  auto d = dst.flat();
  auto s = src.flat();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

const Matrix& pick(const LossInputs& in, View v, const char* what) {
  const Matrix* m = v == View::Strong ? in.strong_logits : in.weak_logits;
  if (m == nullptr) {
    raise(ErrorKind::Config, std::string(what) + " needs " +
                                 (v == View::Strong ? "strong" : "weak") + "-view logits");
  }
  return *m;
}

}  // namespace

ThresholdSchedule::ThresholdSchedule(std::vector<double> taus) : taus_(std::move(taus)) {
  if (taus_.empty()) raise(ErrorKind::Config, "threshold schedule needs at least one tau");
  for (std::size_t m = 0; m < taus_.size(); ++m) {
    if (!(taus_[m] >= 0.0 && taus_[m] < 1.0)) raise(ErrorKind::Config, "tau must lie in [0, 1)");
    if (m > 0 && !(taus_[m] > taus_[m - 1])) raise(ErrorKind::Config, "taus must be strictly increasing");
  }
}

int ThresholdSchedule::weight(double conf) const {
  int w = 0;
  for (double t : taus_) w += conf > t ? 1 : 0;
  return w;
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::AclsAdis: return "acls_adis";
    case LossVariant::AclsDis: return "acls_dis";
    case LossVariant::ClsDis: return "cls_dis";
    case LossVariant::Cls: return "cls";
    case LossVariant::AclsAdisM1: return "acls_adis_m1";
    case LossVariant::AclsDisA10: return "acls_dis_a10";
    case LossVariant::AclsAdisPrime: return "acls_adis_prime";
  }
  return "unknown";
}

LossVariant variant_from_string(const std::string& name) {
  for (LossVariant v : kVariants) {
    if (to_string(v) == name) return v;
  }
  raise(ErrorKind::Config, "unknown loss variant '" + name + "'");
}

std::span<const LossVariant> all_variants() { return kVariants; }

VariantTraits traits(LossVariant v) {
  VariantTraits t;
  switch (v) {
    case LossVariant::AclsAdis:
      break;
    case LossVariant::AclsDis:
      t.distillation_view = View::Weak;
      break;
    case LossVariant::ClsDis:
      t.classification_view = View::Weak;
      t.distillation_view = View::Weak;
      break;
    case LossVariant::Cls:
      t.classification_view = View::Weak;
      t.distillation_view = std::nullopt;
      t.alpha_override = 0.0;
      break;
    case LossVariant::AclsAdisM1:
      t.single_zero_threshold = true;
      break;
    case LossVariant::AclsDisA10:
      t.distillation_view = View::Weak;
      t.alpha_override = 10.0;
      break;
    case LossVariant::AclsAdisPrime:
      t.teacher = TeacherKind::PreviousDomain;
      break;
  }
  return t;
}

AttentiveResult attentive_ce(const Matrix& student_probs, std::span<const std::size_t> labels,
                             std::span<const double> confidences, const ThresholdSchedule& taus) {
  const std::size_t n = student_probs.rows(), k_count = student_probs.cols();
  if (labels.size() != n || confidences.size() != n) {
    raise(ErrorKind::Shape, "attentive_ce: probs, labels and confidences differ in length");
  }
  AttentiveResult r;
  r.d_logits = Matrix(n, k_count);
  r.weights.assign(n, 0);
  r.pass_counts.assign(taus.size(), 0);
  if (n == 0) return r;

  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k_count) raise(ErrorKind::Shape, "pseudo label out of range");
    for (std::size_t m = 0; m < taus.size(); ++m) {
      if (confidences[i] > taus.taus()[m]) ++r.pass_counts[m];
    }
    const int w = taus.weight(confidences[i]);
    r.weights[i] = w;
    if (w == 0) continue;
    auto p = student_probs.row(i);
    total += w * -std::log(std::max(p[labels[i]], kProbFloor));
    const double scale = w * inv_n;
    for (std::size_t k = 0; k < k_count; ++k) {
      r.d_logits(i, k) = scale * (p[k] - (k == labels[i] ? 1.0 : 0.0));
    }
  }
  r.loss = total * inv_n;
  return r;
}

DistillResult kl_distill(const Matrix& teacher_logits, const Matrix& student_logits,
                         double temperature) {
  if (!(temperature > 0.0)) raise(ErrorKind::Domain, "distillation temperature must be positive");
  require_shape(student_logits, teacher_logits.rows(), teacher_logits.cols(), "student logits");
  const std::size_t n = student_logits.rows(), k_count = student_logits.cols();
  DistillResult r{0.0, Matrix(n, k_count)};
  if (n == 0) return r;

  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector log_t = log_softmax_row(teacher_logits.row(i), temperature);
    const Vector log_s = log_softmax_row(student_logits.row(i), temperature);
    double kl = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      const double pt = std::exp(log_t[k]);
      if (pt > 0.0) kl += pt * (log_t[k] - log_s[k]);
      r.d_student_logits(i, k) = inv_n / temperature * (std::exp(log_s[k]) - pt);
    }
    // Rounding can leave tiny negative values for near-identical rows.
    total += std::max(kl, 0.0);
  }
  r.loss = total * inv_n;
  return r;
}

double effective_alpha(const LossSettings& s) {
  const auto t = traits(s.variant);
  return t.alpha_override.value_or(s.alpha);
}

ThresholdSchedule effective_taus(const LossSettings& s) {
  return traits(s.variant).single_zero_threshold ? ThresholdSchedule({0.0}) : s.taus;
}

CombinedLoss combined_loss(const LossSettings& settings, const LossInputs& inputs) {
  if (!(settings.alpha >= 0.0)) raise(ErrorKind::Config, "alpha must be non-negative");
  const VariantTraits t = traits(settings.variant);
  const double alpha = effective_alpha(settings);
  const ThresholdSchedule taus = effective_taus(settings);

  CombinedLoss out;
  LossBreakdown& b = out.breakdown;
  b.alpha = alpha;
  b.temperature = settings.temperature;

  const Matrix& cls_logits = pick(inputs, t.classification_view, "classification term");
  const Matrix probs = softmax(cls_logits, 1.0);
  const Vector conf = confidences(probs);
  AttentiveResult ce = attentive_ce(probs, inputs.pseudo_labels, conf, taus);
  b.classification = ce.loss;
  b.pass_counts = ce.pass_counts;
  b.masked = static_cast<std::size_t>(std::count(ce.weights.begin(), ce.weights.end(), 0));
  add_into(t.classification_view == View::Strong ? out.d_strong : out.d_weak, ce.d_logits, 1.0);

  if (t.distillation_view) {
    if (inputs.teacher_logits == nullptr) {
      raise(ErrorKind::Config, "variant " + to_string(settings.variant) + " needs teacher logits");
    }
    const Matrix& student = pick(inputs, *t.distillation_view, "distillation term");
    DistillResult kl = kl_distill(*inputs.teacher_logits, student, settings.temperature);
    b.distillation = kl.loss;
    add_into(*t.distillation_view == View::Strong ? out.d_strong : out.d_weak,
             kl.d_student_logits, alpha);
  }
  b.total = b.classification + alpha * b.distillation;
  return out;
}

}  // namespace driftlab
