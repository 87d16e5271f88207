#include <cmath>

#include "doctest.h"
#include "driftlab/losses.hpp"
#include "driftlab/netcore.hpp"
#include "driftlab/pseudolabel.hpp"
#include "driftlab/seeding.hpp"
#include "helpers.hpp"
#include "../support/oracles.hpp"

using namespace driftlab;

namespace {

Matrix one_row(std::vector<double> v) {
  const std::size_t k = v.size();
  return Matrix(1, k, std::move(v));
}

// Rows whose max entry is the given confidence; the rest share the remainder.
Matrix probs_with_confidence(const std::vector<double>& conf, std::size_t k) {
  Matrix p(conf.size(), k);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    p(i, 0) = conf[i];
    for (std::size_t j = 1; j < k; ++j) p(i, j) = (1.0 - conf[i]) / static_cast<double>(k - 1);
  }
  return p;
}

}  // namespace

TEST_CASE("threshold schedule") {
  const ThresholdSchedule d;
  CHECK(std::vector<double>(d.taus().begin(), d.taus().end()) == std::vector<double>{0.1, 0.5});
  CHECK(d.weight(0.6) == 2);
  CHECK(d.weight(0.5) == 1);  // strict
  CHECK(d.weight(0.1) == 0);
  CHECK(kind_of([] { ThresholdSchedule({0.5, 0.1}); }) == ErrorKind::Config);
  CHECK(kind_of([] { ThresholdSchedule({0.1, 0.1}); }) == ErrorKind::Config);
  CHECK(kind_of([] { ThresholdSchedule({1.0}); }) == ErrorKind::Config);
  CHECK(kind_of([] { ThresholdSchedule({-0.1}); }) == ErrorKind::Config);
  CHECK(kind_of([] { ThresholdSchedule(std::vector<double>{}); }) == ErrorKind::Config);
}

TEST_CASE("attentive_ce weights and masking") {
  const Matrix p = probs_with_confidence({0.6, 0.3, 0.05}, 21);
  const std::vector<std::size_t> y{0, 3, 1};
  const auto r = attentive_ce(p, y, confidences(p), ThresholdSchedule{});
  CHECK(r.weights == std::vector<int>{2, 1, 0});
  CHECK(r.pass_counts == std::vector<std::size_t>{2, 1});
  for (std::size_t k = 0; k < 21; ++k) CHECK(r.d_logits(2, k) == 0.0);

  SUBCASE("fully masked batch gives exactly zero") {
    const Matrix q = probs_with_confidence({0.1, 0.08, 0.05}, 21);
    const auto z = attentive_ce(q, y, confidences(q), ThresholdSchedule{});
    CHECK(z.loss == 0.0);
    for (double v : z.d_logits.flat()) CHECK(v == 0.0);
  }
  SUBCASE("confidence equal to a threshold does not pass it") {
    const Matrix q = probs_with_confidence({0.5}, 3);
    CHECK(attentive_ce(q, std::vector<std::size_t>{0}, confidences(q), ThresholdSchedule{}).weights[0] == 1);
  }
  SUBCASE("length mismatch") {
    CHECK(kind_of([&] { attentive_ce(p, std::vector<std::size_t>{0, 1}, confidences(p), ThresholdSchedule{}); }) ==
          ErrorKind::Shape);
  }
}

TEST_CASE("attentive_ce scalar case") {
  const Matrix p = one_row({0.75, 0.25});
  const auto r = attentive_ce(p, std::vector<std::size_t>{0}, std::vector<double>{0.75}, ThresholdSchedule{});
  CHECK(r.loss == doctest::Approx(2.0 * -std::log(0.75)).epsilon(1e-15));
  CHECK(r.d_logits(0, 0) == doctest::Approx(2.0 * (0.75 - 1.0)).epsilon(1e-15));
  CHECK(r.d_logits(0, 1) == doctest::Approx(2.0 * 0.25).epsilon(1e-15));
}

TEST_CASE("single zero threshold reduces to plain mean cross-entropy") {
  Rng rng(40);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(10), k = 2 + rng.below(4);
    const Matrix p = oracle::random_probs(rng, n, k);
    std::vector<std::size_t> y(n);
    double ce = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.below(k);
      ce -= std::log(p(i, y[i]));
    }
    ce /= static_cast<double>(n);
    CHECK(std::abs(attentive_ce(p, y, confidences(p), ThresholdSchedule({0.0})).loss - ce) <= 1e-12);
  }
}

TEST_CASE("removing masked samples leaves the gradient unchanged") {
  Rng rng(41);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(10);
    const Matrix z = oracle::random_matrix(rng, n, 4, 1.5);
    const Matrix p = softmax(z);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(4);
    const Vector conf = confidences(p);
    const ThresholdSchedule taus({0.4, 0.6});
    const auto full = attentive_ce(p, y, conf, taus);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
      if (full.weights[i] > 0) keep.push_back(i);
    }
    if (keep.empty()) continue;
    std::vector<std::size_t> ky;
    Vector kc;
    for (std::size_t i : keep) {
      ky.push_back(y[i]);
      kc.push_back(conf[i]);
    }
    const auto part = attentive_ce(select_rows(p, keep), ky, kc, taus);
    const double ratio = static_cast<double>(keep.size()) / static_cast<double>(n);
    CHECK(std::abs(part.loss * ratio - full.loss) <= 1e-12);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(part.d_logits(r, k) * ratio - full.d_logits(keep[r], k)) <= 1e-12);
    }
  }
}

TEST_CASE("kl_distill values") {
  SUBCASE("identical inputs") {
    Rng rng(1);
    const Matrix z = oracle::random_matrix(rng, 4, 3);
    const auto r = kl_distill(z, z, 2.0);
    CHECK(r.loss == 0.0);
    for (double v : r.d_student_logits.flat()) CHECK(v == 0.0);
  }
  SUBCASE("hand example") {
    const Matrix t = one_row({std::log(0.9), std::log(0.1)});
    const Matrix s = one_row({0.0, 0.0});
    const double want = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    const auto r = kl_distill(t, s, 1.0);
    CHECK(r.loss == doctest::Approx(want).epsilon(1e-14));
    CHECK(r.d_student_logits(0, 0) == doctest::Approx(0.5 - 0.9).epsilon(1e-14));
  }
  SUBCASE("temperature guard") {
    const Matrix z(1, 2);
    CHECK(kind_of([&] { kl_distill(z, z, 0.0); }) == ErrorKind::Domain);
    CHECK(kind_of([&] { kl_distill(z, Matrix(1, 3), 1.0); }) == ErrorKind::Shape);
  }
}

TEST_CASE("kl_distill is non-negative, matches the scalar oracle, and is positive off the diagonal") {
  Rng rng(99);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(6), k = 2 + rng.below(5);
    const Matrix a = oracle::random_matrix(rng, n, k, 3.0), b = oracle::random_matrix(rng, n, k, 3.0);
    const double T = 0.5 + 3.0 * rng.uniform();
    const auto r = kl_distill(a, b, T);
    CHECK(r.loss >= 0.0);
    double want = 0;
    for (std::size_t i = 0; i < n; ++i) want += oracle::kl(oracle::softmax(a.row(i), T), oracle::softmax(b.row(i), T));
    want /= static_cast<double>(n);
    CHECK(std::abs(r.loss - want) <= 1e-12 * std::max(1.0, want));

    Matrix c = a;
    c(0, 0) += 0.01 + rng.uniform();
    CHECK(kl_distill(a, c, T).loss > 0.0);
  }
}

TEST_CASE("losses and gradients are shift invariant per row") {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(6), k = 2 + rng.below(4);
    const Matrix teacher = oracle::random_matrix(rng, n, k, 2.0), student = oracle::random_matrix(rng, n, k, 2.0);
    Matrix shifted = student;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = 20.0 * rng.normal();
      for (double& v : shifted.row(i)) v += c;
    }
    const auto a = kl_distill(teacher, student, 2.0), b = kl_distill(teacher, shifted, 2.0);
    CHECK(std::abs(a.loss - b.loss) <= 1e-10);
    for (std::size_t q = 0; q < a.d_student_logits.size(); ++q) {
      CHECK(std::abs(a.d_student_logits.flat()[q] - b.d_student_logits.flat()[q]) <= 1e-10);
    }
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(k);
    const Matrix p = softmax(student), ps = softmax(shifted);
    const auto ca = attentive_ce(p, y, confidences(p), ThresholdSchedule{});
    const auto cb = attentive_ce(ps, y, confidences(ps), ThresholdSchedule{});
    CHECK(std::abs(ca.loss - cb.loss) <= 1e-10);
    for (std::size_t q = 0; q < ca.d_logits.size(); ++q) CHECK(std::abs(ca.d_logits.flat()[q] - cb.d_logits.flat()[q]) <= 1e-10);
  }
}

TEST_CASE("variant table") {
  CHECK(all_variants().size() == 7);
  for (LossVariant v : all_variants()) CHECK(variant_from_string(to_string(v)) == v);
  CHECK(kind_of([] { variant_from_string("nope"); }) == ErrorKind::Config);

  CHECK(traits(LossVariant::AclsAdis).classification_view == View::Strong);
  CHECK(*traits(LossVariant::AclsAdis).distillation_view == View::Strong);
  CHECK(*traits(LossVariant::AclsDis).distillation_view == View::Weak);
  CHECK(traits(LossVariant::ClsDis).classification_view == View::Weak);
  CHECK(*traits(LossVariant::ClsDis).distillation_view == View::Weak);
  CHECK_FALSE(traits(LossVariant::Cls).distillation_view.has_value());
  CHECK(traits(LossVariant::AclsAdisPrime).teacher == TeacherKind::PreviousDomain);
  CHECK(traits(LossVariant::AclsAdis).teacher == TeacherKind::Source);

  LossSettings s;
  s.variant = LossVariant::AclsDisA10;
  CHECK(effective_alpha(s) == 10.0);
  s.variant = LossVariant::Cls;
  CHECK(effective_alpha(s) == 0.0);
  s.variant = LossVariant::AclsAdisM1;
  CHECK(effective_taus(s).size() == 1);
  CHECK(effective_taus(s).taus()[0] == 0.0);
  s.variant = LossVariant::AclsAdis;
  CHECK(effective_alpha(s) == 5.0);
  CHECK(s.temperature == 2.0);
}

TEST_CASE("combined_loss") {
  Rng rng(55);
  const Matrix strong = oracle::random_matrix(rng, 6, 3, 2.0), weak = oracle::random_matrix(rng, 6, 3, 2.0);
  const Matrix teacher = oracle::random_matrix(rng, 6, 3, 2.0);
  std::vector<std::size_t> y{0, 1, 2, 0, 1, 2};
  LossInputs in{&strong, &weak, &teacher, y};

  SUBCASE("alpha zero is attentive_ce alone") {
    LossSettings s;
    s.alpha = 0.0;
    const auto r = combined_loss(s, in);
    const Matrix p = softmax(strong);
    const auto ce = attentive_ce(p, y, confidences(p), s.taus);
    CHECK(r.breakdown.total == ce.loss);
    CHECK(r.d_strong == ce.d_logits);
  }
  SUBCASE("total decomposes exactly for every variant") {
    for (LossVariant v : all_variants()) {
      LossSettings s;
      s.variant = v;
      const auto r = combined_loss(s, in);
      CHECK(r.breakdown.total == r.breakdown.classification + r.breakdown.alpha * r.breakdown.distillation);
      CHECK(r.breakdown.distillation >= 0.0);
      const auto t = traits(v);
      const bool strong_used = t.classification_view == View::Strong || (t.distillation_view && *t.distillation_view == View::Strong);
      const bool weak_used = t.classification_view == View::Weak || (t.distillation_view && *t.distillation_view == View::Weak);
      CHECK(r.d_strong.empty() == !strong_used);
      CHECK(r.d_weak.empty() == !weak_used);
    }
  }
  SUBCASE("matched teacher and full mask annihilate") {
    LossSettings s;
    s.taus = ThresholdSchedule({0.99});
    const Matrix flat(6, 3, 0.0);
    LossInputs m{&flat, &weak, &flat, y};
    const auto r = combined_loss(s, m);
    CHECK(r.breakdown.total == 0.0);
    for (double v : r.d_strong.flat()) CHECK(v == 0.0);
  }
  SUBCASE("classification view and weak-view distillation are routed") {
    LossSettings s;
    s.variant = LossVariant::AclsDis;
    const auto r = combined_loss(s, in);
    const Matrix p = softmax(strong);
    CHECK(r.d_strong == attentive_ce(p, y, confidences(p), s.taus).d_logits);
    const auto kl = kl_distill(teacher, weak, 2.0);
    for (std::size_t q = 0; q < kl.d_student_logits.size(); ++q) CHECK(r.d_weak.flat()[q] == 5.0 * kl.d_student_logits.flat()[q]);
  }
  SUBCASE("missing inputs are configuration errors") {
    LossSettings s;
    LossInputs no_teacher{&strong, &weak, nullptr, y};
    CHECK(kind_of([&] { combined_loss(s, no_teacher); }) == ErrorKind::Config);
    s.variant = LossVariant::ClsDis;
    LossInputs no_weak{&strong, nullptr, &teacher, y};
    CHECK(kind_of([&] { combined_loss(s, no_weak); }) == ErrorKind::Config);
    s.variant = LossVariant::Cls;
    LossInputs only_weak{nullptr, &weak, nullptr, y};
    CHECK(combined_loss(s, only_weak).breakdown.distillation == 0.0);
    s.variant = LossVariant::AclsAdis;
    s.alpha = -1;
    CHECK(kind_of([&] { combined_loss(s, in); }) == ErrorKind::Config);
  }
}
