#include <cmath>
#include <numeric>

#include "doctest.h"
#include "driftlab/losses.hpp"
#include "driftlab/netcore.hpp"
#include "driftlab/pseudolabel.hpp"
#include "driftlab/seeding.hpp"
#include "helpers.hpp"
#include "../support/oracles.hpp"

using namespace driftlab;

namespace {

const std::vector<std::size_t> kSmall{4, 8, 3};

ClassifierParams random_head(Rng& rng, std::size_t d, std::size_t k) {
  ClassifierParams phi{oracle::random_matrix(rng, k, d), Vector(k)};
  for (double& b : phi.bias) b = 0.3 * rng.normal();
  return phi;
}

}  // namespace

TEST_CASE("init_extractor is deterministic and seed sensitive") {
  const auto a = init_extractor(7, kSmall);
  const auto b = init_extractor(7, kSmall);
  const auto c = init_extractor(8, kSmall);
  CHECK(a == b);
  CHECK(param_bytes(a.layers) == param_bytes(b.layers));
  CHECK_FALSE(a == c);
  for (const auto& l : a.layers) {
    for (double v : l.bias) CHECK(v == 0.0);
  }
  CHECK(a.dims() == kSmall);
}

TEST_CASE("init_extractor weight spread follows the fan-in rule") {
  const std::vector<std::size_t> dims{16, 32, 8};
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    double s = 0, ss = 0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto p = init_extractor(seed, dims);
      for (double w : p.layers[l].weight.flat()) {
        s += w;
        ss += w * w;
        ++n;
      }
    }
    const double mean = s / n, sd = std::sqrt(ss / n - mean * mean);
    const double target = std::sqrt(2.0 / static_cast<double>(dims[l]));
    CHECK(init_weight_std(dims[l]) == doctest::Approx(target));
    CHECK(std::abs(sd - target) < 0.2 * target);
  }
}

TEST_CASE("init_extractor rejects bad dims") {
  CHECK(kind_of([] { init_extractor(1, std::vector<std::size_t>{4}); }) == ErrorKind::Config);
  CHECK(kind_of([] { init_extractor(1, std::vector<std::size_t>{}); }) == ErrorKind::Config);
  CHECK(kind_of([] { init_extractor(1, std::vector<std::size_t>{4, 0, 3}); }) == ErrorKind::Config);
}

TEST_CASE("forward of an all-zero extractor returns the classifier bias") {
  auto theta = init_extractor(3, kSmall);
  for (auto& l : theta.layers) {
    for (double& w : l.weight.flat()) w = 0;
  }
  Rng rng(5);
  ClassifierParams phi{oracle::random_matrix(rng, 4, 3), {0.5, -1.0, 2.0, 0.25}};
  const auto r = forward(theta, phi, oracle::random_matrix(rng, 6, 4));
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t k = 0; k < 4; ++k) CHECK(r.logits(i, k) == phi.bias[k]);
  }
}

TEST_CASE("forward with identity layers passes inputs through") {
  ExtractorParams theta;
  Matrix eye(3, 3);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  theta.layers.push_back({eye, Vector(3, 0.0)});
  ClassifierParams phi{eye, Vector(3, 0.0)};
  Rng rng(9);
  const Matrix x = oracle::random_matrix(rng, 5, 3);
  const auto r = forward(theta, phi, x);
  CHECK(r.logits == x);
  CHECK(r.features == x);
}

TEST_CASE("forward matches the triple-loop reference") {
  for (auto act : {Activation::Softplus, Activation::Tanh}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const std::vector<std::size_t> dims{5, 7, 6, 4};
      auto theta = init_extractor(seed, dims, act);
      for (auto& l : theta.layers) {
        for (double& b : l.bias) b = rng.normal();
      }
      const ClassifierParams phi = random_head(rng, 4, 5);
      const Matrix x = oracle::random_matrix(rng, 9, 5);
      const Matrix got = forward(theta, phi, x).logits;
      const Matrix want = oracle::logits(theta, phi, x);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.flat()[i] == doctest::Approx(want.flat()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward rejects a width mismatch") {
  const auto theta = init_extractor(1, kSmall);
  Rng rng(1);
  const ClassifierParams phi = init_classifier(2, 3, 2);
  CHECK(kind_of([&] { forward(theta, phi, Matrix(2, 5)); }) == ErrorKind::Shape);
  const ClassifierParams wrong = init_classifier(2, 4, 2);
  CHECK(kind_of([&] { forward(theta, wrong, Matrix(2, 4)); }) == ErrorKind::Shape);
}

TEST_CASE("softmax examples and properties") {
  const Matrix u(1, 4, 0.7);
  const Matrix pu = softmax(u);
  for (double p : pu.flat()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  const Matrix a(1, 2, std::vector<double>{0.0, std::log(2.0)});
  auto pa = softmax(a, 1.0);
  CHECK(pa(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(pa(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-14));
  const Matrix b(1, 2, std::vector<double>{0.0, 2 * std::log(2.0)});
  auto pb = softmax(b, 2.0);
  CHECK(pb(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(pb(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-14));

  CHECK(kind_of([&] { softmax(a, 0.0); }) == ErrorKind::Domain);
  CHECK(kind_of([&] { softmax(a, -1.0); }) == ErrorKind::Domain);

  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Matrix z = oracle::random_matrix(rng, 3, 5, 10.0);
    const double T = 0.2 + 4 * rng.uniform();
    const Matrix p = softmax(z, T), q = softmax(scaled(z, 1.0 / T), 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (double v : p.row(i)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p.flat()[i] - q.flat()[i]) <= 1e-12);
  }
  // Max subtraction keeps huge logits finite.
  const Matrix big(1, 3, std::vector<double>{1000.0, 999.0, -1000.0});
  const Matrix pbig = softmax(big);
  for (double v : pbig.flat()) CHECK(std::isfinite(v));
}

TEST_CASE("backward: zero seed, linearity, and finite differences") {
  Rng rng(21);
  const std::vector<std::size_t> dims{4, 6, 5, 3};
  auto theta = init_extractor(21, dims);
  for (auto& l : theta.layers) {
    for (double& b : l.bias) b = 0.5 * rng.normal();
  }
  const ClassifierParams phi = random_head(rng, 3, 4);
  const Matrix x = oracle::random_matrix(rng, 5, 4);
  const auto fr = forward(theta, phi, x);

  const auto zero = backward(theta, phi, fr.trace, Matrix(5, 4));
  for (const auto& l : zero.layers) {
    for (double v : l.weight.flat()) CHECK(v == 0.0);
    for (double v : l.bias) CHECK(v == 0.0);
  }

  const Matrix d = oracle::random_matrix(rng, 5, 4);
  const auto g1 = backward(theta, phi, fr.trace, d);
  const auto g2 = backward(theta, phi, fr.trace, scaled(d, 2.0));
  const auto f1 = flatten(g1.layers), f2 = flatten(g2.layers);
  for (std::size_t i = 0; i < f1.size(); ++i) CHECK(f2[i] == 2.0 * f1[i]);

  const auto r = grad_check(
      [&](const ExtractorParams& p) {
        const Matrix l = predict_logits(p, phi, x);
        double s = 0;
        for (std::size_t i = 0; i < l.size(); ++i) s += l.flat()[i] * d.flat()[i];
        return s;
      },
      theta, g1);
  CHECK(r.checked == parameter_count(theta.layers));
  CHECK(r.max_rel_error < 1e-6);

  CHECK(kind_of([&] { backward(theta, phi, fr.trace, Matrix(4, 4)); }) == ErrorKind::Shape);
}

TEST_CASE("backward_full includes the classifier gradient") {
  Rng rng(4);
  const auto theta = init_extractor(4, std::vector<std::size_t>{3, 5, 2});
  ClassifierParams phi = init_classifier(5, 2, 3);
  const Matrix x = oracle::random_matrix(rng, 4, 3);
  const Matrix d = oracle::random_matrix(rng, 4, 3);
  const auto fr = forward(theta, phi, x);
  const auto full = backward_full(theta, phi, fr.trace, d);
  CHECK(flatten(full.extractor.layers) == flatten(backward(theta, phi, fr.trace, d).layers));
  std::vector<DenseLayer> head{{phi.weight, phi.bias}};
  const auto point = flatten(head);
  std::vector<DenseLayer> grad{full.classifier};
  const auto r = grad_check(
      [&](std::span<const double> flat) {
        std::vector<DenseLayer> h = head;
        unflatten(flat, h);
        const Matrix l = predict_logits(theta, {h[0].weight, h[0].bias}, x);
        double s = 0;
        for (std::size_t i = 0; i < l.size(); ++i) s += l.flat()[i] * d.flat()[i];
        return s;
      },
      point, flatten(grad));
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("sgd_step arithmetic") {
  auto scalar = [](double v) { return std::vector<DenseLayer>{{Matrix(1, 1, v), Vector{0.0}}}; };

  SUBCASE("zero gradient and velocity is a fixed point") {
    auto p = scalar(1.5);
    auto st = make_optimizer_state(p);
    sgd_step(p, scalar(0.0), st, {0.1, 0.9, 0.0, true});
    CHECK(p[0].weight(0, 0) == 1.5);
  }
  SUBCASE("plain SGD") {
    auto p = scalar(1.0);
    auto st = make_optimizer_state(p);
    sgd_step(p, scalar(2.0), st, {0.1, 0.0, 0.0, false});
    CHECK(p[0].weight(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("two Nesterov steps on f = theta^2") {
    // Hand recurrence, lr 0.1, mu 0.9:
    // g=2.0  v=2.0   step=2+1.8=3.8      theta=0.62
    // g=1.24 v=3.04  step=1.24+2.736     theta=0.2224
    auto p = scalar(1.0);
    auto st = make_optimizer_state(p);
    const SgdOptions o{0.1, 0.9, 0.0, true};
    sgd_step(p, scalar(2.0 * p[0].weight(0, 0)), st, o);
    CHECK(p[0].weight(0, 0) == doctest::Approx(0.62).epsilon(1e-14));
    sgd_step(p, scalar(2.0 * p[0].weight(0, 0)), st, o);
    CHECK(p[0].weight(0, 0) == doctest::Approx(0.2224).epsilon(1e-14));
    CHECK(st.steps == 2);
  }
  SUBCASE("weight decay is added to the gradient") {
    auto p = scalar(2.0);
    auto st = make_optimizer_state(p);
    sgd_step(p, scalar(0.0), st, {0.5, 0.0, 0.1, false});
    CHECK(p[0].weight(0, 0) == doctest::Approx(2.0 - 0.5 * 0.2).epsilon(1e-15));
  }
  SUBCASE("shape mismatch") {
    auto p = scalar(1.0);
    auto st = make_optimizer_state(p);
    std::vector<DenseLayer> g{{Matrix(1, 2), Vector{0.0}}};
    CHECK(kind_of([&] { sgd_step(p, g, st, {}); }) == ErrorKind::Shape);
  }
}

TEST_CASE("grad_check guards and the quadratic case") {
  std::vector<double> theta{0.3, -1.2, 2.5, 0.0, 4.0};
  const FlatLoss half_sq = [](std::span<const double> t) {
    double s = 0;
    for (double v : t) s += 0.5 * v * v;
    return s;
  };
  const auto r = grad_check(half_sq, theta, theta);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.checked == theta.size());

  GradCheckOptions zero;
  zero.eps = 0.0;
  CHECK(kind_of([&] { grad_check(half_sq, theta, theta, zero); }) == ErrorKind::Domain);
  const FlatLoss bad = [](std::span<const double>) { return std::nan(""); };
  CHECK(kind_of([&] { grad_check(bad, theta, theta); }) == ErrorKind::Numeric);

  // A wrong analytic gradient is caught.
  std::vector<double> wrong = theta;
  wrong[2] = -wrong[2];
  CHECK(grad_check(half_sq, theta, wrong).worst_index == 2);

  GradCheckOptions sub;
  sub.max_coords = 3;
  sub.subsample_seed = 4;
  CHECK(grad_check(half_sq, theta, theta, sub).checked == 3);
}

TEST_CASE("combined loss gradient on a two-hidden-layer net, N=8, K=3") {
  Rng rng(77);
  const std::vector<std::size_t> dims{5, 6, 6, 4};
  auto theta = init_extractor(77, dims);
  const auto teacher = init_extractor(78, dims);
  const ClassifierParams phi = init_classifier(79, 4, 3);
  const Matrix strong = oracle::random_matrix(rng, 8, 5), weak = oracle::random_matrix(rng, 8, 5);
  std::vector<std::size_t> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(rng.below(3));
  const Matrix teacher_logits = predict_logits(teacher, phi, weak);
  LossSettings settings;
  // Thresholds placed away from every confidence of this draw.
  settings.taus = ThresholdSchedule({0.0, 0.34});

  auto eval = [&](const ExtractorParams& p, ExtractorGrad* grad) {
    const auto fs = forward(p, phi, strong);
    LossInputs in;
    in.strong_logits = &fs.logits;
    in.teacher_logits = &teacher_logits;
    in.pseudo_labels = labels;
    const CombinedLoss l = combined_loss(settings, in);
    if (grad) *grad = backward(p, phi, fs.trace, l.d_strong);
    return l.breakdown.total;
  };
  for (double c : confidences(softmax(predict_logits(theta, phi, strong)))) {
    REQUIRE(std::abs(c - 0.34) > 1e-3);
  }
  ExtractorGrad g;
  eval(theta, &g);
  const auto r = grad_check([&](const ExtractorParams& p) { return eval(p, nullptr); }, theta, g);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("forward and backward are bit-deterministic") {
  Rng rng(3);
  const auto theta = init_extractor(3, std::vector<std::size_t>{4, 8, 8, 3});
  const ClassifierParams phi = init_classifier(4, 3, 5);
  const Matrix x = oracle::random_matrix(rng, 7, 4), d = oracle::random_matrix(rng, 7, 5);
  const auto a = forward(theta, phi, x), b = forward(theta, phi, x);
  CHECK(a.logits == b.logits);
  CHECK(flatten(backward(theta, phi, a.trace, d).layers) == flatten(backward(theta, phi, b.trace, d).layers));
}

TEST_CASE("parameter serialization round-trips bit-exactly") {
  Rng rng(8);
  auto theta = init_extractor(8, std::vector<std::size_t>{4, 8, 3}, Activation::Tanh);
  for (auto& l : theta.layers) {
    for (double& b : l.bias) b = rng.normal() / 3.0;
  }
  const ClassifierParams phi = init_classifier(9, 3, 4);
  auto st = make_optimizer_state(theta.layers);
  sgd_step(theta, backward(theta, phi, forward(theta, phi, oracle::random_matrix(rng, 3, 4)).trace,
                           oracle::random_matrix(rng, 3, 4)),
           st, {});

  const auto t2 = extractor_from_json(nlohmann::json::parse(to_json(theta).dump()));
  const auto p2 = classifier_from_json(nlohmann::json::parse(to_json(phi).dump()));
  const auto s2 = optimizer_from_json(nlohmann::json::parse(to_json(st).dump()));
  CHECK(param_bytes(t2.layers) == param_bytes(theta.layers));
  CHECK(t2 == theta);
  CHECK(param_bytes(p2) == param_bytes(phi));
  CHECK(s2.steps == st.steps);
  CHECK(flatten(s2.velocity) == flatten(st.velocity));
  CHECK(digest(t2) == digest(theta));
  CHECK(digest(theta).size() == 16);
}
