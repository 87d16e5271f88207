#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "driftlab/config.hpp"
#include "driftlab/domainstream.hpp"
#include "helpers.hpp"
#include "../support/oracles.hpp"

using namespace driftlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("driftlab_ds_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

double row_norm_centered(const Matrix& X, std::size_t i, const Vector& mean) {
  double s = 0;
  for (std::size_t j = 0; j < X.cols(); ++j) s += (X(i, j) - mean[j]) * (X(i, j) - mean[j]);
  return std::sqrt(s);
}

Vector column_means(const Matrix& X) {
  Vector m(X.cols(), 0.0);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    for (std::size_t j = 0; j < X.cols(); ++j) m[j] += X(i, j);
  }
  for (double& v : m) v /= static_cast<double>(X.rows());
  return m;
}

}  // namespace

TEST_CASE("base task counts and determinism") {
  TaskConfig cfg;
  cfg.num_classes = 3;
  cfg.n_per_class = 100;
  const auto t = make_base_task(11, cfg);
  CHECK(t.size() == 300);
  std::vector<std::size_t> per(3, 0);
  for (auto y : t.train.y) ++per[y];
  for (auto y : t.test.y) ++per[y];
  CHECK(per == std::vector<std::size_t>{100, 100, 100});
  CHECK(t.test.size() == 60);
  CHECK(t.train.split == Split::Train);
  CHECK(t.test.split == Split::Test);

  const auto u = make_base_task(11, cfg);
  CHECK(t.train == u.train);
  CHECK(t.test == u.test);
  CHECK_FALSE(make_base_task(12, cfg).train == t.train);
}

TEST_CASE("class means are well separated") {
  const auto g = make_geometry(3, TaskConfig{});
  for (std::size_t a = 0; a < g.means.rows(); ++a) {
    for (std::size_t b = a + 1; b < g.means.rows(); ++b) {
      double d2 = 0;
      for (std::size_t j = 0; j < g.means.cols(); ++j) d2 += std::pow(g.means(a, j) - g.means(b, j), 2);
      CHECK(std::sqrt(d2) >= 4.0 - 1e-12);
    }
  }
  TaskConfig tight;
  tight.num_classes = 40;
  tight.input_dim = 2;
  tight.class_sep = 10.0;
  CHECK(kind_of([&] { make_geometry(1, tight); }) == ErrorKind::Config);
}

TEST_CASE("linear probe separates the default task") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto t = make_base_task(seed, TaskConfig{});
    CHECK(oracle::linear_probe(t.train, t.test) >= 0.95);
  }
}

TEST_CASE("domain shift geometry") {
  const auto t = make_base_task(4, TaskConfig{});
  const Dataset& ds = t.test;
  SUBCASE("identity spec") {
    DomainSpec id;
    id.id = "same";
    CHECK(apply_domain_shift(ds, id, 9).X == ds.X);
  }
  SUBCASE("rotations are isometries") {
    DomainSpec rot;
    rot.id = "rot";
    rot.rotations = {{0, 1, 0.7}, {2, 5, -1.3}, {1, 2, 2.9}};
    const Dataset out = apply_domain_shift(ds, rot, 9);
    const Vector m0 = column_means(ds.X), m1 = column_means(out.X);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(std::abs(row_norm_centered(ds.X, i, m0) - row_norm_centered(out.X, i, m1)) <= 1e-9);
    }
    CHECK(out.y == ds.y);
    CHECK(out.domain_id == "rot");
  }
  SUBCASE("noiseless shift inverts") {
    DomainSpec s;
    s.id = "full";
    s.rotations = {{0, 3, 0.4}, {7, 2, 1.1}};
    s.scale = Vector(16, 1.0);
    s.bias = Vector(16, 0.0);
    for (std::size_t j = 0; j < 16; ++j) {
      s.scale[j] = 0.5 + 0.1 * static_cast<double>(j);
      s.bias[j] = std::sin(static_cast<double>(j)) * 3.0;
    }
    const Dataset back = invert_domain_shift(apply_domain_shift(ds, s, 1), s);
    for (std::size_t q = 0; q < ds.X.size(); ++q) CHECK(std::abs(back.X.flat()[q] - ds.X.flat()[q]) <= 1e-9);
  }
  SUBCASE("invalid specs") {
    DomainSpec s;
    s.id = "bad";
    s.bias = Vector(3, 0.0);
    CHECK(kind_of([&] { apply_domain_shift(ds, s, 1); }) == ErrorKind::Shape);
    s.bias.clear();
    s.scale = Vector(16, 1.0);
    s.scale[3] = 0.0;
    CHECK(kind_of([&] { apply_domain_shift(ds, s, 1); }) == ErrorKind::Config);
    s.scale.clear();
    s.rotations = {{2, 2, 0.1}};
    CHECK(kind_of([&] { apply_domain_shift(ds, s, 1); }) == ErrorKind::Config);
  }
}

TEST_CASE("sequence protocol") {
  const auto cfg = default_config();
  const auto seq = build_sequence(cfg.sequence, 21);
  REQUIRE(seq.domains.size() == 3);
  REQUIRE(seq.steps.size() == 6);
  std::vector<int> halves;
  for (const auto& s : seq.steps) halves.push_back(s.half);
  CHECK(halves == std::vector<int>{1, 1, 1, 2, 2, 2});
  for (std::size_t i = 0; i < 3; ++i) CHECK(seq.steps[i].domain_id == seq.steps[i + 3].domain_id);

  for (std::size_t d = 0; d < 3; ++d) {
    const auto& a = seq.steps[d].pool_indices;
    const auto& b = seq.steps[d + 3].pool_indices;
    const std::size_t pool = seq.domains[seq.steps[d].domain_index].train_pool.size();
    std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::set<std::size_t> both;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.end()));
    CHECK(both.empty());
    CHECK(sa.size() + sb.size() == pool);
    CHECK(*sb.rbegin() < pool);
    CHECK(*sa.rbegin() < pool);
    const auto diff = a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
    CHECK(diff <= 1);
    CHECK(seq.steps[d].train.size() == a.size());
  }

  const auto again = build_sequence(cfg.sequence, 21);
  for (std::size_t s = 0; s < 6; ++s) {
    CHECK(again.steps[s].train == seq.steps[s].train);
    CHECK(again.steps[s].pool_indices == seq.steps[s].pool_indices);
  }
  CHECK(again.source_train == seq.source_train);
  for (std::size_t d = 0; d < 3; ++d) CHECK(again.domains[d].test == seq.domains[d].test);
}

TEST_CASE("split_halves sizes") {
  for (std::size_t n : {0u, 1u, 7u, 100u, 101u}) {
    for (int h : {1, 2, 3}) {
      const auto parts = split_halves(n, h, 5);
      std::size_t total = 0, lo = n, hi = 0;
      std::set<std::size_t> all;
      for (const auto& p : parts) {
        total += p.size();
        lo = std::min(lo, p.size());
        hi = std::max(hi, p.size());
        all.insert(p.begin(), p.end());
      }
      CHECK(total == n);
      CHECK(all.size() == n);
      CHECK(hi - std::min(lo, hi) <= 1);
    }
  }
  CHECK(kind_of([] { split_halves(4, 0, 1); }) == ErrorKind::Config);
}

TEST_CASE("sequence configuration errors") {
  auto cfg = default_config().sequence;
  auto dup = cfg;
  dup.domains[1].id = dup.domains[0].id;
  CHECK(kind_of([&] { build_sequence(dup, 1); }) == ErrorKind::Config);
  auto bad_order = cfg;
  bad_order.order = {cfg.domains[0].id, cfg.domains[0].id};
  CHECK(kind_of([&] { build_sequence(bad_order, 1); }) == ErrorKind::Config);
  auto unknown = cfg;
  unknown.order = {cfg.domains[0].id, "elsewhere"};
  CHECK(kind_of([&] { build_sequence(unknown, 1); }) == ErrorKind::Config);
  auto reordered = cfg;
  reordered.order = {cfg.domains[2].id, cfg.domains[0].id};
  const auto seq = build_sequence(reordered, 1);
  CHECK(seq.steps.size() == 4);
  CHECK(seq.steps[0].domain_id == cfg.domains[2].id);
}

TEST_CASE("domain csv round trip is bit exact") {
  const fs::path dir = scratch("roundtrip");
  const auto t = make_base_task(8, TaskConfig{});
  DomainSpec s;
  s.id = "odd";
  s.noise_sigma = 0.37;
  s.rotations = {{0, 1, 0.123456789}};
  const Dataset ds = apply_domain_shift(t.train, s, 3);
  write_domain_csv(ds, dir / "odd.csv");
  const Dataset back = read_domain_csv(dir / "odd.csv", 5, 16, "odd", Split::Train);
  CHECK(back.X == ds.X);
  CHECK(back.y == ds.y);
  CHECK(back.num_classes == 5);
}

TEST_CASE("malformed domain csv files name the location") {
  const fs::path dir = scratch("bad");
  const auto read = [&](const std::string& name) {
    return message_of([&] { read_domain_csv(dir / name, 3, 2, "x", Split::Train); });
  };
  CHECK(kind_of([&] { read_domain_csv(dir / "missing.csv", 3, 2, "x", Split::Train); }) == ErrorKind::Ingestion);
  CHECK(read("missing.csv").find("missing.csv") != std::string::npos);

  write_text(dir / "header.csv", "label,a,b\n0,1,2\n");
  CHECK(read("header.csv").find("header.csv:1") != std::string::npos);

  write_text(dir / "range.csv", "label,f0,f1\n0,1,2\n3,1,2\n");
  const auto range = read("range.csv");
  CHECK(range.find("range.csv:3") != std::string::npos);
  CHECK(range.find("label out of range") != std::string::npos);

  write_text(dir / "cell.csv", "label,f0,f1\n0,1,2\n1,1,2\n2,abc,2\n");
  const auto cell = read("cell.csv");
  CHECK(cell.find("cell.csv:4") != std::string::npos);
  CHECK(cell.find("f0") != std::string::npos);

  write_text(dir / "short.csv", "label,f0,f1\n0,1\n");
  CHECK(read("short.csv").find("short.csv:2") != std::string::npos);
  write_text(dir / "neg.csv", "label,f0,f1\n-1,1,2\n");
  CHECK(read("neg.csv").find("label out of range") != std::string::npos);
}

TEST_CASE("external manifest") {
  const fs::path dir = scratch("manifest");
  const auto t = make_base_task(2, TaskConfig{});
  fs::create_directories(dir / "data");
  write_domain_csv(t.train, dir / "data/a_train.csv");
  write_domain_csv(t.test, dir / "data/a_test.csv");
  write_domain_csv(t.test, dir / "data/b_train.csv");
  write_domain_csv(t.train, dir / "data/b_test.csv");
  nlohmann::json m = {{"num_classes", 5},
                      {"input_dim", 16},
                      {"domains",
                       {{{"domain_id", "a"}, {"train_csv", "data/a_train.csv"}, {"test_csv", "data/a_test.csv"}},
                        {{"domain_id", "b"}, {"train_csv", "data/b_train.csv"}, {"test_csv", "data/b_test.csv"}}}}};
  write_text(dir / "manifest.json", m.dump());
  const auto ext = load_external(dir / "manifest.json");
  REQUIRE(ext.domains.size() == 2);
  CHECK(ext.domains[0].spec.id == "a");
  CHECK(ext.domains[0].train_pool.size() == t.train.size());
  CHECK(ext.domains[1].test.size() == t.train.size());
  CHECK(ext.domains[1].test.X == t.train.X);

  m["domains"][1]["domain_id"] = "a";
  write_text(dir / "dup.json", m.dump());
  CHECK(kind_of([&] { load_external(dir / "dup.json"); }) == ErrorKind::Ingestion);
  m["domains"][1]["domain_id"] = "b";
  m["num_classes"] = 4;
  write_text(dir / "small.json", m.dump());
  CHECK(message_of([&] { load_external(dir / "small.json"); }).find("label out of range") != std::string::npos);
  CHECK(kind_of([&] { load_external(dir / "absent.json"); }) == ErrorKind::Ingestion);
  write_text(dir / "junk.json", "{not json");
  CHECK(kind_of([&] { load_external(dir / "junk.json"); }) == ErrorKind::Ingestion);
}

TEST_CASE("domain spec json") {
  for (const auto& d : default_config().sequence.domains) CHECK(domain_spec_from_json(to_json(d)) == d);
  CHECK(kind_of([] { domain_spec_from_json({{"id", "x"}, {"colour", 1}}); }) == ErrorKind::Config);
  CHECK(kind_of([] { domain_spec_from_json({{"scale", {1.0}}}); }) == ErrorKind::Config);
}
