#include "driftlab/domainstream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "driftlab/error.hpp"
#include "driftlab/io.hpp"
#include "driftlab/seeding.hpp"

namespace driftlab {

namespace {

constexpr int kPlacementAttempts = 20000;
constexpr int kPlacementCandidates = 64;

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

void rotate_row(std::span<double> v, const PlaneRotation& r, double sign) {
  const double c = std::cos(r.angle), s = sign * std::sin(r.angle);
  const double a = v[r.axis_a], b = v[r.axis_b];
  v[r.axis_a] = c * a - s * b;
  v[r.axis_b] = s * a + c * b;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows, Split split) {
  Dataset out;
  out.X = select_rows(ds.X, rows);
  out.y.reserve(rows.size());
  for (std::size_t r : rows) out.y.push_back(ds.y[r]);
  out.split = split;
  out.domain_id = ds.domain_id;
  out.num_classes = ds.num_classes;
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void DomainSpec::validate(std::size_t dim) const {
  if (!scale.empty() && scale.size() != dim) raise(ErrorKind::Shape, "domain '" + id + "' scale length mismatch");
  if (!bias.empty() && bias.size() != dim) raise(ErrorKind::Shape, "domain '" + id + "' bias length mismatch");
  for (double s : scale) {
    if (!(s > 0.0) || !std::isfinite(s)) raise(ErrorKind::Config, "domain '" + id + "' scale entries must be positive");
  }
  for (const auto& r : rotations) {
    if (r.axis_a >= dim || r.axis_b >= dim || r.axis_a == r.axis_b) {
      raise(ErrorKind::Config, "domain '" + id + "' rotation plane is invalid");
    }
    if (!std::isfinite(r.angle)) raise(ErrorKind::Config, "domain '" + id + "' rotation angle must be finite");
  }
  if (!(noise_sigma >= 0.0)) raise(ErrorKind::Config, "domain '" + id + "' noise_sigma must be non-negative");
}

TaskGeometry make_geometry(std::uint64_t seed, const TaskConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.input_dim < 2 || cfg.n_per_class < 2 || !(cfg.class_sep > 0.0)) {
    raise(ErrorKind::Config, "base task needs K >= 2, d_in >= 2, n_per_class >= 2, class_sep > 0");
  }
  const std::size_t k_count = cfg.num_classes, d = cfg.input_dim;
  const double radius = cfg.class_sep;
  Rng rng(seed_of({seed, 0x67656fULL}));
  TaskGeometry g{Matrix(k_count, d), radius, cfg.noise_sigma};
  // Keep the widest-spread of kPlacementCandidates draws once one clears
  // class_sep; keep drawing (up to kPlacementAttempts) until then.
  Matrix cand(k_count, d);
  double best = -1.0;
  int feasible = 0;
  for (int attempt = 0; attempt < kPlacementAttempts && feasible < kPlacementCandidates; ++attempt) {
    for (std::size_t k = 0; k < k_count; ++k) {
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        cand(k, j) = rng.normal();
        norm += cand(k, j) * cand(k, j);
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < d; ++j) cand(k, j) *= radius / norm;
    }
    double min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < k_count; ++a) {
      for (std::size_t b = a + 1; b < k_count; ++b) {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = cand(a, j) - cand(b, j);
          dist += diff * diff;
        }
        min_dist = std::min(min_dist, std::sqrt(dist));
      }
    }
    if (min_dist < cfg.class_sep) continue;
    ++feasible;
    if (min_dist > best) {
      best = min_dist;
      g.means = cand;
    }
  }
  if (feasible > 0) return g;
  raise(ErrorKind::Config, "class mean placement failed: K too large for d_in at this separation");
}

BaseTask sample_task(const TaskGeometry& geometry, const TaskConfig& cfg, std::uint64_t seed,
                     const std::string& domain_id) {
  const std::size_t k_count = geometry.means.rows(), d = geometry.means.cols();
  const std::size_t n = k_count * cfg.n_per_class;
  Dataset all;
  all.X = Matrix(n, d);
  all.y.resize(n);
  all.domain_id = domain_id;
  all.num_classes = k_count;
  Rng rng(seed_of({seed, 0x736d70ULL}));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i / cfg.n_per_class;
    all.y[i] = k;
    for (std::size_t j = 0; j < d; ++j) all.X(i, j) = geometry.means(k, j) + geometry.noise_sigma * rng.normal();
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(seed_of({seed, 0x73706cULL}));
  shuffle(order, split_rng);
  const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> test_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test_rows.begin(), test_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  return {geometry, subset(all, train_rows, Split::Train), subset(all, test_rows, Split::Test)};
}

BaseTask make_base_task(std::uint64_t seed, const TaskConfig& cfg) {
  return sample_task(make_geometry(seed, cfg), cfg, seed, "base");
}

Dataset apply_domain_shift(const Dataset& ds, const DomainSpec& spec, std::uint64_t seed) {
  const std::size_t d = ds.X.cols();
  spec.validate(d);
  Dataset out = ds;
  out.domain_id = spec.id;
  Rng rng(seed_of({seed, 0x736866ULL}));
  for (std::size_t i = 0; i < out.X.rows(); ++i) {
    auto row = out.X.row(i);
    if (!spec.scale.empty()) {
      for (std::size_t j = 0; j < d; ++j) row[j] *= spec.scale[j];
    }
    for (const auto& r : spec.rotations) rotate_row(row, r, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (!spec.bias.empty()) row[j] += spec.bias[j];
      if (spec.noise_sigma > 0.0) row[j] += spec.noise_sigma * rng.normal();
    }
  }
  return out;
}

Dataset invert_domain_shift(const Dataset& ds, const DomainSpec& spec) {
  const std::size_t d = ds.X.cols();
  spec.validate(d);
  Dataset out = ds;
  for (std::size_t i = 0; i < out.X.rows(); ++i) {
    auto row = out.X.row(i);
    if (!spec.bias.empty()) {
      for (std::size_t j = 0; j < d; ++j) row[j] -= spec.bias[j];
    }
    for (auto it = spec.rotations.rbegin(); it != spec.rotations.rend(); ++it) rotate_row(row, *it, -1.0);
    if (!spec.scale.empty()) {
      for (std::size_t j = 0; j < d; ++j) row[j] /= spec.scale[j];
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> split_halves(std::size_t pool_size, int halves,
                                                   std::uint64_t seed) {
  if (halves < 1) raise(ErrorKind::Config, "halves must be positive");
  std::vector<std::size_t> order(pool_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> parts(static_cast<std::size_t>(halves));
  const std::size_t h = static_cast<std::size_t>(halves);
  std::size_t at = 0;
  for (std::size_t p = 0; p < h; ++p) {
    const std::size_t len = pool_size / h + (p < pool_size % h ? 1 : 0);
    parts[p].assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                    order.begin() + static_cast<std::ptrdiff_t>(at + len));
    std::sort(parts[p].begin(), parts[p].end());
    at += len;
  }
  return parts;
}

SequenceSpec build_sequence(const SequenceConfig& cfg, std::uint64_t seed) {
  if (cfg.domains.size() < 2) raise(ErrorKind::Config, "a sequence needs at least two target domains");
  if (cfg.halves < 1) raise(ErrorKind::Config, "halves must be positive");
  std::set<std::string> ids;
  for (const auto& d : cfg.domains) {
    if (!ids.insert(d.id).second) raise(ErrorKind::Config, "duplicate domain id '" + d.id + "'");
    d.validate(cfg.task.input_dim);
  }
  if (ids.count(cfg.source.id)) raise(ErrorKind::Config, "source id collides with a target domain");
  cfg.source.validate(cfg.task.input_dim);

  SequenceSpec seq;
  seq.geometry = make_geometry(seed, cfg.task);
  {
    BaseTask src = sample_task(seq.geometry, cfg.task, seed_of({seed, 0x737263ULL}), cfg.source.id);
    seq.source_train = apply_domain_shift(src.train, cfg.source, seed_of({seed, 0x737263ULL, 1}));
    seq.source_test = apply_domain_shift(src.test, cfg.source, seed_of({seed, 0x737263ULL, 2}));
  }
  for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
    const DomainSpec& spec = cfg.domains[i];
    BaseTask t = sample_task(seq.geometry, cfg.task, seed_of({seed, 0x646f6dULL, i}), spec.id);
    seq.domains.push_back({spec, apply_domain_shift(t.train, spec, seed_of({seed, 0x646f6dULL, i, 1})),
                           apply_domain_shift(t.test, spec, seed_of({seed, 0x646f6dULL, i, 2}))});
  }

  std::vector<std::size_t> order;
  if (cfg.order.empty()) {
    for (std::size_t i = 0; i < cfg.domains.size(); ++i) order.push_back(i);
  } else {
    std::set<std::string> seen;
    for (const auto& id : cfg.order) {
      if (!seen.insert(id).second) raise(ErrorKind::Config, "duplicate domain id '" + id + "' in order");
      auto it = std::find_if(cfg.domains.begin(), cfg.domains.end(),
                             [&](const DomainSpec& d) { return d.id == id; });
      if (it == cfg.domains.end()) raise(ErrorKind::Config, "order names unknown domain '" + id + "'");
      order.push_back(static_cast<std::size_t>(it - cfg.domains.begin()));
    }
    if (order.size() < 2) raise(ErrorKind::Config, "a sequence needs at least two target domains");
  }

  std::vector<std::vector<std::vector<std::size_t>>> parts(seq.domains.size());
  for (std::size_t i : order) {
    parts[i] = split_halves(seq.domains[i].train_pool.size(), cfg.halves, seed_of({seed, 0x68616cULL, i}));
  }
  for (int h = 0; h < cfg.halves; ++h) {
    for (std::size_t i : order) {
      SequenceStep step;
      step.domain_index = i;
      step.domain_id = seq.domains[i].spec.id;
      step.half = h + 1;
      step.pool_indices = parts[i][static_cast<std::size_t>(h)];
      step.train = subset(seq.domains[i].train_pool, step.pool_indices, Split::Train);
      seq.steps.push_back(std::move(step));
    }
  }
  return seq;
}

void write_domain_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::string out = "label";
  for (std::size_t j = 0; j < ds.X.cols(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.y[i]);
    for (double v : ds.X.row(i)) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

Dataset read_domain_csv(const std::filesystem::path& path, std::size_t num_classes,
                        std::size_t input_dim, const std::string& domain_id, Split split) {
  const std::string where = path.string();
  if (!std::filesystem::exists(path)) raise(ErrorKind::Ingestion, where + ": file not found");
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    raise(ErrorKind::Ingestion, where + ":" + std::to_string(line_no) + ": " + msg);
  };

  ++line_no;
  if (!std::getline(in, line)) fail("bad header: file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    std::string expected = "label";
    for (std::size_t j = 0; j < input_dim; ++j) expected += ",f" + std::to_string(j);
    if (line != expected) fail("bad header: expected 'label,f0,...,f" + std::to_string(input_dim - 1) + "'");
  }

  std::vector<double> values;
  std::vector<std::size_t> labels;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != input_dim + 1) {
      fail("expected " + std::to_string(input_dim + 1) + " cells, got " + std::to_string(cells.size()));
    }
    const auto label = parse_int(cells[0]);
    if (!label) fail("non-numeric cell in column 'label'");
    if (*label < 0 || static_cast<std::size_t>(*label) >= num_classes) {
      fail("label out of range: " + cells[0] + " not in [0, " + std::to_string(num_classes) + ")");
    }
    labels.push_back(static_cast<std::size_t>(*label));
    for (std::size_t j = 0; j < input_dim; ++j) {
      const auto v = parse_double(cells[j + 1]);
      if (!v) fail("non-numeric cell in column 'f" + std::to_string(j) + "'");
      if (!std::isfinite(*v)) fail("non-finite value in column 'f" + std::to_string(j) + "'");
      values.push_back(*v);
    }
  }
  if (labels.empty()) raise(ErrorKind::Ingestion, where + ": no samples");
  Dataset ds;
  ds.X = Matrix(labels.size(), input_dim, std::move(values));
  ds.y = std::move(labels);
  ds.split = split;
  ds.domain_id = domain_id;
  ds.num_classes = num_classes;
  return ds;
}

ExternalData load_external(const std::filesystem::path& manifest_path) {
  const std::string where = manifest_path.string();
  if (!std::filesystem::exists(manifest_path)) raise(ErrorKind::Ingestion, where + ": file not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    raise(ErrorKind::Ingestion, where + ": manifest is not valid JSON (" + e.what() + ")");
  }
  auto field = [&](const nlohmann::json& obj, const char* key, const std::string& ctx) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key)) raise(ErrorKind::Ingestion, where + ": " + ctx + " missing '" + key + "'");
    return obj.at(key);
  };
  ExternalData data;
  const auto& k = field(j, "num_classes", "manifest");
  const auto& d = field(j, "input_dim", "manifest");
  if (!k.is_number_unsigned() || !d.is_number_unsigned() || k.get<std::size_t>() < 2 || d.get<std::size_t>() < 1) {
    raise(ErrorKind::Ingestion, where + ": num_classes and input_dim must be positive integers");
  }
  data.num_classes = k.get<std::size_t>();
  data.input_dim = d.get<std::size_t>();
  const auto& domains = field(j, "domains", "manifest");
  if (!domains.is_array() || domains.empty()) raise(ErrorKind::Ingestion, where + ": 'domains' must be a non-empty list");
  const auto base = manifest_path.parent_path();
  std::set<std::string> ids;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const std::string ctx = "domains[" + std::to_string(i) + "]";
    const auto id = field(domains[i], "domain_id", ctx).get<std::string>();
    if (!ids.insert(id).second) raise(ErrorKind::Ingestion, where + ": duplicate domain id '" + id + "'");
    auto resolve = [&](const char* key) {
      std::filesystem::path p = field(domains[i], key, ctx).get<std::string>();
      return p.is_absolute() ? p : base / p;
    };
    DomainData dd;
    dd.spec.id = id;
    dd.spec.difficulty = "external";
    dd.train_pool = read_domain_csv(resolve("train_csv"), data.num_classes, data.input_dim, id, Split::Train);
    dd.test = read_domain_csv(resolve("test_csv"), data.num_classes, data.input_dim, id, Split::Test);
    data.domains.push_back(std::move(dd));
  }
  return data;
}

nlohmann::json to_json(const DomainSpec& spec) {
  nlohmann::json rots = nlohmann::json::array();
  for (const auto& r : spec.rotations) rots.push_back({r.axis_a, r.axis_b, r.angle});
  return {{"id", spec.id},       {"rotations", rots},       {"scale", spec.scale},
          {"bias", spec.bias},   {"noise_sigma", spec.noise_sigma},
          {"difficulty", spec.difficulty}};
}

DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) raise(ErrorKind::Config, "domain entry must be an object");
  DomainSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    try {
      if (key == "id") s.id = it->get<std::string>();
      else if (key == "rotations") {
        for (const auto& r : *it) {
          if (!r.is_array() || r.size() != 3) raise(ErrorKind::Config, "rotation must be [axis_a, axis_b, angle]");
          s.rotations.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>(), r[2].get<double>()});
        }
      } else if (key == "scale") s.scale = it->get<Vector>();
      else if (key == "bias") s.bias = it->get<Vector>();
      else if (key == "noise_sigma") s.noise_sigma = it->get<double>();
      else if (key == "difficulty") s.difficulty = it->get<std::string>();
      else raise(ErrorKind::Config, "unknown key '" + key + "' in domain entry");
    } catch (const nlohmann::json::exception&) {
      raise(ErrorKind::Config, "domain field '" + key + "' has the wrong type");
    }
  }
  if (s.id.empty()) raise(ErrorKind::Config, "domain entry needs an id");
  return s;
}

}  // namespace driftlab
