#include "driftlab/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>

#include "driftlab/error.hpp"
#include "driftlab/io.hpp"

namespace driftlab {

namespace {

using Json = nlohmann::json;

[[noreturn]] void bad(const std::string& field, const std::string& msg) {
  raise(ErrorKind::Config, "field '" + field + "' " + msg);
}

// Walks one JSON object, dispatching each key to a handler and rejecting
// keys without one.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "<root>" : path_, "must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void on(const std::string& key, std::function<void(const Json&, const std::string&)> fn) {
    handlers_[key] = std::move(fn);
  }

  void run() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      auto h = handlers_.find(it.key());
      if (h == handlers_.end()) bad(field(it.key()), "is not a recognised key");
      h->second(*it, field(it.key()));
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::map<std::string, std::function<void(const Json&, const std::string&)>> handlers_;
};

double number(const Json& v, const std::string& f) {
  if (!v.is_number()) bad(f, "must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) bad(f, "must be finite");
  return d;
}

long long integer(const Json& v, const std::string& f) {
  if (!v.is_number_integer()) bad(f, "must be an integer");
  return v.get<long long>();
}

std::size_t count(const Json& v, const std::string& f) {
  const long long n = integer(v, f);
  if (n < 0) bad(f, "must be non-negative");
  return static_cast<std::size_t>(n);
}

bool boolean(const Json& v, const std::string& f) {
  if (!v.is_boolean()) bad(f, "must be true or false");
  return v.get<bool>();
}

std::string text(const Json& v, const std::string& f) {
  if (!v.is_string()) bad(f, "must be a string");
  return v.get<std::string>();
}

std::uint64_t seed_value(const Json& v, const std::string& f) {
  if (!v.is_number_unsigned()) bad(f, "must be a non-negative integer");
  return v.get<std::uint64_t>();
}

AugmentPolicy policy(const Json& v, const std::string& f, AugmentKind kind) {
  try {
    return policy_from_json(v, kind);
  } catch (const Error& e) {
    bad(f, std::string("is invalid: ") + e.what());
  }
}

DomainSpec domain(const Json& v, const std::string& f) {
  try {
    return domain_spec_from_json(v);
  } catch (const Error& e) {
    bad(f, std::string("is invalid: ") + e.what());
  }
}

DomainSpec rotated(std::string id, std::string difficulty, std::vector<PlaneRotation> rots,
                   double scale_lo, double scale_hi, double bias, double noise, std::size_t dim) {
  DomainSpec s;
  s.id = std::move(id);
  s.difficulty = std::move(difficulty);
  s.rotations = std::move(rots);
  s.scale.resize(dim);
  s.bias.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    const double t = dim > 1 ? static_cast<double>(j) / static_cast<double>(dim - 1) : 0.0;
    s.scale[j] = scale_lo + t * (scale_hi - scale_lo);
    s.bias[j] = (j % 2 == 0 ? 1.0 : -1.0) * bias;
  }
  s.noise_sigma = noise;
  return s;
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  const std::size_t d = c.sequence.task.input_dim;
  c.sequence.source.id = "source";
  c.sequence.source.difficulty = "source";
  c.sequence.source.rotations = {{0, 1, 0.02}};
  c.sequence.domains = {
      rotated("dark", "hard", {{0, 1, 0.9}, {2, 3, 0.9}, {4, 5, 0.9}, {6, 7, 0.9}}, 0.6, 1.0, 1.0, 1.0, d),
      rotated("web", "moderate", {{1, 2, 0.5}, {3, 4, 0.5}, {5, 6, 0.5}}, 0.9, 1.2, 0.5, 0.3, d),
      rotated("clip", "moderate", {{8, 9, 0.6}, {10, 11, 0.6}, {12, 13, 0.6}}, 1.1, 0.85, 0.5, 0.3, d),
  };
  return c;
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c = default_config();

  ObjectReader root(j, "");
  root.on("seed", [&](const Json& v, const std::string& f) { c.run.seed = seed_value(v, f); });
  root.on("threads", [&](const Json& v, const std::string& f) {
    c.run.threads = static_cast<unsigned>(count(v, f));
  });
  root.on("out_dir", [&](const Json& v, const std::string& f) { c.out_dir = text(v, f); });
  root.on("checkpoint", [&](const Json& v, const std::string& f) { c.checkpoint = text(v, f); });
  root.on("manifest", [&](const Json& v, const std::string& f) { c.manifest = text(v, f); });

  root.on("task", [&](const Json& v, const std::string& f) {
    auto& t = c.sequence.task;
    ObjectReader r(v, f);
    r.on("num_classes", [&](const Json& x, const std::string& g) { t.num_classes = count(x, g); });
    r.on("input_dim", [&](const Json& x, const std::string& g) { t.input_dim = count(x, g); });
    r.on("n_per_class", [&](const Json& x, const std::string& g) { t.n_per_class = count(x, g); });
    r.on("class_sep", [&](const Json& x, const std::string& g) { t.class_sep = number(x, g); });
    r.on("noise_sigma", [&](const Json& x, const std::string& g) { t.noise_sigma = number(x, g); });
    r.on("test_fraction", [&](const Json& x, const std::string& g) { t.test_fraction = number(x, g); });
    r.run();
  });

  root.on("network", [&](const Json& v, const std::string& f) {
    ObjectReader r(v, f);
    r.on("hidden", [&](const Json& x, const std::string& g) {
      if (!x.is_array()) bad(g, "must be a list of widths");
      c.network.hidden.clear();
      for (std::size_t i = 0; i < x.size(); ++i) c.network.hidden.push_back(count(x[i], g));
    });
    r.on("feature_dim", [&](const Json& x, const std::string& g) { c.network.feature_dim = count(x, g); });
    r.on("activation", [&](const Json& x, const std::string& g) {
      try {
        c.network.activation = activation_from_string(text(x, g));
      } catch (const Error&) {
        bad(g, "must be 'softplus' or 'tanh'");
      }
    });
    r.run();
  });

  root.on("pretrain", [&](const Json& v, const std::string& f) {
    auto& p = c.pretrain;
    ObjectReader r(v, f);
    r.on("epochs", [&](const Json& x, const std::string& g) { p.epochs = static_cast<int>(integer(x, g)); });
    r.on("lr", [&](const Json& x, const std::string& g) { p.lr = number(x, g); });
    r.on("batch_size", [&](const Json& x, const std::string& g) { p.batch_size = count(x, g); });
    r.on("momentum", [&](const Json& x, const std::string& g) { p.momentum = number(x, g); });
    r.on("weight_decay", [&](const Json& x, const std::string& g) { p.weight_decay = number(x, g); });
    r.on("nesterov", [&](const Json& x, const std::string& g) { p.nesterov = boolean(x, g); });
    r.run();
  });

  root.on("adapt", [&](const Json& v, const std::string& f) {
    auto& a = c.run;
    ObjectReader r(v, f);
    r.on("variant", [&](const Json& x, const std::string& g) {
      try {
        a.variant = variant_from_string(text(x, g));
      } catch (const Error&) {
        bad(g, "names an unknown loss variant");
      }
    });
    r.on("alpha", [&](const Json& x, const std::string& g) { a.alpha = number(x, g); });
    r.on("temperature", [&](const Json& x, const std::string& g) { a.temperature = number(x, g); });
    r.on("taus", [&](const Json& x, const std::string& g) {
      if (!x.is_array()) bad(g, "must be a list");
      std::vector<double> taus;
      for (const auto& t : x) taus.push_back(number(t, g));
      try {
        a.taus = ThresholdSchedule(taus);
      } catch (const Error& e) {
        bad(g, std::string("is invalid: ") + e.what());
      }
    });
    r.on("epochs_per_domain", [&](const Json& x, const std::string& g) { a.epochs_per_domain = static_cast<int>(integer(x, g)); });
    r.on("lr", [&](const Json& x, const std::string& g) { a.lr = number(x, g); });
    r.on("lr_decay_epoch", [&](const Json& x, const std::string& g) { a.lr_decay_epoch = static_cast<int>(integer(x, g)); });
    r.on("lr_decay_factor", [&](const Json& x, const std::string& g) { a.lr_decay_factor = number(x, g); });
    r.on("regen_period", [&](const Json& x, const std::string& g) { a.regen_period = static_cast<int>(integer(x, g)); });
    r.on("refine_rounds", [&](const Json& x, const std::string& g) { a.refine_rounds = static_cast<int>(integer(x, g)); });
    r.on("batch_size", [&](const Json& x, const std::string& g) { a.batch_size = count(x, g); });
    r.on("momentum", [&](const Json& x, const std::string& g) { a.momentum = number(x, g); });
    r.on("weight_decay", [&](const Json& x, const std::string& g) { a.weight_decay = number(x, g); });
    r.on("nesterov", [&](const Json& x, const std::string& g) { a.nesterov = boolean(x, g); });
    r.on("reset_optimizer", [&](const Json& x, const std::string& g) { a.reset_optimizer = boolean(x, g); });
    r.on("cache_teacher", [&](const Json& x, const std::string& g) { a.cache_teacher = boolean(x, g); });
    r.on("eval_unseen", [&](const Json& x, const std::string& g) { a.eval_unseen = boolean(x, g); });
    r.on("strong_magnitude", [&](const Json& x, const std::string& g) { a.strong_magnitude = number(x, g); });
    r.run();
  });

  root.on("augment", [&](const Json& v, const std::string& f) {
    ObjectReader r(v, f);
    r.on("weak", [&](const Json& x, const std::string& g) { c.run.weak = policy(x, g, AugmentKind::Weak); });
    r.on("strong", [&](const Json& x, const std::string& g) { c.run.strong = policy(x, g, AugmentKind::Strong); });
    r.run();
  });

  root.on("source_domain", [&](const Json& v, const std::string& f) { c.sequence.source = domain(v, f); });
  root.on("domains", [&](const Json& v, const std::string& f) {
    if (!v.is_array()) bad(f, "must be a list");
    c.sequence.domains.clear();
    for (std::size_t i = 0; i < v.size(); ++i) c.sequence.domains.push_back(domain(v[i], f + "[" + std::to_string(i) + "]"));
  });
  root.on("sequence", [&](const Json& v, const std::string& f) {
    ObjectReader r(v, f);
    r.on("order", [&](const Json& x, const std::string& g) {
      if (!x.is_array()) bad(g, "must be a list of domain ids");
      c.sequence.order.clear();
      for (const auto& id : x) c.sequence.order.push_back(text(id, g));
    });
    r.on("halves", [&](const Json& x, const std::string& g) { c.sequence.halves = static_cast<int>(integer(x, g)); });
    r.run();
  });

  root.run();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    raise(ErrorKind::Config, path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  // Relative data paths are taken relative to the config file.
  const auto base = path.parent_path();
  if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative()) {
    c.manifest = (base / c.manifest).string();
  }
  if (!c.checkpoint.empty() && std::filesystem::path(c.checkpoint).is_relative()) {
    c.checkpoint = (base / c.checkpoint).string();
  }
  return c;
}

void validate(const ExperimentConfig& c) {
  const auto& a = c.run;
  if (!(a.alpha >= 0.0)) bad("adapt.alpha", "must be non-negative");
  if (!(a.temperature > 0.0)) bad("adapt.temperature", "must be positive");
  if (a.epochs_per_domain < 1) bad("adapt.epochs_per_domain", "must be positive");
  if (!(a.lr >= 0.0)) bad("adapt.lr", "must be non-negative");
  if (a.lr_decay_epoch < 0) bad("adapt.lr_decay_epoch", "must be non-negative");
  if (!(a.lr_decay_factor > 0.0)) bad("adapt.lr_decay_factor", "must be positive");
  if (a.regen_period < 1) bad("adapt.regen_period", "must be positive");
  if (a.refine_rounds < 1) bad("adapt.refine_rounds", "must be positive");
  if (a.batch_size < 1) bad("adapt.batch_size", "must be positive");
  if (!(a.momentum >= 0.0 && a.momentum < 1.0)) bad("adapt.momentum", "must lie in [0, 1)");
  if (!(a.weight_decay >= 0.0)) bad("adapt.weight_decay", "must be non-negative");
  if (!(a.strong_magnitude >= 0.0 && a.strong_magnitude <= 1.0)) bad("adapt.strong_magnitude", "must lie in [0, 1]");
  if (a.threads < 1) bad("threads", "must be at least 1");
  try {
    a.weak.validate();
    a.strong.validate();
    check_weaker(a.weak, a.strong);
  } catch (const Error& e) {
    bad("augment", std::string("is invalid: ") + e.what());
  }

  const auto& p = c.pretrain;
  if (p.epochs < 0) bad("pretrain.epochs", "must be non-negative");
  if (!(p.lr >= 0.0)) bad("pretrain.lr", "must be non-negative");
  if (p.batch_size < 1) bad("pretrain.batch_size", "must be positive");
  if (!(p.momentum >= 0.0 && p.momentum < 1.0)) bad("pretrain.momentum", "must lie in [0, 1)");
  if (!(p.weight_decay >= 0.0)) bad("pretrain.weight_decay", "must be non-negative");

  for (std::size_t h : c.network.hidden) {
    if (h == 0) bad("network.hidden", "widths must be positive");
  }
  if (c.network.feature_dim == 0) bad("network.feature_dim", "must be positive");

  const auto& t = c.sequence.task;
  if (t.num_classes < 2) bad("task.num_classes", "must be at least 2");
  if (t.input_dim < 2) bad("task.input_dim", "must be at least 2");
  if (t.n_per_class < 2) bad("task.n_per_class", "must be at least 2");
  if (!(t.class_sep > 0.0)) bad("task.class_sep", "must be positive");
  if (!(t.noise_sigma >= 0.0)) bad("task.noise_sigma", "must be non-negative");
  if (!(t.test_fraction > 0.0 && t.test_fraction < 1.0)) bad("task.test_fraction", "must lie in (0, 1)");
  if (c.sequence.halves < 1) bad("sequence.halves", "must be positive");
  if (c.manifest.empty()) {
    if (c.sequence.domains.size() < 2) bad("domains", "needs at least two target domains");
    try {
      c.sequence.source.validate(t.input_dim);
      for (const auto& d : c.sequence.domains) d.validate(t.input_dim);
    } catch (const Error& e) {
      bad("domains", std::string("is invalid: ") + e.what());
    }
  }
}

Json to_json(const ExperimentConfig& c) {
  const auto& a = c.run;
  Json adapt{{"variant", to_string(a.variant)},
             {"alpha", a.alpha},
             {"temperature", a.temperature},
             {"taus", std::vector<double>(a.taus.taus().begin(), a.taus.taus().end())},
             {"epochs_per_domain", a.epochs_per_domain},
             {"lr", a.lr},
             {"lr_decay_epoch", a.lr_decay_epoch},
             {"lr_decay_factor", a.lr_decay_factor},
             {"regen_period", a.regen_period},
             {"refine_rounds", a.refine_rounds},
             {"batch_size", a.batch_size},
             {"momentum", a.momentum},
             {"weight_decay", a.weight_decay},
             {"nesterov", a.nesterov},
             {"reset_optimizer", a.reset_optimizer},
             {"cache_teacher", a.cache_teacher},
             {"eval_unseen", a.eval_unseen},
             {"strong_magnitude", a.strong_magnitude}};
  const auto& t = c.sequence.task;
  Json domains = Json::array();
  for (const auto& d : c.sequence.domains) domains.push_back(to_json(d));
  return {{"seed", a.seed},
          {"threads", a.threads},
          {"out_dir", c.out_dir},
          {"checkpoint", c.checkpoint},
          {"manifest", c.manifest},
          {"task", {{"num_classes", t.num_classes}, {"input_dim", t.input_dim},
                    {"n_per_class", t.n_per_class}, {"class_sep", t.class_sep},
                    {"noise_sigma", t.noise_sigma}, {"test_fraction", t.test_fraction}}},
          {"network", {{"hidden", c.network.hidden}, {"feature_dim", c.network.feature_dim},
                       {"activation", to_string(c.network.activation)}}},
          {"pretrain", {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr},
                        {"batch_size", c.pretrain.batch_size}, {"momentum", c.pretrain.momentum},
                        {"weight_decay", c.pretrain.weight_decay}, {"nesterov", c.pretrain.nesterov}}},
          {"adapt", adapt},
          {"augment", {{"weak", to_json(a.weak)}, {"strong", to_json(a.strong)}}},
          {"source_domain", to_json(c.sequence.source)},
          {"domains", domains},
          {"sequence", {{"order", c.sequence.order}, {"halves", c.sequence.halves}}}};
}

std::string config_digest(const ExperimentConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("out_dir");
  j.erase("checkpoint");
  j.erase("manifest");
  j.erase("threads");
  j["adapt"].erase("variant");  // recorded separately; ablation rows share a digest
  j.erase("seed");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

unsigned resolve_threads(int flag_value) {
  if (flag_value > 0) return static_cast<unsigned>(flag_value);
  if (const char* env = std::getenv("DRIFTLAB_THREADS")) {
    if (auto n = parse_int(env); n && *n > 0) return static_cast<unsigned>(*n);
  }
  return 1;
}

}  // namespace driftlab
