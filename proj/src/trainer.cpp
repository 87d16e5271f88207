#include "driftlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "driftlab/augment.hpp"
#include "driftlab/error.hpp"
#include "driftlab/io.hpp"
#include "driftlab/losses.hpp"
#include "driftlab/seeding.hpp"

namespace driftlab {

namespace {

constexpr std::uint64_t kBatchTag = 0x626174ULL;
constexpr std::uint64_t kPretrainTag = 0x707265ULL;

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::size_t> network_dims(const ExperimentConfig& cfg, std::size_t input_dim) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), cfg.network.hidden.begin(), cfg.network.hidden.end());
  dims.push_back(cfg.network.feature_dim);
  return dims;
}

nlohmann::json labels_to_json(const PseudoLabelSet& p) {
  return {{"labels", p.labels}, {"source_epoch", p.source_epoch}, {"generator", p.generator}};
}

PseudoLabelSet labels_from_json(const nlohmann::json& j) {
  return {j.at("labels").get<std::vector<std::size_t>>(), j.at("source_epoch").get<int>(),
          j.at("generator").get<std::string>()};
}

void check_frozen(const std::vector<unsigned char>& phi_bytes,
                  const std::vector<unsigned char>& theta0_bytes, const AdaptState& s) {
  if (param_bytes(s.phi) != phi_bytes) throw std::logic_error("classifier parameters changed during adaptation");
  if (param_bytes(s.theta_source.layers) != theta0_bytes) {
    throw std::logic_error("source extractor parameters changed during adaptation");
  }
}

PseudoLabelSet regenerate(const ExtractorParams& snapshot, const ClassifierParams& phi,
                          const Matrix& weak, int rounds, const StepKey& key, int epoch) {
  const ForwardResult fr = forward(snapshot, phi, weak);
  try {
    const CentroidSet centroids = compute_centroids(fr.features, softmax(fr.logits, 1.0));
    PseudoLabelSet out = refine_labels(fr.features, centroids, rounds);
    out.source_epoch = epoch;
    out.generator = digest(snapshot);
    return out;
  } catch (const Error& e) {
    raise(ErrorKind::Refinement, "step " + std::to_string(key.step) + " epoch " +
                                     std::to_string(epoch) + ": " + e.what());
  }
}

}  // namespace

bool AdaptState::operator==(const AdaptState& o) const {
  return theta_current == o.theta_current && theta_source == o.theta_source && phi == o.phi &&
         theta_snapshot == o.theta_snapshot && theta_prev_domain == o.theta_prev_domain &&
         optimizer.velocity == o.optimizer.velocity && optimizer.steps == o.optimizer.steps &&
         step == o.step && epoch == o.epoch && labels.labels == o.labels.labels &&
         labels.source_epoch == o.labels.source_epoch && labels.generator == o.labels.generator;
}

Matrix infer_logits(const ExtractorParams& theta, const ClassifierParams& phi, const Matrix& X,
                    unsigned threads) {
  const std::size_t n = X.rows();
  if (threads <= 1 || n < 2) return predict_logits(theta, phi, X);
  threads = std::min<unsigned>(threads, static_cast<unsigned>(n));
  Matrix out(n, phi.num_classes());
  const std::size_t chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      const std::size_t b = t * chunk, e = std::min(n, b + chunk);
      if (b >= e) return;
      std::vector<std::size_t> rows(e - b);
      std::iota(rows.begin(), rows.end(), b);
      const Matrix part = predict_logits(theta, phi, select_rows(X, rows));
      for (std::size_t i = 0; i < part.rows(); ++i) {
        std::copy(part.row(i).begin(), part.row(i).end(), out.row(b + i).begin());
      }
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

nlohmann::json to_json(const Checkpoint& c) {
  const AdaptState& s = c.state;
  nlohmann::json j{{"format", "driftlab-checkpoint"},
                   {"version", 1},
                   {"kind", c.kind == CheckpointKind::Pretrained ? "pretrained" : "run"},
                   {"seed", c.seed},
                   {"config_digest", c.config_digest},
                   {"step", s.step},
                   {"epoch", s.epoch},
                   {"theta_current", to_json(s.theta_current)},
                   {"theta_source", to_json(s.theta_source)},
                   {"phi", to_json(s.phi)},
                   {"theta_snapshot", to_json(s.theta_snapshot)},
                   {"theta_prev_domain", to_json(s.theta_prev_domain)},
                   {"optimizer", to_json(s.optimizer)},
                   {"labels", labels_to_json(s.labels)},
                   {"pretrain_losses", c.pretrain_losses}};
  j["ledger"] = c.kind == CheckpointKind::Run ? to_json(c.ledger) : nlohmann::json(nullptr);
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  try {
    if (j.at("format").get<std::string>() != "driftlab-checkpoint" || j.at("version").get<int>() != 1) {
      raise(ErrorKind::Io, "not a version-1 checkpoint");
    }
    const std::string kind = j.at("kind").get<std::string>();
    if (kind != "pretrained" && kind != "run") raise(ErrorKind::Io, "unknown checkpoint kind '" + kind + "'");
    c.kind = kind == "pretrained" ? CheckpointKind::Pretrained : CheckpointKind::Run;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.config_digest = j.at("config_digest").get<std::string>();
    AdaptState& s = c.state;
    s.step = j.at("step").get<std::size_t>();
    s.epoch = j.at("epoch").get<int>();
    s.theta_current = extractor_from_json(j.at("theta_current"));
    s.theta_source = extractor_from_json(j.at("theta_source"));
    s.phi = classifier_from_json(j.at("phi"));
    s.theta_snapshot = extractor_from_json(j.at("theta_snapshot"));
    s.theta_prev_domain = extractor_from_json(j.at("theta_prev_domain"));
    s.optimizer = optimizer_from_json(j.at("optimizer"));
    s.labels = labels_from_json(j.at("labels"));
    c.pretrain_losses = j.at("pretrain_losses").get<std::vector<double>>();
    if (c.kind == CheckpointKind::Run) c.ledger = ledger_from_json(j.at("ledger"));
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Io, std::string("malformed checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Io) throw;
    raise(ErrorKind::Io, std::string("malformed checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(ckpt).dump() + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    raise(ErrorKind::Io, path.string() + " is not a checkpoint: " + e.what());
  }
  return checkpoint_from_json(j);
}

AdaptState initial_state(const ExtractorParams& theta, const ClassifierParams& phi) {
  AdaptState s;
  s.theta_current = theta;
  s.theta_source = theta;
  s.phi = phi;
  s.theta_snapshot = theta;
  s.theta_prev_domain = theta;
  s.optimizer = make_optimizer_state(theta.layers);
  return s;
}

Checkpoint pretrain_source(const ExperimentConfig& cfg, const Dataset& source_train) {
  if (source_train.size() == 0) raise(ErrorKind::EmptyInput, "source training split is empty");
  const std::uint64_t seed = cfg.run.seed;
  const auto dims = network_dims(cfg, source_train.X.cols());
  ExtractorParams theta = init_extractor(seed_of({seed, kPretrainTag, 1}), dims, cfg.network.activation);
  ClassifierParams phi = init_classifier(seed_of({seed, kPretrainTag, 2}), cfg.network.feature_dim,
                                         source_train.num_classes);
  OptimizerState opt_theta = make_optimizer_state(theta.layers);
  std::vector<DenseLayer> head{DenseLayer{phi.weight, phi.bias}};
  OptimizerState opt_phi = make_optimizer_state(head);
  const SgdOptions sgd{cfg.pretrain.lr, cfg.pretrain.momentum, cfg.pretrain.weight_decay, cfg.pretrain.nesterov};

  Checkpoint ck;
  ck.kind = CheckpointKind::Pretrained;
  ck.seed = seed;
  ck.config_digest = config_digest(cfg);
  const std::size_t n = source_train.size(), bs = cfg.pretrain.batch_size;
  for (int epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    const auto order = shuffled(n, seed_of({seed, kPretrainTag, 3, static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(b),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + bs)));
      const ForwardResult fr = forward(theta, phi, select_rows(source_train.X, rows));
      const Matrix probs = softmax(fr.logits, 1.0);
      const double inv = 1.0 / static_cast<double>(rows.size());
      Matrix d_logits = probs;
      double loss = 0.0;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t y = source_train.y[rows[i]];
        loss -= std::log(std::max(probs(i, y), 1e-30));
        d_logits(i, y) -= 1.0;
      }
      loss *= inv;
      if (!std::isfinite(loss)) {
        raise(ErrorKind::Numeric, "non-finite pretraining loss at epoch " + std::to_string(epoch) +
                                      " batch " + std::to_string(batches));
      }
      for (double& v : d_logits.flat()) v *= inv;
      FullGrad g = backward_full(theta, phi, fr.trace, d_logits);
      sgd_step(theta, g.extractor, opt_theta, sgd);
      head[0] = DenseLayer{phi.weight, phi.bias};
      std::vector<DenseLayer> head_grad{std::move(g.classifier)};
      sgd_step(std::span<DenseLayer>(head), std::span<const DenseLayer>(head_grad), opt_phi, sgd);
      phi.weight = head[0].weight;
      phi.bias = head[0].bias;
      loss_sum += loss;
      ++batches;
    }
    ck.pretrain_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }
  ck.state = initial_state(theta, phi);
  return ck;
}

AdaptState adapt_domain(AdaptState s, const Dataset& domain, const StepKey& key,
                        const RunConfig& cfg, AdaptLog* log) {
  const std::size_t n = domain.size();
  if (n == 0) raise(ErrorKind::EmptyInput, "domain training pool is empty");
  if (domain.X.cols() != s.theta_current.input_dim()) raise(ErrorKind::Shape, "domain width does not match the network");

  const LossSettings settings = cfg.loss_settings();
  const VariantTraits tr = traits(cfg.variant);
  const bool uses_strong = tr.classification_view == View::Strong ||
                           (tr.distillation_view && *tr.distillation_view == View::Strong);
  const bool uses_weak = tr.classification_view == View::Weak ||
                         (tr.distillation_view && *tr.distillation_view == View::Weak);
  const bool distills = tr.distillation_view.has_value();
  const ExtractorParams teacher =
      tr.teacher == TeacherKind::Source ? s.theta_source : s.theta_prev_domain;
  const SgdOptions base{cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov};
  const std::size_t bs = cfg.batch_size;
  const std::size_t d = domain.X.cols();

  if (cfg.reset_optimizer || s.optimizer.velocity.empty()) s.optimizer = make_optimizer_state(s.theta_current.layers);
  double label_accuracy = 0.0;

  for (int e = 0; e < cfg.epochs_per_domain; ++e) {
    const auto ue = static_cast<std::uint64_t>(e);
    SgdOptions sgd = base;
    if (e >= cfg.lr_decay_epoch) sgd.lr = cfg.lr * cfg.lr_decay_factor;
    if (log && e == cfg.lr_decay_epoch) {
      log->events.push_back({key.step, e, "lr_decay", "lr=" + format_double(sgd.lr)});
    }

    Matrix weak(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const SampleView v = weak_augment(
          domain.X.row(i), view_seed(cfg.seed, key.domain_index, key.half, ue, i, AugmentKind::Weak), cfg.weak);
      std::copy(v.values.begin(), v.values.end(), weak.row(i).begin());
    }

    std::optional<Matrix> teacher_cache;
    if (distills && cfg.cache_teacher) teacher_cache = infer_logits(teacher, s.phi, weak, cfg.threads);

    const bool regen = e % cfg.regen_period == 0;
    if (regen) {
      s.theta_snapshot = s.theta_current;
      s.labels = regenerate(s.theta_snapshot, s.phi, weak, cfg.refine_rounds, key, e);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) hits += s.labels.labels[i] == domain.y[i] ? 1 : 0;
      label_accuracy = static_cast<double>(hits) / static_cast<double>(n);
      if (log) log->events.push_back({key.step, e, "regen", "snapshot=" + s.labels.generator});
    }

    EpochRecord rec;
    rec.epoch = e;
    rec.lr = sgd.lr;
    rec.regenerated = regen;
    rec.snapshot_id = s.labels.generator;
    rec.pseudo_label_accuracy = label_accuracy;

    const auto order = shuffled(n, seed_of({cfg.seed, kBatchTag, key.domain_index,
                                            static_cast<std::uint64_t>(key.half), ue}));
    for (std::size_t b = 0; b < n; b += bs) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(b),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + bs)));
      const Matrix weak_b = select_rows(weak, rows);
      std::vector<std::size_t> labels_b(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels_b[i] = s.labels.labels[rows[i]];

      std::optional<ForwardResult> strong_fw, weak_fw;
      if (uses_strong) {
        Matrix strong_b(rows.size(), d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const SampleView v = strong_augment(
              domain.X.row(rows[i]),
              view_seed(cfg.seed, key.domain_index, key.half, ue, rows[i], AugmentKind::Strong),
              cfg.strong_magnitude, cfg.weak, cfg.strong);
          std::copy(v.values.begin(), v.values.end(), strong_b.row(i).begin());
        }
        strong_fw = forward(s.theta_current, s.phi, strong_b);
      }
      if (uses_weak) weak_fw = forward(s.theta_current, s.phi, weak_b);

      std::optional<Matrix> teacher_b;
      if (distills) {
        teacher_b = teacher_cache ? select_rows(*teacher_cache, rows) : predict_logits(teacher, s.phi, weak_b);
      }

      LossInputs in;
      in.strong_logits = strong_fw ? &strong_fw->logits : nullptr;
      in.weak_logits = weak_fw ? &weak_fw->logits : nullptr;
      in.teacher_logits = teacher_b ? &*teacher_b : nullptr;
      in.pseudo_labels = labels_b;
      const CombinedLoss loss = combined_loss(settings, in);
      if (!std::isfinite(loss.breakdown.total)) {
        raise(ErrorKind::Numeric, "non-finite loss at step " + std::to_string(key.step) + " epoch " +
                                      std::to_string(e) + " batch " + std::to_string(rec.batches));
      }

      ExtractorGrad grad;
      if (strong_fw) accumulate(grad, backward(s.theta_current, s.phi, strong_fw->trace, loss.d_strong));
      if (weak_fw) accumulate(grad, backward(s.theta_current, s.phi, weak_fw->trace, loss.d_weak));
      sgd_step(s.theta_current, grad, s.optimizer, sgd);

      rec.classification += loss.breakdown.classification;
      rec.distillation += loss.breakdown.distillation;
      rec.total += loss.breakdown.total;
      if (rec.pass_counts.empty()) rec.pass_counts.assign(loss.breakdown.pass_counts.size(), 0);
      for (std::size_t m = 0; m < rec.pass_counts.size(); ++m) rec.pass_counts[m] += loss.breakdown.pass_counts[m];
      rec.masked += loss.breakdown.masked;
      ++rec.batches;
    }
    const double nb = static_cast<double>(rec.batches);
    rec.classification /= nb;
    rec.distillation /= nb;
    rec.total /= nb;
    rec.theta_digest = digest(s.theta_current);
    s.epoch = e + 1;
    if (log) log->epochs.push_back(std::move(rec));
  }

  s.theta_prev_domain = s.theta_current;
  s.step = key.step;
  s.epoch = 0;
  return s;
}

SequenceSpec make_sequence(const ExperimentConfig& cfg) {
  if (cfg.manifest.empty()) return build_sequence(cfg.sequence, cfg.run.seed);

  ExternalData ext = load_external(cfg.manifest);
  if (ext.domains.size() < 3) {
    raise(ErrorKind::Config, "manifest needs a source domain and at least two target domains");
  }
  SequenceSpec seq;
  seq.source_train = ext.domains.front().train_pool;
  seq.source_test = ext.domains.front().test;
  for (std::size_t i = 1; i < ext.domains.size(); ++i) seq.domains.push_back(std::move(ext.domains[i]));
  for (int h = 0; h < cfg.sequence.halves; ++h) {
    for (std::size_t i = 0; i < seq.domains.size(); ++i) {
      const auto parts = split_halves(seq.domains[i].train_pool.size(), cfg.sequence.halves,
                                      seed_of({cfg.run.seed, 0x68616cULL, i}));
      SequenceStep step;
      step.domain_index = i;
      step.domain_id = seq.domains[i].spec.id;
      step.half = h + 1;
      step.pool_indices = parts[static_cast<std::size_t>(h)];
      step.train.X = select_rows(seq.domains[i].train_pool.X, step.pool_indices);
      for (std::size_t r : step.pool_indices) step.train.y.push_back(seq.domains[i].train_pool.y[r]);
      step.train.domain_id = step.domain_id;
      step.train.num_classes = ext.num_classes;
      seq.steps.push_back(std::move(step));
    }
  }
  return seq;
}

RunResult run_sequence(const ExperimentConfig& cfg, const SequenceSpec& seq, const RunOptions& opts) {
  if (seq.steps.empty()) raise(ErrorKind::Config, "sequence has no steps");
  const std::string cfg_digest = config_digest(cfg);
  Checkpoint ck = opts.start ? *opts.start : pretrain_source(cfg, seq.source_train);

  AdaptState state;
  MetricsLedger ledger;
  if (ck.kind == CheckpointKind::Pretrained) {
    if (ck.state.theta_current.input_dim() != seq.source_train.X.cols() ||
        ck.state.phi.num_classes() != seq.source_train.num_classes) {
      raise(ErrorKind::Config, "pretrained checkpoint does not match the task dimensions");
    }
    state = initial_state(ck.state.theta_current, ck.state.phi);
    ledger.variant = to_string(cfg.run.variant);
    ledger.seed = cfg.run.seed;
    ledger.config_digest = cfg_digest;
    ledger.phi_digest = digest(state.phi);
    ledger.theta_source_digest = digest(state.theta_source);
    ledger.events.push_back({0, -1, "snapshot", "theta=" + ledger.theta_source_digest});
    for (const auto& dom : seq.domains) {
      const EvalCounts c = evaluate_counts(state.theta_source, state.phi, dom.test, cfg.run.threads);
      ledger.source_model.push_back({dom.spec.id, c.correct, c.total, false});
    }
  } else {
    if (ck.config_digest != cfg_digest || ck.seed != cfg.run.seed ||
        ck.ledger.variant != to_string(cfg.run.variant)) {
      raise(ErrorKind::Config, "checkpoint was produced by a different configuration, seed or variant");
    }
    if (ck.state.step > seq.steps.size()) raise(ErrorKind::Config, "checkpoint is beyond the end of the sequence");
    state = ck.state;
    ledger = ck.ledger;
    if (digest(state.phi) != ledger.phi_digest || digest(state.theta_source) != ledger.theta_source_digest) {
      raise(ErrorKind::Config, "checkpoint frozen parameters do not match its ledger");
    }
  }

  const auto phi_bytes = param_bytes(state.phi);
  const auto theta0_bytes = param_bytes(state.theta_source.layers);
  std::vector<std::size_t> seen;
  for (std::size_t t = 0; t < state.step; ++t) {
    const std::size_t di = seq.steps[t].domain_index;
    if (std::find(seen.begin(), seen.end(), di) == seen.end()) seen.push_back(di);
  }

  Checkpoint out = ck;
  out.kind = CheckpointKind::Run;
  out.config_digest = cfg_digest;
  out.seed = cfg.run.seed;
  for (std::size_t t = state.step; t < seq.steps.size(); ++t) {
    const SequenceStep& step = seq.steps[t];
    AdaptLog log;
    state = adapt_domain(std::move(state), step.train, {t + 1, step.domain_index, step.half}, cfg.run, &log);
    check_frozen(phi_bytes, theta0_bytes, state);
    log.events.push_back({t + 1, -1, "freeze_check", "phi=" + ledger.phi_digest + " theta_source=" + ledger.theta_source_digest});
    log.events.push_back({t + 1, -1, "snapshot", "theta=" + digest(state.theta_current)});

    if (std::find(seen.begin(), seen.end(), step.domain_index) == seen.end()) seen.push_back(step.domain_index);
    StepRecord rec;
    rec.step = t + 1;
    rec.domain_id = step.domain_id;
    rec.half = step.half;
    for (std::size_t di : seen) {
      const EvalCounts c = evaluate_counts(state.theta_current, state.phi, seq.domains[di].test, cfg.run.threads);
      rec.accuracies.push_back({seq.domains[di].spec.id, c.correct, c.total, true});
    }
    if (cfg.run.eval_unseen) {
      for (std::size_t di = 0; di < seq.domains.size(); ++di) {
        if (std::find(seen.begin(), seen.end(), di) != seen.end()) continue;
        const EvalCounts c = evaluate_counts(state.theta_current, state.phi, seq.domains[di].test, cfg.run.threads);
        rec.accuracies.push_back({seq.domains[di].spec.id, c.correct, c.total, false});
      }
    }
    rec.epochs = std::move(log.epochs);
    ledger.steps.push_back(std::move(rec));
    ledger.events.insert(ledger.events.end(), log.events.begin(), log.events.end());

    out.state = state;
    out.ledger = ledger;
    if (opts.on_step) opts.on_step(out);
    if (opts.stop_after > 0 && t + 1 >= opts.stop_after) break;
  }
  out.state = state;
  out.ledger = ledger;
  return {ledger, out};
}

}  // namespace driftlab
