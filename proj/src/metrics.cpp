#include "driftlab/metrics.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <thread>

#include "driftlab/error.hpp"
#include "driftlab/io.hpp"

namespace driftlab {

namespace {

std::size_t count_correct(const ExtractorParams& theta, const ClassifierParams& phi,
                          const Dataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end) return 0;
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = begin; i < end; ++i) rows[i - begin] = i;
  const Matrix logits = predict_logits(theta, phi, select_rows(ds.X, rows));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (argmax(logits.row(i)) == ds.y[begin + i]) ++correct;
  }
  return correct;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

nlohmann::json acc_to_json(const DomainAccuracy& a) {
  return {{"domain", a.domain_id}, {"correct", a.correct}, {"total", a.total},
          {"accuracy", a.accuracy()}, {"seen", a.seen}};
}

DomainAccuracy acc_from_json(const nlohmann::json& j) {
  return {j.at("domain").get<std::string>(), j.at("correct").get<std::size_t>(),
          j.at("total").get<std::size_t>(), j.at("seen").get<bool>()};
}

}  // namespace

const DomainAccuracy* StepRecord::find(const std::string& domain) const {
  for (const auto& a : accuracies) {
    if (a.domain_id == domain) return &a;
  }
  return nullptr;
}

EvalCounts evaluate_counts(const ExtractorParams& theta, const ClassifierParams& phi,
                           const Dataset& testset, unsigned threads) {
  const std::size_t n = testset.size();
  if (n == 0) raise(ErrorKind::EmptyInput, "cannot evaluate on an empty test set");
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads == 1) return {count_correct(theta, phi, testset, 0, n), n};

  std::vector<std::size_t> partial(threads, 0);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      const std::size_t b = t * chunk, e = std::min(n, b + chunk);
      partial[t] = count_correct(theta, phi, testset, b, e);
    });
  }
  for (auto& th : pool) th.join();
  std::size_t correct = 0;
  for (std::size_t c : partial) correct += c;
  return {correct, n};
}

double evaluate(const ExtractorParams& theta, const ClassifierParams& phi, const Dataset& testset,
                unsigned threads) {
  const EvalCounts c = evaluate_counts(theta, phi, testset, threads);
  return static_cast<double>(c.correct) / static_cast<double>(c.total);
}

double mean_adaptation_accuracy(const MetricsLedger& ledger) {
  if (ledger.steps.empty()) raise(ErrorKind::Ledger, "ledger has no adaptation steps");
  double sum = 0.0;
  for (std::size_t t = 0; t < ledger.steps.size(); ++t) {
    const StepRecord& s = ledger.steps[t];
    if (s.step != t + 1) raise(ErrorKind::Ledger, "step indices are not consecutive");
    const DomainAccuracy* a = s.find(s.domain_id);
    if (a == nullptr || a->total == 0) {
      raise(ErrorKind::Ledger, "step " + std::to_string(s.step) + " lacks an accuracy for its own domain");
    }
    sum += a->accuracy();
  }
  return sum / static_cast<double>(ledger.steps.size());
}

double transition_forgetting(const StepRecord& prev, const StepRecord& cur,
                             std::span<const std::string> seen) {
  if (seen.empty()) raise(ErrorKind::UndefinedMetric, "forgetting needs at least one seen domain");
  double drop = 0.0;
  for (const auto& domain : seen) {
    const DomainAccuracy* a = prev.find(domain);
    const DomainAccuracy* b = cur.find(domain);
    if (a == nullptr || b == nullptr) {
      raise(ErrorKind::Ledger, "seen domain '" + domain + "' missing at step " + std::to_string(cur.step));
    }
    drop += a->accuracy() - b->accuracy();
  }
  return drop / static_cast<double>(seen.size());
}

double mean_forgetting(const MetricsLedger& ledger) {
  if (ledger.steps.size() < 2) raise(ErrorKind::UndefinedMetric, "forgetting needs at least two steps");
  std::vector<std::string> seen;
  double sum = 0.0;
  for (std::size_t t = 1; t < ledger.steps.size(); ++t) {
    const StepRecord& prev = ledger.steps[t - 1];
    if (std::find(seen.begin(), seen.end(), prev.domain_id) == seen.end()) seen.push_back(prev.domain_id);
    sum += transition_forgetting(prev, ledger.steps[t], seen);
  }
  return sum / static_cast<double>(ledger.steps.size() - 1);
}

double final_model_accuracy(const MetricsLedger& ledger) {
  if (ledger.steps.empty()) raise(ErrorKind::Ledger, "ledger has no adaptation steps");
  const auto& accs = ledger.steps.back().accuracies;
  if (accs.empty()) raise(ErrorKind::Ledger, "final step has no accuracies");
  double sum = 0.0;
  for (const auto& a : accs) sum += a.accuracy();
  return sum / static_cast<double>(accs.size());
}

nlohmann::json to_json(const MetricsLedger& ledger) {
  nlohmann::json j;
  j["variant"] = ledger.variant;
  j["seed"] = ledger.seed;
  j["config_digest"] = ledger.config_digest;
  j["phi_digest"] = ledger.phi_digest;
  j["theta_source_digest"] = ledger.theta_source_digest;
  j["source_model"] = nlohmann::json::array();
  for (const auto& a : ledger.source_model) j["source_model"].push_back(acc_to_json(a));
  j["steps"] = nlohmann::json::array();
  for (const auto& s : ledger.steps) {
    nlohmann::json js{{"step", s.step}, {"domain", s.domain_id}, {"half", s.half}};
    js["accuracies"] = nlohmann::json::array();
    for (const auto& a : s.accuracies) js["accuracies"].push_back(acc_to_json(a));
    js["epochs"] = nlohmann::json::array();
    for (const auto& e : s.epochs) {
      js["epochs"].push_back({{"epoch", e.epoch},
                              {"lr", e.lr},
                              {"batches", e.batches},
                              {"classification", e.classification},
                              {"distillation", e.distillation},
                              {"total", e.total},
                              {"pass_counts", e.pass_counts},
                              {"masked", e.masked},
                              {"regenerated", e.regenerated},
                              {"snapshot_id", e.snapshot_id},
                              {"pseudo_label_accuracy", e.pseudo_label_accuracy},
                              {"theta_digest", e.theta_digest}});
    }
    j["steps"].push_back(std::move(js));
  }
  j["events"] = nlohmann::json::array();
  for (const auto& e : ledger.events) {
    j["events"].push_back({{"step", e.step}, {"epoch", e.epoch}, {"kind", e.kind}, {"detail", e.detail}});
  }
  nlohmann::json summary;
  summary["mean_acc_definition"] = "mean over steps of accuracy on the step's domain right after adapting to it";
  if (!ledger.steps.empty()) {
    summary["mean_acc"] = mean_adaptation_accuracy(ledger);
    summary["final_model_mean_acc"] = final_model_accuracy(ledger);
  }
  if (ledger.steps.size() >= 2) summary["mean_forget"] = mean_forgetting(ledger);
  j["summary"] = summary;
  return j;
}

MetricsLedger ledger_from_json(const nlohmann::json& j) {
  MetricsLedger l;
  try {
    l.variant = j.at("variant").get<std::string>();
    l.seed = j.at("seed").get<std::uint64_t>();
    l.config_digest = j.at("config_digest").get<std::string>();
    l.phi_digest = j.at("phi_digest").get<std::string>();
    l.theta_source_digest = j.at("theta_source_digest").get<std::string>();
    for (const auto& a : j.at("source_model")) l.source_model.push_back(acc_from_json(a));
    for (const auto& js : j.at("steps")) {
      StepRecord s;
      s.step = js.at("step").get<std::size_t>();
      s.domain_id = js.at("domain").get<std::string>();
      s.half = js.at("half").get<int>();
      for (const auto& a : js.at("accuracies")) s.accuracies.push_back(acc_from_json(a));
      for (const auto& je : js.at("epochs")) {
        EpochRecord e;
        e.epoch = je.at("epoch").get<int>();
        e.lr = je.at("lr").get<double>();
        e.batches = je.at("batches").get<std::size_t>();
        e.classification = je.at("classification").get<double>();
        e.distillation = je.at("distillation").get<double>();
        e.total = je.at("total").get<double>();
        e.pass_counts = je.at("pass_counts").get<std::vector<std::size_t>>();
        e.masked = je.at("masked").get<std::size_t>();
        e.regenerated = je.at("regenerated").get<bool>();
        e.snapshot_id = je.at("snapshot_id").get<std::string>();
        e.pseudo_label_accuracy = je.at("pseudo_label_accuracy").get<double>();
        e.theta_digest = je.at("theta_digest").get<std::string>();
        s.epochs.push_back(std::move(e));
      }
      l.steps.push_back(std::move(s));
    }
    for (const auto& je : j.at("events")) {
      l.events.push_back({je.at("step").get<std::size_t>(), je.at("epoch").get<int>(),
                          je.at("kind").get<std::string>(), je.at("detail").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Ledger, std::string("malformed ledger JSON: ") + e.what());
  }
  return l;
}

std::string ledger_csv(const MetricsLedger& ledger) {
  std::string out = "kind,step,adapted_domain,half,eval_domain,seen,correct,total,value\n";
  for (const auto& s : ledger.steps) {
    for (const auto& a : s.accuracies) {
      out += "acc," + std::to_string(s.step) + "," + s.domain_id + "," + std::to_string(s.half) + "," +
             a.domain_id + "," + (a.seen ? "1" : "0") + "," + std::to_string(a.correct) + "," +
             std::to_string(a.total) + "," + format_double(a.accuracy()) + "\n";
    }
  }
  out += "mean_acc,,,,,,,," + format_double(mean_adaptation_accuracy(ledger)) + "\n";
  if (ledger.steps.size() >= 2) out += "mean_forget,,,,,,,," + format_double(mean_forgetting(ledger)) + "\n";
  return out;
}

CsvReport parse_ledger_csv(const std::string& text) {
  CsvReport r;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    raise(ErrorKind::Ledger, "ledger CSV line " + std::to_string(line_no) + ": " + msg);
  };
  ++line_no;
  if (!std::getline(in, line) || line != "kind,step,adapted_domain,half,eval_domain,seen,correct,total,value") {
    fail("bad header");
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c = split(line, ',');
    if (c.size() != 9) fail("expected 9 cells");
    const auto value = parse_double(c[8]);
    if (!value) fail("non-numeric value");
    if (c[0] == "mean_acc") {
      r.mean_acc = *value;
    } else if (c[0] == "mean_forget") {
      r.mean_forget = *value;
      r.has_forget = true;
    } else if (c[0] == "acc") {
      const auto step = parse_int(c[1]);
      const auto half = parse_int(c[3]);
      const auto correct = parse_int(c[6]);
      const auto total = parse_int(c[7]);
      if (!step || !half || !correct || !total || *step < 1) fail("bad integer cell");
      if (r.ledger.steps.empty() || r.ledger.steps.back().step != static_cast<std::size_t>(*step)) {
        StepRecord s;
        s.step = static_cast<std::size_t>(*step);
        s.domain_id = c[2];
        s.half = static_cast<int>(*half);
        r.ledger.steps.push_back(std::move(s));
      }
      r.ledger.steps.back().accuracies.push_back(
          {c[4], static_cast<std::size_t>(*correct), static_cast<std::size_t>(*total), c[5] == "1"});
    } else {
      fail("unknown row kind '" + c[0] + "'");
    }
  }
  return r;
}

void emit_report(const MetricsLedger& ledger, const std::filesystem::path& path, ReportFormat format) {
  if (format == ReportFormat::Csv) {
    write_file_atomic(path, ledger_csv(ledger));
  } else {
    write_file_atomic(path, to_json(ledger).dump(2) + "\n");
  }
}

}  // namespace driftlab
