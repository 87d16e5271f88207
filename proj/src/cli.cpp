#include "driftlab/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "driftlab/config.hpp"
#include "driftlab/gradcheck_suite.hpp"
#include "driftlab/io.hpp"
#include "driftlab/metrics.hpp"
#include "driftlab/trainer.hpp"

namespace driftlab {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  int threads = 0;
  std::string out;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "experiment config (JSON); built-in defaults when omitted");
  sub->add_option("--seed", f.seed, "global seed, overrides the config");
  sub->add_option("--variant", f.variant, "loss variant, overrides the config");
  sub->add_option("--threads", f.threads, "worker threads (overrides DRIFTLAB_THREADS)");
  sub->add_option("--out", f.out, "output directory, overrides the config");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? default_config() : load_config(f.config);
  if (f.seed) cfg.run.seed = *f.seed;
  if (!f.variant.empty()) {
    try {
      cfg.run.variant = variant_from_string(f.variant);
    } catch (const Error&) {
      raise(ErrorKind::Config, "--variant '" + f.variant + "' is not a known loss variant");
    }
  }
  if (f.threads < 0) raise(ErrorKind::Config, "--threads must be positive");
  if (f.threads > 0 || std::getenv("DRIFTLAB_THREADS")) cfg.run.threads = resolve_threads(f.threads);
  if (!f.out.empty()) cfg.out_dir = f.out;
  validate(cfg);
  return cfg;
}

fs::path make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) raise(ErrorKind::Io, "cannot create output directory " + dir.string());
  return dir;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * v);
  return buf;
}

void print_summary(std::ostream& os, const MetricsLedger& ledger) {
  os << "variant " << ledger.variant << " seed " << ledger.seed << "\n";
  for (const auto& s : ledger.steps) {
    os << "  step " << s.step << " " << s.domain_id << "/" << s.half << ":";
    for (const auto& a : s.accuracies) {
      if (a.seen) os << " " << a.domain_id << "=" << pct(a.accuracy());
    }
    os << "\n";
  }
  os << "mean acc (post-adaptation) " << pct(mean_adaptation_accuracy(ledger)) << "\n";
  if (ledger.steps.size() >= 2) os << "mean forget " << pct(mean_forgetting(ledger)) << "\n";
}

std::optional<Checkpoint> starting_checkpoint(const ExperimentConfig& cfg, const std::string& resume) {
  if (!resume.empty()) return load_checkpoint(resume);
  if (!cfg.checkpoint.empty()) return load_checkpoint(cfg.checkpoint);
  return std::nullopt;
}

int cmd_pretrain(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  const SequenceSpec seq = make_sequence(cfg);
  const fs::path out = make_dir(cfg.out_dir);
  const Checkpoint ck = pretrain_source(cfg, seq.source_train);
  const double acc = evaluate(ck.state.theta_current, ck.state.phi, seq.source_test, cfg.run.threads);
  save_checkpoint(ck, out / "pretrained.json");
  std::cerr << "pretrain: final loss " << ck.pretrain_losses.back() << ", source test accuracy " << pct(acc) << "\n";
  std::cout << (out / "pretrained.json").string() << "\n";
  return 0;
}

int cmd_run(const CommonFlags& flags, const std::string& resume) {
  const ExperimentConfig cfg = resolve_config(flags);
  const SequenceSpec seq = make_sequence(cfg);
  const fs::path out = make_dir(cfg.out_dir);
  const fs::path ckdir = make_dir(out / "checkpoints");
  RunOptions opts;
  opts.start = starting_checkpoint(cfg, resume);
  opts.on_step = [&](const Checkpoint& c) {
    save_checkpoint(c, ckdir / ("step_" + std::to_string(c.state.step) + ".json"));
    const StepRecord& s = c.ledger.steps.back();
    std::cerr << "step " << s.step << " " << s.domain_id << "/" << s.half << " accuracy "
              << pct(s.find(s.domain_id)->accuracy()) << "\n";
  };
  const RunResult r = run_sequence(cfg, seq, opts);
  save_checkpoint(r.final_checkpoint, out / "final.json");
  emit_report(r.ledger, out / "ledger.json", ReportFormat::Json);
  emit_report(r.ledger, out / "ledger.csv", ReportFormat::Csv);
  print_summary(std::cout, r.ledger);
  return 0;
}

int cmd_ablate(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  const SequenceSpec seq = make_sequence(cfg);
  const fs::path out = make_dir(cfg.out_dir);
  const Checkpoint start = cfg.checkpoint.empty() ? pretrain_source(cfg, seq.source_train)
                                                  : load_checkpoint(cfg.checkpoint);
  std::string table = "variant,mean_acc,mean_forget,final_model_mean_acc\n";
  std::vector<MetricsLedger> ledgers;
  for (LossVariant v : all_variants()) {
    ExperimentConfig c = cfg;
    c.run.variant = v;
    RunOptions opts;
    opts.start = start;
    const RunResult r = run_sequence(c, seq, opts);
    const double acc = mean_adaptation_accuracy(r.ledger), forget = mean_forgetting(r.ledger);
    table += to_string(v) + "," + format_double(acc) + "," + format_double(forget) + "," +
             format_double(final_model_accuracy(r.ledger)) + "\n";
    std::cerr << "ablate: " << to_string(v) << " mean acc " << pct(acc) << " mean forget " << pct(forget) << "\n";
    ledgers.push_back(r.ledger);
  }
  for (const auto& l : ledgers) {
    const fs::path dir = make_dir(out / "ablation" / l.variant);
    emit_report(l, dir / "ledger.json", ReportFormat::Json);
    emit_report(l, dir / "ledger.csv", ReportFormat::Csv);
  }
  write_file_atomic(out / "ablation.csv", table);
  std::cout << table;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, long long trials, bool inject) {
  if (trials <= 0) raise(ErrorKind::Config, "--trials must be positive");
  GradCheckSuiteOptions opts;
  opts.seed = seed;
  opts.trials = static_cast<std::size_t>(trials);
  opts.inject_sign_flip = inject;
  const GradCheckReport report = run_gradcheck_suite(opts);
  const GradCheckTrial& w = report.worst();
  std::cout << "gradcheck: " << report.trials.size() << " configurations, " << report.failures
            << " failures, worst relative error " << w.result.max_rel_error << " (variant "
            << to_string(w.variant) << ", coordinate " << w.result.worst_index << ", analytic "
            << w.result.analytic << ", numeric " << w.result.numeric << ")\n";
  if (report.passed()) return 0;
  for (const auto& t : report.trials) {
    if (t.result.max_rel_error < opts.tolerance) continue;
    std::cerr << "FAIL variant " << to_string(t.variant) << " seed " << t.seed << " coordinate "
              << t.result.worst_index << " analytic " << t.result.analytic << " numeric "
              << t.result.numeric << " rel " << t.result.max_rel_error << "\n";
  }
  return 5;
}

int cmd_report(const std::string& ledger_path, const std::string& format, const std::string& out) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(ledger_path));
  } catch (const nlohmann::json::parse_error& e) {
    raise(ErrorKind::Ledger, ledger_path + " is not valid JSON: " + e.what());
  }
  const MetricsLedger ledger = ledger_from_json(j);
  print_summary(std::cout, ledger);
  if (!out.empty()) emit_report(ledger, out, format == "json" ? ReportFormat::Json : ReportFormat::Csv);
  return 0;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Ingestion:
    case ErrorKind::Ledger:
    case ErrorKind::UndefinedMetric: return 1;
    case ErrorKind::Config:
    case ErrorKind::Shape:
    case ErrorKind::Domain: return 2;
    case ErrorKind::Numeric:
    case ErrorKind::EmptyInput:
    case ErrorKind::DegenerateVector:
    case ErrorKind::InvalidDistribution: return 3;
    case ErrorKind::Refinement: return 4;
  }
  return 3;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Continual source-free domain adaptation experiments", "driftlab"};
  app.require_subcommand(1);

  CommonFlags pre_flags, run_flags, abl_flags;
  std::string resume;
  auto* pre = app.add_subcommand("pretrain", "train the source model and write a checkpoint");
  add_common(pre, pre_flags);
  auto* run = app.add_subcommand("run", "adapt over the domain sequence and write ledgers");
  add_common(run, run_flags);
  run->add_option("--resume", resume, "checkpoint to continue from");
  auto* abl = app.add_subcommand("ablate", "run every loss variant and write ablation.csv");
  add_common(abl, abl_flags);

  std::uint64_t gc_seed = 1;
  long long gc_trials = 100;
  bool gc_inject = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss variant");
  gc->add_option("--seed", gc_seed, "seed of the random configurations");
  gc->add_option("--trials", gc_trials, "configurations per variant")->capture_default_str();
  gc->add_flag("--inject-sign-flip", gc_inject, "negate one gradient path (detector self-test)")->group("");

  std::string rep_ledger, rep_format = "csv", rep_out;
  auto* rep = app.add_subcommand("report", "summarize a ledger.json and optionally re-emit it");
  rep->add_option("--ledger", rep_ledger, "ledger.json to read")->required();
  rep->add_option("--format", rep_format, "format for --out")->check(CLI::IsMember({"csv", "json"}));
  rep->add_option("--out", rep_out, "file to write the report to");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pre) return cmd_pretrain(pre_flags);
    if (*run) return cmd_run(run_flags, resume);
    if (*abl) return cmd_ablate(abl_flags);
    if (*gc) return cmd_gradcheck(gc_seed, gc_trials, gc_inject);
    if (*rep) return cmd_report(rep_ledger, rep_format, rep_out);
  } catch (const Error& e) {
    std::cerr << "driftlab: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "driftlab: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "driftlab: malformed input: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "driftlab: internal failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace driftlab
