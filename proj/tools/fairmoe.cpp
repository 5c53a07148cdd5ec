// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: data synthesis, training, evaluation, metric
// computation from prediction manifests, and the ablation suites.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairmoe/checkpoint.hpp"
#include "fairmoe/config.hpp"
#include "fairmoe/data.hpp"
#include "fairmoe/metrics.hpp"
#include "fairmoe/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool g_verbose = false;

void write_run_manifest(const fs::path& dir, const json& manifest) {
  fs::create_directories(dir);
  std::ofstream f(dir / "run_manifest.json");
  if (!f) throw fairmoe::IoError("cannot write run manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

std::string fmt_x100(const std::optional<double>& v) {
  if (!v.has_value()) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << (*v * 100.0);
  return os.str();
}

// Metric values are shown x100 with two decimals, like the experiment grids.
void print_report_table(const std::vector<fairmoe::MetricsReport>& reports) {
  std::printf("%-12s %10s %10s %10s %10s\n", "attribute", "ES-AUC", "AUC", "DPD", "EOD");
  for (const auto& rep : reports) {
    std::printf("%-12s %10s %10s %10s %10s\n", rep.attribute.c_str(), fmt_x100(rep.es_auc).c_str(),
                fmt_x100(rep.auc).c_str(), fmt_x100(rep.dpd).c_str(), fmt_x100(rep.eod).c_str());
  }
  for (const auto& rep : reports) {
    for (const auto& w : rep.warnings) std::printf("  [%s] n/a (%s)\n", rep.attribute.c_str(), w.c_str());
    if (g_verbose) {
      std::printf("  [%s] counts:", rep.attribute.c_str());
      for (const auto& [g, c] : rep.counts) std::printf(" %d=%d", g, c);
      std::printf("  per-group AUC:");
      for (const auto& [g, a] : rep.per_group_auc) std::printf(" %d=%.4f", g, a);
      std::printf("\n");
    }
  }
}

fairmoe::DpdMode parse_dpd_mode(const std::string& s) {
  if (s == "standard") return fairmoe::DpdMode::kStandard;
  if (s == "as-printed") return fairmoe::DpdMode::kAsPrinted;
  throw fairmoe::ContractError("unknown dpd mode: " + s);
}

// --- synth ------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int n = 1000;
  double bias = 0.9;
  std::uint64_t seed = 1;
  std::string priors_file;
  double noise = 0.05;
  double label_strength = 0.6;
  double artifact_strength = 0.8;
  int image_size = 16;
  bool skip_probe = false;
};

int run_synth(const SynthArgs& a) {
  fairmoe::SynthSpec spec;
  spec.n = a.n;
  spec.seed = a.seed;
  spec.bias_strength = a.bias;
  spec.noise_sigma = a.noise;
  spec.label_signal_strength = a.label_strength;
  spec.artifact_strength = a.artifact_strength;
  spec.image_size = a.image_size;
  if (!a.priors_file.empty()) {
    std::ifstream f(a.priors_file);
    if (!f) throw fairmoe::IoError("cannot open priors file: " + a.priors_file);
    json pj;
    try {
      f >> pj;
    } catch (const json::exception& e) {
      throw fairmoe::ParseError(std::string("priors file: ") + e.what());
    }
    for (auto& attr : spec.attributes) {
      if (pj.contains(attr.name)) attr.priors = pj.at(attr.name).get<std::vector<double>>();
    }
    for (const auto& [key, unused] : pj.items()) {
      bool known = false;
      for (const auto& attr : spec.attributes) known |= attr.name == key;
      if (!known) throw fairmoe::SchemaError("priors file: unknown attribute " + key);
    }
  }
  fairmoe::Dataset ds = fairmoe::synthesize(spec);
  fairmoe::write_dataset(ds, a.out);

  json manifest{{"command", "synth"},
                {"out", a.out},
                {"n", a.n},
                {"bias", a.bias},
                {"seed", a.seed},
                {"noise", a.noise},
                {"label_strength", a.label_strength},
                {"artifact_strength", a.artifact_strength},
                {"image_size", a.image_size}};
  write_run_manifest(a.out, manifest);

  std::printf("wrote %zu records to %s (bias=%.2f, seed=%llu)\n", ds.items.size(), a.out.c_str(), a.bias,
              static_cast<unsigned long long>(a.seed));
  if (!a.skip_probe) {
    std::printf("planted-bias probe (pixel logistic regression, held-out accuracy):\n");
    for (const auto& attr : ds.meta.attributes) {
      fairmoe::ProbeResult pr = fairmoe::pixel_group_probe(ds, attr.name);
      std::printf("  %-10s train %.3f  test %.3f\n", attr.name.c_str(), pr.train_accuracy, pr.test_accuracy);
    }
  }
  return 0;
}

// --- train ------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a) {
  fairmoe::TrainConfig cfg = fairmoe::load_train_config(a.config);
  fairmoe::Dataset full = fairmoe::load_manifest(a.data);
  fairmoe::Dataset train_set = full.filter_split("train");
  fairmoe::Dataset val_set = full.filter_split("val");

  std::unique_ptr<fairmoe::Trainer> trainer;
  if (!a.resume.empty()) {
    fairmoe::CheckpointData ckpt = fairmoe::read_checkpoint(a.resume);
    trainer = std::make_unique<fairmoe::Trainer>(ckpt, train_set, val_set);
    std::printf("resumed at step %ld\n", trainer->step());
  } else {
    trainer = std::make_unique<fairmoe::Trainer>(cfg, train_set, val_set);
  }

  fs::create_directories(a.out);
  write_run_manifest(a.out, json{{"command", "train"}, {"config", cfg}, {"data", a.data}, {"resume", a.resume}});

  std::ofstream log_file(fs::path(a.out) / "loss_log.jsonl",
                         a.resume.empty() ? std::ios::trunc : std::ios::app);
  const int echo_every = g_verbose ? 1 : cfg.eval_every;
  while (trainer->step() < cfg.steps) {
    const std::size_t before = trainer->log().size();
    trainer->run(1);
    const fairmoe::StepLog& lg = trainer->log()[before];
    log_file << json(lg).dump() << "\n";
    if (lg.step % echo_every == 0 || lg.step == cfg.steps)
      std::printf("step %ld  contrastive %.6f  f_ei %.6g  f_et %.6g  f_fi %.6g  f_ft %.6g  l_dist %.6g  total %.6f\n",
                  lg.step, lg.contrastive, lg.f_ei, lg.f_et, lg.f_fi, lg.f_ft, lg.l_distance, lg.total);
  }
  fairmoe::write_checkpoint(fs::path(a.out) / "checkpoint.ckpt", trainer->make_checkpoint());
  if (trainer->best_val_step() >= 0)
    std::printf("best validation AUC %.4f at step %ld\n", trainer->best_val_auc(), trainer->best_val_step());
  std::printf("checkpoint written to %s\n", (fs::path(a.out) / "checkpoint.ckpt").string().c_str());
  return 0;
}

// --- eval ---------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string attr = "all";
  std::string dpd_mode = "standard";
  double threshold = 0.5;
  std::string split = "test";
  std::string out;
  int bootstrap = 0;
};

int run_eval(const EvalArgs& a) {
  fairmoe::CheckpointData ckpt = fairmoe::read_checkpoint(a.ckpt);
  fairmoe::FairMoeModel model = fairmoe::model_for_eval(ckpt);
  fairmoe::Dataset full = fairmoe::load_manifest(a.data);
  fairmoe::Dataset eval_set = a.split == "all" ? full : full.filter_split(a.split);
  const fairmoe::DpdMode mode = parse_dpd_mode(a.dpd_mode);

  fairmoe::EvalOutput out = fairmoe::evaluate(model, eval_set, mode, a.threshold);
  std::printf("eval: %zu records, split=%s, dpd-mode=%s, threshold=%.2f (values x100)\n", out.records.size(),
              a.split.c_str(), a.dpd_mode.c_str(), a.threshold);
  std::vector<fairmoe::MetricsReport> reports;
  for (const auto& attr : eval_set.meta.attributes) {
    if (a.attr != "all" && a.attr != attr.name) continue;
    reports.push_back(out.reports.at(attr.name));
  }
  if (reports.empty()) throw fairmoe::ContractError("unknown attribute: " + a.attr);
  print_report_table(reports);

  if (a.bootstrap > 0) {
    std::printf("bootstrap 95%% CIs (%d resamples, x100):\n", a.bootstrap);
    for (const auto& rep : reports) {
      fairmoe::Rng rng = fairmoe::Rng::stream(1, "bootstrap/" + rep.attribute);
      auto ci = fairmoe::bootstrap_ci(
          out.records, [](std::span<const fairmoe::PredictionRecord> rs) { return fairmoe::auc(rs); }, a.bootstrap,
          rng);
      std::printf("  %-10s AUC [%.2f, %.2f]\n", rep.attribute.c_str(), ci.lo * 100, ci.hi * 100);
    }
  }

  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw fairmoe::IoError("cannot write report: " + a.out);
    f << json{{"command", "eval"}, {"ckpt", a.ckpt},   {"data", a.data},           {"split", a.split},
              {"attr", a.attr},    {"dpd_mode", a.dpd_mode}, {"threshold", a.threshold}}
             .dump()
      << "\n";
    for (const auto& rep : reports) f << fairmoe::report_to_json(rep).dump() << "\n";
    fairmoe::write_prediction_manifest(a.out + ".predictions.jsonl", out.records);
  }
  return 0;
}

// --- metrics ------------------------------------------------------------

struct MetricsArgs {
  std::string pred;
  std::string attr = "all";
  std::string dpd_mode = "standard";
  double threshold = 0.5;
  std::string out;
};

int run_metrics(const MetricsArgs& a) {
  std::vector<fairmoe::PredictionRecord> records = fairmoe::read_prediction_manifest(a.pred);
  if (records.empty()) throw fairmoe::ContractError("prediction manifest is empty");
  const fairmoe::DpdMode mode = parse_dpd_mode(a.dpd_mode);
  std::vector<std::string> attrs;
  if (a.attr == "all") {
    for (const auto& [name, g] : records.front().groups) attrs.push_back(name);
  } else {
    attrs.push_back(a.attr);
  }
  std::vector<fairmoe::MetricsReport> reports;
  for (const auto& attr : attrs) reports.push_back(fairmoe::compute_report(records, attr, mode, a.threshold));
  std::printf("metrics: %zu records, dpd-mode=%s, threshold=%.2f (values x100)\n", records.size(),
              a.dpd_mode.c_str(), a.threshold);
  print_report_table(reports);
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw fairmoe::IoError("cannot write report: " + a.out);
    f << json{{"command", "metrics"}, {"pred", a.pred}, {"dpd_mode", a.dpd_mode}, {"threshold", a.threshold}}.dump()
      << "\n";
    for (const auto& rep : reports) f << fairmoe::report_to_json(rep).dump() << "\n";
  }
  return 0;
}

// --- ablate -------------------------------------------------------------

struct AblateArgs {
  std::string config;
  std::string data;
  std::string suite;
  int seeds = 3;
  int jobs = 1;
  std::string out;
};

int run_ablate(const AblateArgs& a) {
  fairmoe::TrainConfig base = fairmoe::load_train_config(a.config);
  fairmoe::Dataset full = fairmoe::load_manifest(a.data);
  auto variants = fairmoe::ablation_suite(a.suite);
  auto progress = [](const std::string& msg) {
    if (g_verbose) std::printf("  %s\n", msg.c_str());
  };
  fairmoe::AblationGrid grid = fairmoe::run_ablation_suite(base, full, variants, a.seeds, a.jobs, progress);

  std::printf("suite: %s  attribute: %s  seeds: %d  (values x100%s)\n", a.suite.c_str(), grid.attribute.c_str(),
              a.seeds, a.seeds > 1 ? ", mean±std" : "");
  std::printf("%-22s %14s %14s %14s %14s\n", "variant", "ES-AUC", "AUC", "DPD", "EOD");
  auto cell = [&](const fairmoe::AblationCell& c) {
    std::ostringstream os;
    if (!std::isfinite(c.mean())) return std::string("n/a");
    os << std::fixed << std::setprecision(2) << c.mean() * 100.0;
    if (a.seeds > 1) os << "±" << std::fixed << std::setprecision(2) << c.stddev() * 100.0;
    return os.str();
  };
  for (const auto& row : grid.rows)
    std::printf("%-22s %14s %14s %14s %14s\n", row.variant.c_str(), cell(row.es_auc).c_str(),
                cell(row.auc).c_str(), cell(row.dpd).c_str(), cell(row.eod).c_str());

  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_run_manifest(a.out, json{{"command", "ablate"},
                                   {"config", base},
                                   {"data", a.data},
                                   {"suite", a.suite},
                                   {"seeds", a.seeds}});
    std::ofstream f(fs::path(a.out) / "grid.jsonl");
    for (const auto& row : grid.rows) {
      json j{{"variant", row.variant},
             {"es_auc", row.es_auc.values},
             {"auc", row.auc.values},
             {"dpd", row.dpd.values},
             {"eod", row.eod.values}};
      f << j.dump() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fairmoe: capacity-filtered fair mixture-of-experts dual-encoder experiments"};
  app.require_subcommand(1);
  app.add_flag("--verbose", g_verbose, "chatty progress output");

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic biased dataset");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--n", synth_args.n, "number of examples")->required();
  synth->add_option("--bias", synth_args.bias, "bias strength beta in [0,1]")->required();
  synth->add_option("--seed", synth_args.seed, "generator seed")->required();
  synth->add_option("--priors", synth_args.priors_file, "JSON file of per-attribute group priors");
  synth->add_option("--noise", synth_args.noise, "pixel noise sigma");
  synth->add_option("--label-strength", synth_args.label_strength, "label signal strength");
  synth->add_option("--artifact-strength", synth_args.artifact_strength, "group artifact strength");
  synth->add_option("--image-size", synth_args.image_size, "square image side");
  synth->add_flag("--no-probe", synth_args.skip_probe, "skip the planted-bias probe summary");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", train_args.config, "flat key=value config file")->required();
  train->add_option("--data", train_args.data, "dataset directory")->required();
  train->add_option("--out", train_args.out, "output directory")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", eval_args.ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_args.data, "dataset directory")->required();
  eval->add_option("--attr", eval_args.attr, "attribute name or 'all'");
  eval->add_option("--dpd-mode", eval_args.dpd_mode, "standard | as-printed");
  eval->add_option("--threshold", eval_args.threshold, "binarization threshold on sigmoid(score)");
  eval->add_option("--split", eval_args.split, "dataset split to evaluate (default test)");
  eval->add_option("--out", eval_args.out, "machine-readable report path (JSONL)");
  eval->add_option("--bootstrap", eval_args.bootstrap, "bootstrap resamples for CIs (0 = off)");

  MetricsArgs metrics_args;
  CLI::App* metrics = app.add_subcommand("metrics", "compute metrics from a prediction manifest");
  metrics->add_option("--pred", metrics_args.pred, "prediction manifest (JSONL)")->required();
  metrics->add_option("--attr", metrics_args.attr, "attribute name or 'all'");
  metrics->add_option("--dpd-mode", metrics_args.dpd_mode, "standard | as-printed");
  metrics->add_option("--threshold", metrics_args.threshold, "binarization threshold");
  metrics->add_option("--out", metrics_args.out, "machine-readable report path (JSONL)");

  AblateArgs ablate_args;
  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation suite");
  ablate->add_option("--config", ablate_args.config, "base config file")->required();
  ablate->add_option("--data", ablate_args.data, "dataset directory")->required();
  ablate->add_option("--suite", ablate_args.suite, "fol | fom | terms | layers | modality")->required();
  ablate->add_option("--seeds", ablate_args.seeds, "number of paired seeds");
  ablate->add_option("--jobs", ablate_args.jobs, "parallel worker processes");
  ablate->add_option("--out", ablate_args.out, "output directory for the grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return run_synth(synth_args);
    if (train->parsed()) return run_train(train_args);
    if (eval->parsed()) return run_eval(eval_args);
    if (metrics->parsed()) return run_metrics(metrics_args);
    if (ablate->parsed()) return run_ablate(ablate_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
