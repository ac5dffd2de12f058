#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "causalformer/causal_extract.hpp"
#include "causalformer/errors.hpp"
#include "causalformer/harness.hpp"
#include "causalformer/io.hpp"
#include "causalformer/metrics.hpp"
#include "causalformer/var_baseline.hpp"

namespace cf = causalformer;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool exclude_diagonal = false;
  cf::Index threads = 1;
};

cf::ExperimentConfig load(const Common& c) {
  cf::ExperimentConfig cfg = c.config.empty() ? cf::ExperimentConfig{} : cf::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

Eigen::MatrixXi truth_from_file(const cf::fs::path& path) {
  const cf::Json j = cf::read_json(path);
  if (j.contains("adjacency")) return cf::topology_from_json(j).adjacency;
  const cf::Matrix scores = cf::estimate_from_json(j).scores;
  return (scores.array() != 0.0).cast<int>();
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

void print_auroc(const std::string& label, const cf::Matrix& scores, const Eigen::MatrixXi& truth, bool exclude) {
  std::cout << label << " AUROC " << fmt(cf::auroc(scores, truth, true).auroc);
  if (exclude) std::cout << " (off-diagonal " << fmt(cf::auroc(scores, truth, false).auroc) << ")";
  std::cout << "\n";
}

int cmd_simulate(const Common& c, cf::Index n_opt, double p_opt) {
  const auto cfg = load(c);
  const cf::Index n = n_opt > 0 ? n_opt : cfg.sizes.front();
  const double p = p_opt >= 0 ? p_opt : cfg.probs.front();
  const std::uint64_t seed = c.seed ? *c.seed : cf::topology_seed(cfg, n, p, 0);
  const auto net = cf::simulate_network(cfg, n, p, seed);
  cf::write_network(net, c.out);
  std::cout << "simulated n=" << n << " p=" << p << " T=" << cfg.steps << " seed=" << seed << " -> " << c.out
            << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  const auto cfg = load(c);
  const cf::fs::path out = c.out;
  const cf::Matrix raw = cf::read_trace_csv(cf::fs::path(data_dir) / "trace.csv");
  const auto data = cf::make_dataset(cfg, raw);
  cf::write_json(out / "dataset.json", cf::dataset_manifest(data, (cf::fs::path(data_dir) / "trace.csv").string()));
  const std::uint64_t seed = c.seed.value_or(0);
  auto outcome = cf::train_seed(cfg, data, 0, seed, out, [](const cf::EpochStats& s) {
    std::cerr << "epoch " << s.epoch << " train " << fmt(s.train_loss) << " val " << fmt(s.val_loss) << " lr "
              << fmt(s.lr) << "\n";
  });
  cf::CausalEstimate est;
  est.scores = outcome.attention;
  cf::write_json(out / "attention.json", cf::to_json(est));
  std::cout << "best epoch " << outcome.report.best_epoch << ", val loss " << fmt(outcome.report.best_val_loss)
            << ", test R2 " << fmt(outcome.r2) << "\n";
  return 0;
}

int cmd_extract(const Common& c, const std::string& data_dir, const std::vector<std::string>& checkpoints) {
  const auto cfg = load(c);
  const cf::Matrix raw = cf::read_trace_csv(cf::fs::path(data_dir) / "trace.csv");
  const auto data = cf::make_dataset(cfg, raw);
  std::vector<cf::Matrix> per_model;
  for (const auto& ckpt : checkpoints) {
    const auto pass = cf::checkpoint_test_pass(ckpt, data, cfg.train.eval_batch_size);
    per_model.push_back(pass.attention_sampavg);
    std::cout << ckpt << ": test R2 " << fmt(cf::r2_score(pass.truth, pass.predicted).mean) << "\n";
  }
  const auto estimate = cf::average_models(per_model);
  cf::write_json(c.out, cf::to_json(estimate));
  std::cout << "estimate from " << per_model.size() << " model(s) -> " << c.out << "\n";
  return 0;
}

int cmd_mvgc(const Common& c, const std::string& data_dir) {
  const auto cfg = load(c);
  const cf::fs::path dir(data_dir);
  const cf::Matrix raw = cf::read_trace_csv(dir / "trace.csv");
  const auto data = cf::make_dataset(cfg, raw);
  const cf::Matrix series = cf::baseline_series(cfg, raw, data);
  std::optional<Eigen::MatrixXi> truth;
  if (cf::fs::exists(dir / "topology.json")) truth = truth_from_file(dir / "topology.json");
  for (auto criterion : {cf::InformationCriterion::AIC, cf::InformationCriterion::BIC}) {
    const auto sel = cf::select_order(series, cfg.baseline.max_p, criterion);
    const auto gc = cf::pairwise_conditional_gc(series, sel.order);
    cf::Json j = cf::to_json(gc.estimate());
    j["order"] = sel.order;
    j["criterion"] = cf::to_string(criterion);
    j["missing"] = gc.errors;
    const cf::fs::path file = cf::fs::path(c.out) / ("mvgc_" + cf::to_string(criterion) + ".json");
    cf::write_json(file, j);
    const std::string label = "MVGC (" + cf::to_string(criterion) + ", p=" + std::to_string(sel.order) + ")";
    if (truth) {
      print_auroc(label, gc.f, *truth, c.exclude_diagonal);
    } else {
      std::cout << label << " -> " << file.string() << "\n";
    }
  }
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& estimate, const std::string& truth_path,
                 const std::string& roc_path, const std::string& data_dir,
                 const std::vector<std::string>& checkpoints) {
  const auto est = cf::estimate_from_json(cf::read_json(estimate));
  const auto truth = truth_from_file(truth_path);
  const auto roc = cf::auroc(est.scores, truth, !c.exclude_diagonal);
  std::cout << "AUROC " << fmt(roc.auroc) << " (" << roc.positives << " positives, " << roc.negatives
            << " negatives, diagonal " << (c.exclude_diagonal ? "excluded" : "included") << ")\n";
  if (!roc_path.empty()) cf::write_roc_csv(roc, roc_path);
  if (!checkpoints.empty()) {
    if (data_dir.empty()) throw cf::ConfigError("--checkpoints needs --data");
    const auto cfg = load(c);
    const auto data = cf::make_dataset(cfg, cf::read_trace_csv(cf::fs::path(data_dir) / "trace.csv"));
    double sum = 0.0;
    for (const auto& ckpt : checkpoints) {
      const auto pass = cf::checkpoint_test_pass(ckpt, data, cfg.train.eval_batch_size);
      const double r2 = cf::r2_score(pass.truth, pass.predicted).mean;
      sum += r2;
      std::cout << ckpt << ": R2 " << fmt(r2) << "\n";
    }
    std::cout << "mean R2 " << fmt(sum / static_cast<double>(checkpoints.size())) << "\n";
  }
  return 0;
}

int cmd_experiment(const Common& c) {
  const auto cfg = load(c);
  cf::ExperimentOptions opts;
  opts.out = c.out;
  opts.threads = c.threads;
  opts.log = [](const std::string& line) { std::cerr << line << std::endl; };
  const auto result = cf::run_experiment(cfg, opts);
  for (const auto& r : result.records) {
    const auto pick = [&](const cf::MethodScores& m) {
      return fmt(c.exclude_diagonal ? m.exclude_diagonal : m.include_diagonal);
    };
    std::cout << "n=" << r.n << " p=" << r.p << " topology=" << r.topology;
    if (!r.ok()) {
      std::cout << " FAILED: " << r.errors.front() << "\n";
      continue;
    }
    std::cout << " causalformer " << pick(r.causalformer) << " mvgc_aic " << pick(r.mvgc_aic) << " mvgc_bic "
              << pick(r.mvgc_bic) << " R2 " << fmt(r.r2_mean) << "\n";
  }
  std::cout << "results -> " << (cf::fs::path(c.out) / "results.json").string() << "\n";
  return result.all_ok ? 0 : 2;
}

int cmd_plot(const Common& c, const std::string& results) {
  const cf::Json j = cf::read_json(results);
  if (j.value("schema", 0) != 1) throw cf::IoError(results + ": unsupported results schema");
  std::vector<cf::ResultRecord> records;
  for (const auto& r : j.at("records")) records.push_back(cf::record_from_json(r));
  const auto svgs = cf::emit_plot_data(records, c.out);
  std::cout << "wrote auroc_long.csv, auroc_summary.csv and " << svgs.size() << " SVG file(s) to " << c.out
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal discovery in simulated spiking networks with an attention forecaster"};
  app.require_subcommand(1);
  Common common;
  std::string seed_text;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", common.config, "TOML configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_text, "Seed override");
    auto* out = sub->add_option("--out", common.out, "Output location");
    if (needs_out) out->required();
    sub->add_flag("--exclude-diagonal", common.exclude_diagonal, "Rank only off-diagonal pairs");
    sub->add_option("--threads", common.threads, "Parallel jobs")->check(CLI::PositiveNumber);
  };

  cf::Index n = 0;
  double p = -1.0;
  auto* simulate = app.add_subcommand("simulate", "Generate a topology and simulate its trace");
  add_common(simulate, true);
  simulate->add_option("--n", n, "Number of neurons (default: first configured size)");
  simulate->add_option("--p", p, "Connection probability (default: first configured value)");

  std::string data_dir;
  auto* train = app.add_subcommand("train", "Train one model on a simulated trace");
  add_common(train, true);
  train->add_option("--data", data_dir, "Directory holding trace.csv")->required();

  std::vector<std::string> checkpoints;
  auto* extract = app.add_subcommand("extract", "Average attention estimates of trained models");
  add_common(extract, true);
  extract->add_option("--data", data_dir, "Directory holding trace.csv")->required();
  extract->add_option("--checkpoints", checkpoints, "Checkpoint manifests (model.json)")->required();

  auto* mvgc = app.add_subcommand("mvgc", "Conditional Granger causality baseline");
  add_common(mvgc, true);
  mvgc->add_option("--data", data_dir, "Directory holding trace.csv (and topology.json)")->required();

  std::string estimate;
  std::string truth;
  std::string roc;
  auto* evaluate = app.add_subcommand("evaluate", "AUROC of an estimate against ground truth");
  add_common(evaluate, false);
  evaluate->add_option("--estimate", estimate, "Estimate JSON")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--truth", truth, "topology.json or a 0/1 estimate JSON")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--roc", roc, "Write the ROC curve as CSV");
  evaluate->add_option("--data", data_dir, "Directory holding trace.csv, for R2");
  evaluate->add_option("--checkpoints", checkpoints, "Checkpoint manifests, for R2");

  auto* experiment = app.add_subcommand("experiment", "Run a full sweep");
  add_common(experiment, true);

  std::string results;
  auto* plot = app.add_subcommand("plot", "Plot data and SVG summaries from results.json");
  add_common(plot, true);
  plot->add_option("--results", results, "results.json")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (!seed_text.empty()) {
      std::size_t used = 0;
      const unsigned long long s = std::stoull(seed_text, &used);
      if (used != seed_text.size()) throw cf::ConfigError("--seed must be a nonnegative integer");
      common.seed = s;
    }
    if (*simulate) return cmd_simulate(common, n, p);
    if (*train) return cmd_train(common, data_dir);
    if (*extract) return cmd_extract(common, data_dir, checkpoints);
    if (*mvgc) return cmd_mvgc(common, data_dir);
    if (*evaluate) return cmd_evaluate(common, estimate, truth, roc, data_dir, checkpoints);
    if (*experiment) return cmd_experiment(common);
    if (*plot) return cmd_plot(common, results);
  } catch (const cf::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument&) {
    std::cerr << "configuration error: --seed must be a nonnegative integer\n";
    return 1;
  } catch (const std::out_of_range&) {
    std::cerr << "configuration error: --seed is out of range\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
