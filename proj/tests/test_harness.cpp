#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "causalformer/causal_extract.hpp"
#include "causalformer/errors.hpp"
#include "causalformer/harness.hpp"

using namespace causalformer;

namespace {

const char* kTinyConfig = R"(
seed = 11

[experiment]
sizes = [4]
probs = [0.5]
topologies_per_cell = 2
seeds_per_network = 2

[simulation]
steps = 500

[model]
d_model = 8
heads = 2
head_dim = 4
d_ff = 16

[train]
max_epochs = 3
early_stop_patience = 2
lr_patience = 1
batch_size = 32

[baseline]
max_p = 4
)";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("causalformer_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
  return out;
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = std::string(CAUSALFORMER_CLI_PATH) + " " + args + " > " + out.string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out);
  return r;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, DefaultsMatchReferenceSetup) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.sizes, (std::vector<Index>{5, 10, 20, 40}));
  EXPECT_EQ(cfg.probs, (std::vector<double>{0.2, 0.4, 0.6, 0.8}));
  EXPECT_EQ(cfg.topologies_per_cell, 10);
  EXPECT_EQ(cfg.seeds_per_network, 10);
  EXPECT_EQ(cfg.steps, 5000);
  EXPECT_EQ(cfg.history, 10);
  EXPECT_EQ(cfg.horizon, 1);
  EXPECT_EQ(cfg.model.d_model, 100);
  EXPECT_EQ(cfg.model.heads, 10);
  EXPECT_EQ(cfg.model.d_ff, 400);
  EXPECT_EQ(cfg.train.lr, 5e-4);
  EXPECT_EQ(cfg.baseline.max_p, 20);
  EXPECT_TRUE(cfg.baseline.normalized);
  EXPECT_FALSE(cfg.baseline.train_only);
}

TEST(Config, ParsesEverySection) {
  const auto cfg = parse_config(std::string(kTinyConfig) + "input = \"raw\"\nsegment = \"train\"\n");
  EXPECT_EQ(cfg.seed, 11u);
  EXPECT_EQ(cfg.sizes, std::vector<Index>{4});
  EXPECT_EQ(cfg.steps, 500);
  EXPECT_EQ(cfg.model.d_ff, 16);
  EXPECT_EQ(cfg.train.max_epochs, 3);
  EXPECT_EQ(cfg.baseline.max_p, 4);
  EXPECT_FALSE(cfg.baseline.normalized);
  EXPECT_TRUE(cfg.baseline.train_only);
  const auto m = model_config(cfg, 4);
  EXPECT_EQ(m.neurons, 4);
  EXPECT_EQ(m.time_scale, 1.0 / 500.0);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("sead = 1"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nwidth = 3"), ConfigError);
  EXPECT_THROW(parse_config("[modle]\nd_model = 3"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = \"fast\""), ConfigError);
  EXPECT_THROW(parse_config("[experiment]\nprobs = [1.5]"), ConfigError);
  EXPECT_THROW(parse_config("[experiment]\nsizes = [1]"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nscope = \"per_batch\""), ConfigError);
  EXPECT_THROW(parse_config("[baseline]\ninput = \"filtered\""), ConfigError);
  EXPECT_THROW(parse_config("seed = "), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.toml"), ConfigError);
}

TEST(Config, HashTracksMeaningfulFields) {
  const auto a = parse_config(kTinyConfig);
  const auto b = parse_config(kTinyConfig);
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  auto c = a;
  c.train.lr = 1e-3;
  EXPECT_NE(config_hash(a), config_hash(c));
  auto d = a;
  d.seed = 12;
  EXPECT_NE(config_hash(a), config_hash(d));
}

TEST(Config, SeedsAreDistinctAndStable) {
  const auto cfg = parse_config(kTinyConfig);
  const auto t0 = topology_seed(cfg, 4, 0.5, 0);
  EXPECT_EQ(t0, topology_seed(cfg, 4, 0.5, 0));
  EXPECT_NE(t0, topology_seed(cfg, 4, 0.5, 1));
  EXPECT_NE(t0, topology_seed(cfg, 5, 0.5, 0));
  EXPECT_NE(t0, topology_seed(cfg, 4, 0.4, 0));
  EXPECT_NE(model_seed(t0, 0), model_seed(t0, 1));
}

// ---------------------------------------------------------------- summaries

TEST(Quantile, MatchesSortedInterpolation) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xs(1 + rng.below(20));
    for (auto& x : xs) x = rng.uniform();
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const double pos = q * static_cast<double>(sorted.size() - 1);
      const auto lo = static_cast<std::size_t>(pos);
      const double frac = pos - static_cast<double>(lo);
      const double expected = frac == 0.0 ? sorted[lo] : sorted[lo] * (1 - frac) + sorted[lo + 1] * frac;
      EXPECT_NEAR(quantile(xs, q), expected, 1e-15);
    }
  }
  EXPECT_EQ(quantile({4.0, 1.0, 3.0, 2.0}, 0.5), 2.5);
  EXPECT_THROW(quantile({}, 0.5), ConfigError);
  EXPECT_THROW(quantile({1.0}, 1.5), ConfigError);
}

TEST(Summaries, SingleRecordGivesThreeMethodRows) {
  ResultRecord r;
  r.n = 5;
  r.p = 0.2;
  r.causalformer = {0.9, 0.85};
  r.mvgc_aic = {0.7, 0.6};
  r.mvgc_bic = {0.8, 0.75};
  const auto stats = summarize({r});
  ASSERT_EQ(stats.size(), 3u);
  for (const auto& s : stats) {
    EXPECT_EQ(s.count, 1);
    EXPECT_EQ(s.min, s.max);
    EXPECT_EQ(s.median, s.q25);
  }
  EXPECT_EQ(stats[2].method, "causalformer");
  EXPECT_EQ(stats[2].median, 0.9);

  ResultRecord failed = r;
  failed.errors.push_back("network: boom");
  EXPECT_EQ(summarize({r, failed}).front().count, 1);
}

TEST(Summaries, PlotFilesAgree) {
  const fs::path dir = scratch("plots");
  Rng rng(2);
  std::vector<ResultRecord> records;
  for (double p : {0.2, 0.4}) {
    for (Index t = 0; t < 5; ++t) {
      ResultRecord r;
      r.n = 5;
      r.p = p;
      r.topology = t;
      r.causalformer = {rng.uniform(), rng.uniform()};
      r.mvgc_aic = {rng.uniform(), rng.uniform()};
      r.mvgc_bic = {rng.uniform(), rng.uniform()};
      records.push_back(r);
    }
  }
  const auto svgs = emit_plot_data(records, dir);
  ASSERT_EQ(svgs.size(), 2u);
  const auto long_rows = lines(read_text(dir / "auroc_long.csv"));
  EXPECT_EQ(long_rows.front(), "N,p,method,topology,auroc,auroc_offdiagonal");
  EXPECT_EQ(long_rows.size(), 1u + 10u * 3u);

  const auto summary = lines(read_text(dir / "auroc_summary.csv"));
  EXPECT_EQ(summary.front(), "N,p,method,count,min,q25,median,q75,max");
  ASSERT_EQ(summary.size(), 7u);
  const std::string svg = read_text(svgs.front());
  const std::regex median_re("data-method=\"([a-z_]+)\" data-median=\"([^\"]+)\"");
  int matched = 0;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), median_re); it != std::sregex_iterator(); ++it) {
    for (std::size_t row = 1; row < summary.size(); ++row) {
      const auto cells = split(summary[row]);
      if (cells[1] == "0.2" && cells[2] == (*it)[1].str()) {
        EXPECT_EQ(cells[6], (*it)[2].str());
        ++matched;
      }
    }
  }
  EXPECT_EQ(matched, 3);
  EXPECT_THROW(emit_plot_data({}, dir), ConfigError);
  fs::remove_all(dir);
}

TEST(Records, JsonRoundTrip) {
  ResultRecord r;
  r.n = 10;
  r.p = 0.6;
  r.topology = 3;
  r.topology_seed = 123456789012345ULL;
  r.causalformer = {0.8, 0.7};
  r.aic_order = 4;
  r.bic_order = 2;
  r.r2_per_seed = {0.9, 0.95};
  r.r2_mean = 0.925;
  r.errors = {"seed 1: diverged"};
  const auto back = record_from_json(Json::parse(to_json(r).dump()));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_THROW(record_from_json(Json::object()), IoError);
}

// ---------------------------------------------------------------- sweep

TEST(Experiment, DeterministicAndResumable) {
  const auto cfg = parse_config(kTinyConfig);
  const fs::path a = scratch("sweep_a");
  const fs::path b = scratch("sweep_b");
  const auto ra = run_experiment(cfg, {a, 1, {}});
  ASSERT_TRUE(ra.all_ok) << ra.records.front().errors.front();
  ASSERT_EQ(ra.records.size(), 2u);
  for (const auto& r : ra.records) {
    EXPECT_EQ(r.r2_per_seed.size(), 2u);
    EXPECT_GE(r.causalformer.include_diagonal, 0.0);
    EXPECT_LE(r.causalformer.include_diagonal, 1.0);
    EXPECT_GE(r.bic_order, 1);
  }
  const std::string first = read_text(a / "results.json");
  const Json timings = read_json(a / "timings.json");
  EXPECT_TRUE(timings.contains("total_seconds"));

  // Same config in a fresh directory, two workers.
  run_experiment(cfg, {b, 2, {}});
  EXPECT_EQ(read_text(b / "results.json"), first);

  // Resume: finished stages are reused, a removed marker is recomputed identically.
  const fs::path seed_marker = a / "cells" / "n4_p0.5" / "topology_000" / "seed_001" / "seed.done.json";
  const std::string marker_text = read_text(seed_marker);
  std::vector<std::string> logged;
  fs::remove(a / "cells" / "n4_p0.5" / "topology_001" / "seed_000" / "seed.done.json");
  run_experiment(cfg, {a, 1, [&](const std::string& s) { logged.push_back(s); }});
  EXPECT_EQ(read_text(a / "results.json"), first);
  EXPECT_EQ(read_text(seed_marker), marker_text);
  ASSERT_EQ(logged.size(), 1u);
  EXPECT_NE(logged.front().find("topology_001"), std::string::npos);

  // A baseline-only change keeps trained models.
  auto changed = cfg;
  changed.baseline.max_p = 3;
  logged.clear();
  const auto rc = run_experiment(changed, {a, 1, [&](const std::string& s) { logged.push_back(s); }});
  EXPECT_EQ(read_text(seed_marker), marker_text);
  for (const auto& line : logged) EXPECT_EQ(line.rfind("baseline", 0), 0u) << line;
  EXPECT_EQ(rc.records[0].r2_per_seed, ra.records[0].r2_per_seed);
  EXPECT_NE(read_text(a / "results.json"), first);

  // A concurrent run on the same directory is refused.
  write_text_atomic(a / "experiment.lock", "1\n");
  EXPECT_THROW(run_experiment(cfg, {a, 1, {}}), IoError);
  fs::remove_all(a);
  fs::remove_all(b);
}

// ---------------------------------------------------------------- command line

TEST(Cli, SubcommandsAndExitCodes) {
  const fs::path dir = scratch("cli");
  const fs::path cfg_path = dir / "tiny.toml";
  write_text_atomic(cfg_path, kTinyConfig);
  const std::string cfg = " --config " + cfg_path.string();

  EXPECT_EQ(run_cli("", dir).code, 1);
  EXPECT_EQ(run_cli("--help", dir).code, 0);
  EXPECT_EQ(run_cli("simulate --out " + dir.string() + " --seed abc", dir).code, 1);
  write_text_atomic(dir / "bad.toml", "[model]\nwidth = 3\n");
  EXPECT_EQ(run_cli("simulate --config " + (dir / "bad.toml").string() + " --out " + dir.string(), dir).code, 1);
  EXPECT_EQ(run_cli("mvgc --data " + (dir / "nothing").string() + " --out " + dir.string(), dir).code, 2);

  const fs::path net = dir / "net";
  fs::create_directories(net);
  ASSERT_EQ(run_cli("simulate" + cfg + " --n 4 --p 0.5 --seed 3 --out " + net.string(), dir).code, 0);
  EXPECT_TRUE(fs::exists(net / "topology.json"));
  EXPECT_TRUE(fs::exists(net / "trace.meta.json"));
  EXPECT_EQ(read_trace_csv(net / "trace.csv").rows(), 500);

  // The ground truth scored against itself.
  const auto topo = topology_from_json(read_json(net / "topology.json"));
  CausalEstimate perfect;
  perfect.scores = topo.adjacency.cast<double>();
  write_json(dir / "perfect.json", to_json(perfect));
  const auto eval = run_cli("evaluate --estimate " + (dir / "perfect.json").string() + " --truth " +
                                (net / "topology.json").string() + " --roc " + (dir / "roc.csv").string(),
                            dir);
  EXPECT_EQ(eval.code, 0);
  EXPECT_EQ(eval.out.rfind("AUROC 1 ", 0), 0u) << eval.out;
  EXPECT_TRUE(fs::exists(dir / "roc.csv"));

  ASSERT_EQ(run_cli("mvgc" + cfg + " --data " + net.string() + " --out " + dir.string(), dir).code, 0);
  const Json bic = read_json(dir / "mvgc_bic.json");
  EXPECT_EQ(bic.at("criterion").get<std::string>(), "bic");

  const fs::path model = dir / "model";
  fs::create_directories(model);
  ASSERT_EQ(run_cli("train" + cfg + " --data " + net.string() + " --out " + model.string(), dir).code, 0);
  EXPECT_TRUE(fs::exists(model / "model.json"));
  ASSERT_EQ(run_cli("extract" + cfg + " --data " + net.string() + " --checkpoints " +
                        (model / "model.json").string() + " --out " + (dir / "estimate.json").string(),
                    dir)
                .code,
            0);
  // Extracting from the checkpoint reproduces the estimate written at training time.
  const Matrix trained = estimate_from_json(read_json(model / "attention.json")).scores;
  EXPECT_EQ(estimate_from_json(read_json(dir / "estimate.json")).scores, average_models(std::vector<Matrix>{trained}).scores);
  fs::remove_all(dir);
}
