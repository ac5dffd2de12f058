#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "causalformer/dataset.hpp"
#include "causalformer/io.hpp"
#include "causalformer/model.hpp"
#include "causalformer/simulator.hpp"
#include "causalformer/trainer.hpp"

namespace causalformer {

struct BaselineSettings {
  Index max_p = 20;
  bool normalized = true;     // false: fit on the raw membrane potential
  bool train_only = false;    // true: fit on the training segment only
};

struct ModelSettings {
  Index d_model = 100;
  Index heads = 10;
  Index head_dim = 8;
  Index d_ff = 400;
  Index encoder_layers = 1;
  Index decoder_layers = 1;
  TokenComposition composition = TokenComposition::Sum;
  bool position_embedding = false;
};

/// Every knob of a sweep. Defaults reproduce the reference setup.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<Index> sizes{5, 10, 20, 40};
  std::vector<double> probs{0.2, 0.4, 0.6, 0.8};
  Index topologies_per_cell = 10;
  Index seeds_per_network = 10;

  Index steps = 5000;
  SimulationConfig simulation;

  Index history = 10;
  Index horizon = 1;
  double clip_threshold = 30.0;
  NormalizationScope scope = NormalizationScope::PerNeuron;

  ModelSettings model;
  TrainConfig train;
  BaselineSettings baseline;

  void validate() const;
};

/// Parse a TOML file; absent keys keep their defaults, unknown keys are errors.
ExperimentConfig load_config(const fs::path& path);
ExperimentConfig parse_config(const std::string& toml_text, const std::string& source = "<string>");

/// Canonical JSON of every semantically meaningful field.
Json to_json(const ExperimentConfig& cfg);

/// Hex FNV-1a 64 of a JSON document's compact dump.
std::string content_hash(const Json& j);
std::string config_hash(const ExperimentConfig& cfg);

ModelConfig model_config(const ExperimentConfig& cfg, Index neurons);

/// Seeds of the sweep, all derived from the master seed.
std::uint64_t topology_seed(const ExperimentConfig& cfg, Index n, double p, Index topology);
std::uint64_t model_seed(std::uint64_t topology_seed, Index replicate);

/// Simulated network plus its preprocessed series.
struct NetworkData {
  NetworkTopology topology;
  SimulationTrace trace;
};

NetworkData simulate_network(const ExperimentConfig& cfg, Index n, double p, std::uint64_t seed);
WindowedDataset make_dataset(const ExperimentConfig& cfg, const Matrix& raw);

/// Series the VAR baseline sees under the configured input/segment switches.
Matrix baseline_series(const ExperimentConfig& cfg, const Matrix& raw, const WindowedDataset& data);

/// Write topology.json, trace.csv and trace.meta.json into `dir`.
void write_network(const NetworkData& net, const fs::path& dir);

struct SeedOutcome {
  Index replicate = 0;
  std::uint64_t seed = 0;
  double r2 = 0.0;
  Matrix attention;  // sample-averaged estimate of this model
  TrainReport report;
};

/// Train one model, checkpoint it into `dir`, and run the test pass on the checkpointed weights.
SeedOutcome train_seed(const ExperimentConfig& cfg, const WindowedDataset& data, Index replicate,
                       std::uint64_t seed, const fs::path& dir, const EpochCallback& on_epoch = {});

/// Sample-averaged attention estimate and first-step R^2 of a checkpointed model.
TestPass checkpoint_test_pass(const fs::path& manifest, const WindowedDataset& data, Index batch_size);

struct MethodScores {
  double include_diagonal = 0.0;
  double exclude_diagonal = 0.0;
};

struct ResultRecord {
  Index n = 0;
  double p = 0.0;
  Index topology = 0;
  std::uint64_t topology_seed = 0;
  MethodScores causalformer;
  MethodScores mvgc_aic;
  MethodScores mvgc_bic;
  Index aic_order = 0;
  Index bic_order = 0;
  double r2_mean = 0.0;
  std::vector<double> r2_per_seed;
  std::string config_hash;
  std::vector<std::string> errors;
  double wall_seconds = 0.0;

  bool ok() const { return errors.empty(); }
};

Json to_json(const ResultRecord& r);
ResultRecord record_from_json(const Json& j);

struct ExperimentOptions {
  fs::path out;
  Index threads = 1;
  /// Progress lines; called from worker threads under a lock.
  std::function<void(const std::string&)> log;
};

struct ExperimentResult {
  std::vector<ResultRecord> records;  // ordered by (n, p, topology)
  bool all_ok = true;
};

/**
 * Full sweep: simulate every network, train every seed, extract and score.
 * Finished stages are skipped when their artifacts carry the current hash.
 * Writes results.json (deterministic) and timings.json.
 */
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& opts);

Json results_json(const ExperimentConfig& cfg, const std::vector<ResultRecord>& records);

/// Linear-interpolation quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct PlotSummary {
  Index n = 0;
  double p = 0.0;
  std::string method;
  Index count = 0;
  double min = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double max = 0.0;
};

std::vector<PlotSummary> summarize(const std::vector<ResultRecord>& records);

/// auroc_long.csv, auroc_summary.csv and one SVG per (n, p) cell; returns the SVG paths.
std::vector<fs::path> emit_plot_data(const std::vector<ResultRecord>& records, const fs::path& dir);

}  // namespace causalformer
