#include "causalformer/harness.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <optional>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <toml.hpp>

#include "causalformer/causal_extract.hpp"
#include "causalformer/errors.hpp"
#include "causalformer/metrics.hpp"
#include "causalformer/var_baseline.hpp"

namespace causalformer {

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  if (sizes.empty() || probs.empty()) throw ConfigError("sizes and probs must not be empty");
  for (Index n : sizes) {
    if (n < 2) throw ConfigError("network sizes must be at least 2");
  }
  for (double p : probs) {
    if (!(p >= 0 && p <= 1)) throw ConfigError("connection probabilities must lie in [0, 1]");
  }
  if (topologies_per_cell < 1 || seeds_per_network < 1) throw ConfigError("topology and seed counts must be >= 1");
  if (steps < 1) throw ConfigError("steps must be positive");
  if (!(simulation.input_var >= 0)) throw ConfigError("input variance must be nonnegative");
  if (!(clip_threshold > 0)) throw ConfigError("clip threshold must be positive");
  if (baseline.max_p < 1) throw ConfigError("baseline max_p must be >= 1");
  train.validate();
  model_config(*this, sizes.front()).validate();
  split_indices(steps, history, horizon);
}

namespace {

class TableReader {
 public:
  TableReader(const toml::table& table, std::string where) : table_(table), where_(std::move(where)) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (node == nullptr) return;
    if constexpr (std::is_same_v<T, double>) {
      if (auto v = node->value<double>()) {
        out = *v;
        return;
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node->value<bool>()) {
        out = *v;
        return;
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node->value<std::string>()) {
        out = *v;
        return;
      }
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (auto v = node->value<std::int64_t>(); v && *v >= 0) {
        out = static_cast<std::uint64_t>(*v);
        return;
      }
    } else {
      if (auto v = node->value<std::int64_t>()) {
        out = static_cast<T>(*v);
        return;
      }
    }
    throw ConfigError(where_ + key + ": wrong value type");
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (node == nullptr) return;
    const toml::array* arr = node->as_array();
    if (arr == nullptr) throw ConfigError(where_ + key + ": expected an array");
    std::vector<T> values;
    for (const auto& item : *arr) {
      std::optional<T> v;
      if constexpr (std::is_same_v<T, double>) {
        v = item.value<double>();
      } else {
        if (auto i = item.value<std::int64_t>()) v = static_cast<T>(*i);
      }
      if (!v) throw ConfigError(where_ + key + ": wrong element type");
      values.push_back(*v);
    }
    out = std::move(values);
  }

  const toml::table* sub(const std::string& key) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (node == nullptr) return nullptr;
    if (!node->is_table()) throw ConfigError(where_ + key + ": expected a table");
    return node->as_table();
  }

  void finish() const {
    for (const auto& [key, node] : table_) {
      const std::string name(key.str());
      if (!seen_.contains(name)) throw ConfigError("unknown configuration key '" + where_ + name + "'");
    }
  }

 private:
  const toml::table& table_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
void with_table(TableReader& parent, const std::string& key, Fn&& fn) {
  if (const toml::table* t = parent.sub(key)) {
    TableReader reader(*t, key + ".");
    fn(reader);
    reader.finish();
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& toml_text, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(toml_text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(source + ": " + std::string(e.description()));
  }
  ExperimentConfig cfg;
  TableReader top(root, "");
  top.get("seed", cfg.seed);
  with_table(top, "experiment", [&](TableReader& r) {
    r.get_list("sizes", cfg.sizes);
    r.get_list("probs", cfg.probs);
    r.get("topologies_per_cell", cfg.topologies_per_cell);
    r.get("seeds_per_network", cfg.seeds_per_network);
  });
  with_table(top, "simulation", [&](TableReader& r) {
    r.get("steps", cfg.steps);
    r.get("input_mean", cfg.simulation.input_mean);
    r.get("input_var", cfg.simulation.input_var);
    r.get("strength", cfg.simulation.strength);
  });
  with_table(top, "data", [&](TableReader& r) {
    r.get("history", cfg.history);
    r.get("horizon", cfg.horizon);
    r.get("clip_threshold", cfg.clip_threshold);
    std::string scope = to_string(cfg.scope);
    r.get("scope", scope);
    cfg.scope = normalization_scope_from_string(scope);
  });
  with_table(top, "model", [&](TableReader& r) {
    r.get("d_model", cfg.model.d_model);
    r.get("heads", cfg.model.heads);
    r.get("head_dim", cfg.model.head_dim);
    r.get("d_ff", cfg.model.d_ff);
    r.get("encoder_layers", cfg.model.encoder_layers);
    r.get("decoder_layers", cfg.model.decoder_layers);
    std::string comp = to_string(cfg.model.composition);
    r.get("composition", comp);
    cfg.model.composition = token_composition_from_string(comp);
    r.get("position_embedding", cfg.model.position_embedding);
  });
  with_table(top, "train", [&](TableReader& r) {
    r.get("batch_size", cfg.train.batch_size);
    r.get("lr", cfg.train.lr);
    r.get("lr_decay", cfg.train.lr_decay);
    r.get("lr_patience", cfg.train.lr_patience);
    r.get("weight_decay", cfg.train.weight_decay);
    r.get("max_epochs", cfg.train.max_epochs);
    r.get("early_stop_patience", cfg.train.early_stop_patience);
    r.get("dropout", cfg.train.dropout);
    r.get("eval_batch_size", cfg.train.eval_batch_size);
  });
  with_table(top, "baseline", [&](TableReader& r) {
    r.get("max_p", cfg.baseline.max_p);
    std::string input = cfg.baseline.normalized ? "normalized" : "raw";
    r.get("input", input);
    if (input != "normalized" && input != "raw") throw ConfigError("baseline.input must be 'normalized' or 'raw'");
    cfg.baseline.normalized = input == "normalized";
    std::string segment = cfg.baseline.train_only ? "train" : "full";
    r.get("segment", segment);
    if (segment != "full" && segment != "train") throw ConfigError("baseline.segment must be 'full' or 'train'");
    cfg.baseline.train_only = segment == "train";
  });
  top.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, path.string());
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["experiment"] = {{"sizes", c.sizes},
                     {"probs", c.probs},
                     {"topologies_per_cell", c.topologies_per_cell},
                     {"seeds_per_network", c.seeds_per_network}};
  j["simulation"] = {{"steps", c.steps},
                     {"input_mean", c.simulation.input_mean},
                     {"input_var", c.simulation.input_var},
                     {"strength", c.simulation.strength}};
  j["data"] = {{"history", c.history},
               {"horizon", c.horizon},
               {"clip_threshold", c.clip_threshold},
               {"scope", to_string(c.scope)}};
  j["model"] = {{"d_model", c.model.d_model},
                {"heads", c.model.heads},
                {"head_dim", c.model.head_dim},
                {"d_ff", c.model.d_ff},
                {"encoder_layers", c.model.encoder_layers},
                {"decoder_layers", c.model.decoder_layers},
                {"composition", to_string(c.model.composition)},
                {"position_embedding", c.model.position_embedding}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"lr_decay", c.train.lr_decay},
                {"lr_patience", c.train.lr_patience},
                {"weight_decay", c.train.weight_decay},
                {"max_epochs", c.train.max_epochs},
                {"early_stop_patience", c.train.early_stop_patience},
                {"dropout", c.train.dropout},
                {"eval_batch_size", c.train.eval_batch_size}};
  j["baseline"] = {{"max_p", c.baseline.max_p},
                   {"input", c.baseline.normalized ? "normalized" : "raw"},
                   {"segment", c.baseline.train_only ? "train" : "full"}};
  return j;
}

std::string content_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return content_hash(to_json(cfg)); }

ModelConfig model_config(const ExperimentConfig& cfg, Index neurons) {
  ModelConfig m;
  m.neurons = neurons;
  m.history = cfg.history;
  m.horizon = cfg.horizon;
  m.d_model = cfg.model.d_model;
  m.heads = cfg.model.heads;
  m.head_dim = cfg.model.head_dim;
  m.d_ff = cfg.model.d_ff;
  m.encoder_layers = cfg.model.encoder_layers;
  m.decoder_layers = cfg.model.decoder_layers;
  m.embedding_dropout = cfg.train.dropout;
  m.ff_dropout = cfg.train.dropout;
  m.composition = cfg.model.composition;
  m.position_embedding = cfg.model.position_embedding;
  m.time_scale = 1.0 / static_cast<double>(cfg.steps);
  return m;
}

std::uint64_t topology_seed(const ExperimentConfig& cfg, Index n, double p, Index topology) {
  const auto p_tag = static_cast<std::uint64_t>(std::llround(p * 1e6));
  return derive_seed(derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(n)), p_tag),
                     static_cast<std::uint64_t>(topology));
}

std::uint64_t model_seed(std::uint64_t topo_seed, Index replicate) {
  return derive_seed(topo_seed, 0x1000 + static_cast<std::uint64_t>(replicate));
}

// ---------------------------------------------------------------- stages

NetworkData simulate_network(const ExperimentConfig& cfg, Index n, double p, std::uint64_t seed) {
  Rng rng(seed);
  NetworkData net;
  net.topology = generate_topology(n, p, rng);
  net.trace = simulate(net.topology, cfg.steps, cfg.simulation, rng);
  return net;
}

WindowedDataset make_dataset(const ExperimentConfig& cfg, const Matrix& raw) {
  const auto splits = split_indices(raw.rows(), cfg.history, cfg.horizon);
  return WindowedDataset(normalize(raw, splits.train, cfg.clip_threshold, cfg.scope), splits, cfg.history,
                         cfg.horizon);
}

Matrix baseline_series(const ExperimentConfig& cfg, const Matrix& raw, const WindowedDataset& data) {
  const Matrix& source = cfg.baseline.normalized ? data.series().x : raw;
  if (!cfg.baseline.train_only) return source;
  const auto& r = data.splits().train;
  return source.middleRows(r.begin, r.size());
}

void write_network(const NetworkData& net, const fs::path& dir) {
  write_json(dir / "topology.json", to_json(net.topology));
  write_trace_csv(net.trace.v, dir / "trace.csv");
  write_json(dir / "trace.meta.json", trace_meta_json(net.trace));
}

TestPass checkpoint_test_pass(const fs::path& manifest, const WindowedDataset& data, Index batch_size) {
  Causalformer model = load_checkpoint(manifest);
  return run_test_pass(model, data, batch_size, true);
}

SeedOutcome train_seed(const ExperimentConfig& cfg, const WindowedDataset& data, Index replicate,
                       std::uint64_t seed, const fs::path& dir, const EpochCallback& on_epoch) {
  Causalformer model(model_config(cfg, data.neurons()), seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  SeedOutcome out;
  out.replicate = replicate;
  out.seed = seed;
  out.report = train(model, data, tc, on_epoch);
  save_checkpoint(model, dir / "model.json", dir / "model.bin");
  write_json(dir / "train_report.json", to_json(out.report));
  const auto pass = checkpoint_test_pass(dir / "model.json", data, tc.eval_batch_size);
  out.r2 = r2_score(pass.truth, pass.predicted).mean;
  out.attention = pass.attention_sampavg;
  return out;
}

// ---------------------------------------------------------------- records

Json to_json(const ResultRecord& r) {
  auto scores = [](const MethodScores& m) {
    return Json{{"auroc", m.include_diagonal}, {"auroc_offdiagonal", m.exclude_diagonal}};
  };
  Json j;
  j["n"] = r.n;
  j["p"] = r.p;
  j["topology"] = r.topology;
  j["topology_seed"] = r.topology_seed;
  j["causalformer"] = scores(r.causalformer);
  j["mvgc_aic"] = scores(r.mvgc_aic);
  j["mvgc_aic"]["order"] = r.aic_order;
  j["mvgc_bic"] = scores(r.mvgc_bic);
  j["mvgc_bic"]["order"] = r.bic_order;
  j["r2_mean"] = r.r2_mean;
  j["r2_per_seed"] = r.r2_per_seed;
  j["config_hash"] = r.config_hash;
  j["errors"] = r.errors;
  return j;
}

ResultRecord record_from_json(const Json& j) {
  try {
    ResultRecord r;
    auto scores = [](const Json& m) {
      return MethodScores{m.at("auroc").get<double>(), m.at("auroc_offdiagonal").get<double>()};
    };
    r.n = j.at("n").get<Index>();
    r.p = j.at("p").get<double>();
    r.topology = j.at("topology").get<Index>();
    r.topology_seed = j.at("topology_seed").get<std::uint64_t>();
    r.causalformer = scores(j.at("causalformer"));
    r.mvgc_aic = scores(j.at("mvgc_aic"));
    r.mvgc_bic = scores(j.at("mvgc_bic"));
    r.aic_order = j.at("mvgc_aic").at("order").get<Index>();
    r.bic_order = j.at("mvgc_bic").at("order").get<Index>();
    r.r2_mean = j.at("r2_mean").get<double>();
    r.r2_per_seed = j.at("r2_per_seed").get<std::vector<double>>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.errors = j.at("errors").get<std::vector<std::string>>();
    return r;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed result record: ") + e.what());
  }
}

Json results_json(const ExperimentConfig& cfg, const std::vector<ResultRecord>& records) {
  Json j;
  j["schema"] = 1;
  j["config_hash"] = config_hash(cfg);
  j["config"] = to_json(cfg);
  Json recs = Json::array();
  for (const auto& r : records) recs.push_back(to_json(r));
  j["records"] = std::move(recs);
  return j;
}

// ---------------------------------------------------------------- sweep

namespace {

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw IoError("output directory is locked by another run (" + path.string() +
                    "); delete the file if no run is active");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd_, pid.data(), pid.size());
  }
  ~DirectoryLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

/// Runs fn(0..count-1) on up to `threads` workers; indices are claimed in order.
template <typename Fn>
void parallel_for(Index count, Index threads, Fn&& fn) {
  const Index workers = std::max<Index>(1, std::min(threads, count));
  if (workers == 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::jthread> pool;
  for (Index w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (Index i = next++; i < count; i = next++) fn(i);
    });
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format_p(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p);
  return buf;
}

/// A stage is complete when its marker exists and carries the expected hash.
bool stage_done(const fs::path& marker, const std::string& hash) {
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker).value("hash", std::string()) == hash;
  } catch (const IoError&) {
    return false;
  }
}

struct TopologyJob {
  Index n = 0;
  double p = 0.0;
  Index topology = 0;
  std::uint64_t seed = 0;
  fs::path dir;
  std::string network_hash;
  std::string seed_hash_base;
  std::string mvgc_hash;

  NetworkTopology topology_data;
  Matrix raw;
  std::optional<WindowedDataset> data;
  double seconds = 0.0;

  std::mutex mutex;
  std::vector<std::string> errors;
  std::vector<double> r2;
  std::vector<Matrix> attention;
  std::vector<bool> seed_ok;
  ResultRecord record;

  void fail(const std::string& what) {
    std::lock_guard lock(mutex);
    errors.push_back(what);
  }
  void add_seconds(double s) {
    std::lock_guard lock(mutex);
    seconds += s;
  }
};

MethodScores score(const Matrix& scores, const Eigen::MatrixXi& truth) {
  return {auroc(scores, truth, true).auroc, auroc(scores, truth, false).auroc};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& opts) {
  cfg.validate();
  if (opts.out.empty()) throw ConfigError("experiment needs an output directory");
  if (opts.threads < 1) throw ConfigError("threads must be >= 1");
  fs::create_directories(opts.out);
  DirectoryLock lock(opts.out / "experiment.lock");
  const auto sweep_start = std::chrono::steady_clock::now();
  std::mutex log_mutex;
  auto log = [&](const std::string& line) {
    if (!opts.log) return;
    std::lock_guard guard(log_mutex);
    opts.log(line);
  };

  const std::string cfg_hash = config_hash(cfg);
  const Json cfg_json = to_json(cfg);
  std::vector<std::unique_ptr<TopologyJob>> jobs;
  for (Index n : cfg.sizes) {
    for (double p : cfg.probs) {
      for (Index t = 0; t < cfg.topologies_per_cell; ++t) {
        auto job = std::make_unique<TopologyJob>();
        job->n = n;
        job->p = p;
        job->topology = t;
        job->seed = topology_seed(cfg, n, p, t);
        char name[64];
        std::snprintf(name, sizeof name, "topology_%03lld", static_cast<long long>(t));
        job->dir = opts.out / "cells" / ("n" + std::to_string(n) + "_p" + format_p(p)) / name;
        const Json net{{"seed", job->seed}, {"n", n}, {"p", p}, {"simulation", cfg_json["simulation"]}};
        job->network_hash = content_hash(net);
        const Json data{{"network", job->network_hash}, {"data", cfg_json["data"]}};
        const std::string data_hash = content_hash(data);
        job->seed_hash_base = content_hash(Json{{"data", data_hash}, {"model", cfg_json["model"]},
                                                {"train", cfg_json["train"]}});
        job->mvgc_hash = content_hash(Json{{"data", data_hash}, {"baseline", cfg_json["baseline"]}});
        jobs.push_back(std::move(job));
      }
    }
  }

  // Stage 1: networks.
  parallel_for(static_cast<Index>(jobs.size()), opts.threads, [&](Index k) {
    auto& job = *jobs[static_cast<std::size_t>(k)];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const fs::path marker = job.dir / "network.done.json";
      if (stage_done(marker, job.network_hash)) {
        job.topology_data = topology_from_json(read_json(job.dir / "topology.json"));
        job.raw = read_trace_csv(job.dir / "trace.csv");
      } else {
        auto net = simulate_network(cfg, job.n, job.p, job.seed);
        write_network(net, job.dir);
        job.topology_data = std::move(net.topology);
        job.raw = std::move(net.trace.v);
        write_json(marker, Json{{"hash", job.network_hash}, {"seconds", seconds_since(t0)}});
        log("simulated " + job.dir.string());
      }
      job.data.emplace(make_dataset(cfg, job.raw));
      write_json(job.dir / "dataset.json", dataset_manifest(*job.data, "trace.csv"));
    } catch (const std::exception& e) {
      job.fail(std::string("network: ") + e.what());
    }
    job.add_seconds(seconds_since(t0));
  });

  // Stage 2: one task per trained model plus one baseline task per network.
  struct Task {
    TopologyJob* job;
    Index replicate;  // -1 for the baseline
  };
  std::vector<Task> tasks;
  for (auto& job : jobs) {
    job->r2.assign(static_cast<std::size_t>(cfg.seeds_per_network), 0.0);
    job->attention.assign(static_cast<std::size_t>(cfg.seeds_per_network), Matrix());
    job->seed_ok.assign(static_cast<std::size_t>(cfg.seeds_per_network), false);
    if (!job->data) continue;
    for (Index r = 0; r < cfg.seeds_per_network; ++r) tasks.push_back({job.get(), r});
    tasks.push_back({job.get(), -1});
  }

  parallel_for(static_cast<Index>(tasks.size()), opts.threads, [&](Index k) {
    auto& task = tasks[static_cast<std::size_t>(k)];
    auto& job = *task.job;
    const auto t0 = std::chrono::steady_clock::now();
    if (task.replicate < 0) {
      const fs::path marker = job.dir / "mvgc.done.json";
      try {
        if (!stage_done(marker, job.mvgc_hash)) {
          const Matrix series = baseline_series(cfg, job.raw, *job.data);
          Json done{{"hash", job.mvgc_hash}};
          for (auto criterion : {InformationCriterion::AIC, InformationCriterion::BIC}) {
            const auto sel = select_order(series, cfg.baseline.max_p, criterion);
            const auto gc = pairwise_conditional_gc(series, sel.order);
            Json est = to_json(gc.estimate());
            est["order"] = sel.order;
            est["criterion"] = to_string(criterion);
            est["missing"] = gc.errors;
            write_json(job.dir / ("mvgc_" + to_string(criterion) + ".json"), est);
          }
          done["seconds"] = seconds_since(t0);
          write_json(marker, done);
          log("baseline " + job.dir.string());
        }
      } catch (const std::exception& e) {
        job.fail(std::string("baseline: ") + e.what());
      }
    } else {
      const auto r = static_cast<std::size_t>(task.replicate);
      char name[32];
      std::snprintf(name, sizeof name, "seed_%03lld", static_cast<long long>(task.replicate));
      const fs::path dir = job.dir / name;
      const std::uint64_t seed = model_seed(job.seed, task.replicate);
      const std::string hash = content_hash(Json{{"base", job.seed_hash_base}, {"seed", seed}});
      const fs::path marker = dir / "seed.done.json";
      try {
        if (stage_done(marker, hash)) {
          const Json done = read_json(marker);
          job.r2[r] = done.at("r2").get<double>();
          job.attention[r] = estimate_from_json(read_json(dir / "attention.json")).scores;
        } else {
          auto outcome = train_seed(cfg, *job.data, task.replicate, seed, dir);
          CausalEstimate est;
          est.scores = outcome.attention;
          write_json(dir / "attention.json", to_json(est));
          write_json(marker, Json{{"hash", hash},
                                  {"seed", seed},
                                  {"r2", outcome.r2},
                                  {"best_epoch", outcome.report.best_epoch},
                                  {"stopped_epoch", outcome.report.stopped_epoch},
                                  {"seconds", outcome.report.wall_seconds}});
          job.r2[r] = outcome.r2;
          job.attention[r] = std::move(outcome.attention);
          char line[256];
          std::snprintf(line, sizeof line, "trained %s (epochs %lld, R2 %.4f)", dir.string().c_str(),
                        static_cast<long long>(outcome.report.stopped_epoch), outcome.r2);
          log(line);
        }
        job.seed_ok[r] = true;
      } catch (const std::exception& e) {
        job.fail("seed " + std::to_string(task.replicate) + ": " + e.what());
      }
    }
    job.add_seconds(seconds_since(t0));
  });

  // Stage 3: per-network estimates and scores, in sweep order.
  ExperimentResult result;
  Json timings{{"records", Json::array()}};
  for (auto& job_ptr : jobs) {
    auto& job = *job_ptr;
    ResultRecord rec;
    rec.n = job.n;
    rec.p = job.p;
    rec.topology = job.topology;
    rec.topology_seed = job.seed;
    rec.config_hash = cfg_hash;
    rec.errors = job.errors;
    std::sort(rec.errors.begin(), rec.errors.end());
    if (job.data) {
      try {
        const bool seeds_ok = std::all_of(job.seed_ok.begin(), job.seed_ok.end(), [](bool b) { return b; });
        if (seeds_ok) {
          const auto estimate = average_models(job.attention);
          write_json(job.dir / "estimate.json", to_json(estimate));
          rec.causalformer = score(estimate.scores, job.topology_data.adjacency);
          rec.r2_per_seed = job.r2;
          double sum = 0.0;
          for (double v : job.r2) sum += v;
          rec.r2_mean = sum / static_cast<double>(job.r2.size());
        }
        const fs::path aic = job.dir / "mvgc_aic.json";
        const fs::path bic = job.dir / "mvgc_bic.json";
        if (stage_done(job.dir / "mvgc.done.json", job.mvgc_hash)) {
          const Json a = read_json(aic);
          const Json b = read_json(bic);
          rec.aic_order = a.at("order").get<Index>();
          rec.bic_order = b.at("order").get<Index>();
          rec.mvgc_aic = score(estimate_from_json(a).scores, job.topology_data.adjacency);
          rec.mvgc_bic = score(estimate_from_json(b).scores, job.topology_data.adjacency);
        }
      } catch (const std::exception& e) {
        rec.errors.push_back(std::string("scoring: ") + e.what());
      }
    }
    write_json(job.dir / "record.json", to_json(rec));
    timings["records"].push_back(
        {{"n", rec.n}, {"p", rec.p}, {"topology", rec.topology}, {"seconds", job.seconds}});
    result.all_ok = result.all_ok && rec.ok();
    result.records.push_back(std::move(rec));
  }
  write_json(opts.out / "results.json", results_json(cfg, result.records));
  timings["total_seconds"] = seconds_since(sweep_start);
  timings["threads"] = opts.threads;
  write_json(opts.out / "timings.json", timings);
  return result;
}

// ---------------------------------------------------------------- plots

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty sample");
  if (!(q >= 0 && q <= 1)) throw ConfigError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

const std::array<const char*, 3> kMethods{"mvgc_aic", "mvgc_bic", "causalformer"};
const std::array<const char*, 3> kLabels{"MVGC (AIC)", "MVGC (BIC)", "Causalformer"};
const std::array<const char*, 3> kColors{"#4c72b0", "#55a868", "#c44e52"};

double method_auroc(const ResultRecord& r, std::size_t m) {
  switch (m) {
    case 0:
      return r.mvgc_aic.include_diagonal;
    case 1:
      return r.mvgc_bic.include_diagonal;
    default:
      return r.causalformer.include_diagonal;
  }
}

using CellKey = std::pair<Index, double>;

std::map<CellKey, std::vector<const ResultRecord*>> by_cell(const std::vector<ResultRecord>& records) {
  std::map<CellKey, std::vector<const ResultRecord*>> cells;
  for (const auto& r : records) {
    if (r.ok()) cells[{r.n, r.p}].push_back(&r);
  }
  return cells;
}

std::string svg_cell(Index n, double p, const std::vector<PlotSummary>& stats,
                     const std::vector<std::vector<double>>& samples) {
  const double width = 420, height = 320, left = 50, top = 40, plot_h = 240, slot = 120;
  auto y = [&](double v) { return top + (1.0 - v) * plot_h; };
  std::string s;
  auto f = [](double v) { return format_double(std::round(v * 100.0) / 100.0); };
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(width) + "\" height=\"" + f(height) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + f(width / 2) + "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">N=" +
       std::to_string(n) + ", p=" + format_p(p) + "</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick * 0.25;
    s += "<line x1=\"" + f(left) + "\" x2=\"" + f(width - 10) + "\" y1=\"" + f(y(v)) + "\" y2=\"" + f(y(v)) +
         "\" stroke=\"#dddddd\"/>\n";
    s += "<text x=\"" + f(left - 6) + "\" y=\"" + f(y(v) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + format_double(v) + "</text>\n";
  }
  s += "<text x=\"14\" y=\"" + f(top + plot_h / 2) + "\" transform=\"rotate(-90 14 " + f(top + plot_h / 2) +
       ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">AUROC</text>\n";
  for (std::size_t m = 0; m < stats.size(); ++m) {
    const auto& st = stats[m];
    const auto& xs = samples[m];
    const double cx = left + slot * (static_cast<double>(m) + 0.5);
    // Violin outline from a Gaussian kernel density estimate.
    if (xs.size() >= 2) {
      double mean = 0.0;
      for (double v : xs) mean += v;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double v : xs) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(xs.size() - 1));
      const double bw = std::max(1.06 * sd * std::pow(static_cast<double>(xs.size()), -0.2), 0.01);
      const int steps = 40;
      std::vector<std::pair<double, double>> dens;
      double peak = 0.0;
      for (int k = 0; k <= steps; ++k) {
        const double v = st.min + (st.max - st.min) * k / steps;
        double d = 0.0;
        for (double x : xs) d += std::exp(-0.5 * (v - x) * (v - x) / (bw * bw));
        dens.emplace_back(v, d);
        peak = std::max(peak, d);
      }
      std::string path = "M";
      for (const auto& [v, d] : dens) path += " " + f(cx + 40.0 * d / peak) + "," + f(y(v));
      for (auto it = dens.rbegin(); it != dens.rend(); ++it) path += " " + f(cx - 40.0 * it->second / peak) + "," + f(y(it->first));
      path += " Z";
      s += "<path d=\"" + path + "\" fill=\"" + kColors[m] + "\" fill-opacity=\"0.5\" stroke=\"" + kColors[m] + "\"/>\n";
    }
    s += "<line x1=\"" + f(cx) + "\" x2=\"" + f(cx) + "\" y1=\"" + f(y(st.q25)) + "\" y2=\"" + f(y(st.q75)) +
         "\" stroke=\"black\" stroke-width=\"5\"/>\n";
    s += "<circle class=\"median\" data-method=\"" + std::string(kMethods[m]) + "\" data-median=\"" +
         format_double(st.median) + "\" cx=\"" + f(cx) + "\" cy=\"" + f(y(st.median)) +
         "\" r=\"4\" fill=\"white\" stroke=\"black\"/>\n";
    s += "<text x=\"" + f(cx) + "\" y=\"" + f(top + plot_h + 20) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + kLabels[m] + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

std::vector<PlotSummary> summarize(const std::vector<ResultRecord>& records) {
  std::vector<PlotSummary> out;
  for (const auto& [key, recs] : by_cell(records)) {
    for (std::size_t m = 0; m < kMethods.size(); ++m) {
      std::vector<double> xs;
      for (const auto* r : recs) xs.push_back(method_auroc(*r, m));
      PlotSummary s;
      s.n = key.first;
      s.p = key.second;
      s.method = kMethods[m];
      s.count = static_cast<Index>(xs.size());
      s.min = quantile(xs, 0.0);
      s.q25 = quantile(xs, 0.25);
      s.median = quantile(xs, 0.5);
      s.q75 = quantile(xs, 0.75);
      s.max = quantile(xs, 1.0);
      out.push_back(s);
    }
  }
  return out;
}

std::vector<fs::path> emit_plot_data(const std::vector<ResultRecord>& records, const fs::path& dir) {
  const auto cells = by_cell(records);
  if (cells.empty()) throw ConfigError("no successful result records to plot");
  std::string long_csv = "N,p,method,topology,auroc,auroc_offdiagonal\n";
  for (const auto& [key, recs] : cells) {
    for (const auto* r : recs) {
      const std::array<const MethodScores*, 3> ms{&r->mvgc_aic, &r->mvgc_bic, &r->causalformer};
      for (std::size_t m = 0; m < kMethods.size(); ++m) {
        long_csv += std::to_string(r->n) + "," + format_p(r->p) + "," + kMethods[m] + "," +
                    std::to_string(r->topology) + "," + format_double(ms[m]->include_diagonal) + "," +
                    format_double(ms[m]->exclude_diagonal) + "\n";
      }
    }
  }
  write_text_atomic(dir / "auroc_long.csv", long_csv);

  const auto stats = summarize(records);
  std::string summary = "N,p,method,count,min,q25,median,q75,max\n";
  for (const auto& s : stats) {
    summary += std::to_string(s.n) + "," + format_p(s.p) + "," + s.method + "," + std::to_string(s.count) + "," +
               format_double(s.min) + "," + format_double(s.q25) + "," + format_double(s.median) + "," +
               format_double(s.q75) + "," + format_double(s.max) + "\n";
  }
  write_text_atomic(dir / "auroc_summary.csv", summary);

  std::vector<fs::path> svgs;
  std::size_t offset = 0;
  for (const auto& [key, recs] : cells) {
    std::vector<PlotSummary> cell_stats(stats.begin() + static_cast<std::ptrdiff_t>(offset),
                                        stats.begin() + static_cast<std::ptrdiff_t>(offset + kMethods.size()));
    offset += kMethods.size();
    std::vector<std::vector<double>> samples(kMethods.size());
    for (std::size_t m = 0; m < kMethods.size(); ++m) {
      for (const auto* r : recs) samples[m].push_back(method_auroc(*r, m));
    }
    const fs::path path = dir / ("auroc_n" + std::to_string(key.first) + "_p" + format_p(key.second) + ".svg");
    write_text_atomic(path, svg_cell(key.first, key.second, cell_stats, samples));
    svgs.push_back(path);
  }
  return svgs;
}

}  // namespace causalformer
