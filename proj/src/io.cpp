#include "causalformer/io.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

#include "causalformer/errors.hpp"

namespace causalformer {

std::string format_double(double x) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), res.ptr);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& rows) {
  if (!rows.is_array()) throw IoError("matrix must be an array of rows");
  const auto r = static_cast<Index>(rows.size());
  const Index c = r > 0 ? static_cast<Index>(rows[0].size()) : 0;
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != c) throw IoError("matrix rows differ in length");
    for (Index k = 0; k < c; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

Json to_json(const NetworkTopology& t) {
  Json j;
  j["n"] = t.n;
  j["p"] = t.p;
  j["seed"] = t.seed;
  j["excitatory"] = t.excitatory;
  Json adj = Json::array();
  for (Index r = 0; r < t.n; ++r) {
    Json row = Json::array();
    for (Index c = 0; c < t.n; ++c) row.push_back(t.adjacency(r, c));
    adj.push_back(std::move(row));
  }
  j["adjacency"] = std::move(adj);
  Json params = Json::array();
  for (const auto& np : t.neurons) {
    params.push_back({{"a", np.a}, {"b", np.b}, {"c_reset", np.c_reset}, {"d", np.d}, {"theta", np.theta}});
  }
  j["neuron_params"] = std::move(params);
  return j;
}

NetworkTopology topology_from_json(const Json& j) {
  try {
    NetworkTopology t;
    t.n = j.at("n").get<Index>();
    t.p = j.at("p").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.excitatory = j.at("excitatory").get<std::vector<bool>>();
    const auto& adj = j.at("adjacency");
    t.adjacency.resize(t.n, t.n);
    if (static_cast<Index>(adj.size()) != t.n) throw IoError("adjacency has wrong row count");
    for (Index r = 0; r < t.n; ++r) {
      const auto& row = adj[static_cast<std::size_t>(r)];
      if (static_cast<Index>(row.size()) != t.n) throw IoError("adjacency has wrong column count");
      for (Index c = 0; c < t.n; ++c) t.adjacency(r, c) = row[static_cast<std::size_t>(c)].get<int>();
    }
    for (const auto& np : j.at("neuron_params")) {
      t.neurons.push_back({np.at("a").get<double>(), np.at("b").get<double>(), np.at("c_reset").get<double>(),
                           np.at("d").get<double>(), np.at("theta").get<double>()});
    }
    if (static_cast<Index>(t.excitatory.size()) != t.n || static_cast<Index>(t.neurons.size()) != t.n) {
      throw IoError("topology per-neuron lists do not match n");
    }
    return t;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed topology: ") + e.what());
  }
}

void write_trace_csv(const Matrix& v, const fs::path& path) {
  std::string text = "t";
  for (Index i = 0; i < v.cols(); ++i) text += ",v_" + std::to_string(i);
  text += '\n';
  for (Index t = 0; t < v.rows(); ++t) {
    text += std::to_string(t);
    for (Index i = 0; i < v.cols(); ++i) {
      text += ',';
      text += format_double(v(t, i));
    }
    text += '\n';
  }
  write_text_atomic(path, text);
}

Matrix read_trace_csv(const fs::path& path) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("t", 0) != 0) throw IoError(path.string() + ": missing trace header");
  const auto n = static_cast<Index>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    const char* comma = std::find(p, end, ',');
    p = comma;
    for (Index i = 0; i < n; ++i) {
      if (p == end || *p != ',') throw IoError(path.string() + ": short row " + std::to_string(rows + 1));
      ++p;
      double x = 0.0;
      const auto res = std::from_chars(p, end, x);
      if (res.ec != std::errc()) throw IoError(path.string() + ": bad number in row " + std::to_string(rows + 1));
      values.push_back(x);
      p = res.ptr;
    }
    ++rows;
  }
  Matrix v(rows, n);
  std::copy(values.begin(), values.end(), v.data());
  return v;
}

Json trace_meta_json(const SimulationTrace& trace) {
  Json j;
  j["T"] = trace.steps();
  j["dt_ms"] = trace.dt_ms;
  j["seed"] = trace.seed;
  j["strength"] = trace.config.strength;
  j["input_mean"] = trace.config.input_mean;
  j["input_var"] = trace.config.input_var;
  return j;
}

std::string to_string(NormalizationScope s) { return s == NormalizationScope::PerNeuron ? "per_neuron" : "global"; }

NormalizationScope normalization_scope_from_string(const std::string& s) {
  if (s == "per_neuron") return NormalizationScope::PerNeuron;
  if (s == "global") return NormalizationScope::Global;
  throw ConfigError("unknown normalization scope '" + s + "'");
}

namespace {

Json range_json(const StepRange& r) { return Json::array({r.begin, r.end}); }

Json row_json(const RowVector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

}  // namespace

Json dataset_manifest(const WindowedDataset& data, const std::string& source) {
  const auto& s = data.series();
  Json j;
  j["c"] = data.history();
  j["h"] = data.horizon();
  j["T"] = data.steps();
  j["splits"] = {{"train", range_json(data.splits().train)},
                 {"val", range_json(data.splits().val)},
                 {"test", range_json(data.splits().test)}};
  j["windows"] = {{"train", data.train().size()}, {"val", data.val().size()}, {"test", data.test().size()}};
  j["clip_threshold"] = s.clip_threshold;
  j["scope"] = to_string(s.scope);
  j["stats_range"] = range_json(s.stats_range);
  j["mean"] = row_json(s.mean);
  j["std"] = row_json(s.stddev);
  j["source"] = source;
  return j;
}

Json to_json(const CausalEstimate& e) {
  Json j;
  j["n"] = e.n();
  Json flat = Json::array();
  for (Index r = 0; r < e.scores.rows(); ++r) {
    for (Index c = 0; c < e.scores.cols(); ++c) flat.push_back(e.scores(r, c));
  }
  j["scores"] = std::move(flat);
  j["provenance"] = to_string(e.provenance);
  j["diagonal_zeroed"] = e.diagonal_zeroed;
  return j;
}

CausalEstimate estimate_from_json(const Json& j) {
  try {
    CausalEstimate e;
    const auto n = j.at("n").get<Index>();
    const auto& flat = j.at("scores");
    if (static_cast<Index>(flat.size()) != n * n) throw IoError("estimate scores length is not n*n");
    e.scores.resize(n, n);
    for (Index k = 0; k < n * n; ++k) e.scores.data()[k] = flat[static_cast<std::size_t>(k)].get<double>();
    e.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    e.diagonal_zeroed = j.at("diagonal_zeroed").get<bool>();
    return e;
  } catch (const Json::exception& ex) {
    throw IoError(std::string("malformed causal estimate: ") + ex.what());
  }
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["neurons"] = c.neurons;
  j["history"] = c.history;
  j["horizon"] = c.horizon;
  j["d_model"] = c.d_model;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["d_ff"] = c.d_ff;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["embedding_dropout"] = c.embedding_dropout;
  j["ff_dropout"] = c.ff_dropout;
  j["composition"] = to_string(c.composition);
  j["time_scale"] = c.time_scale;
  j["position_embedding"] = c.position_embedding;
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  try {
    ModelConfig c;
    c.neurons = j.at("neurons").get<Index>();
    c.history = j.at("history").get<Index>();
    c.horizon = j.at("horizon").get<Index>();
    c.d_model = j.at("d_model").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.head_dim = j.at("head_dim").get<Index>();
    c.d_ff = j.at("d_ff").get<Index>();
    c.encoder_layers = j.at("encoder_layers").get<Index>();
    c.decoder_layers = j.at("decoder_layers").get<Index>();
    c.embedding_dropout = j.at("embedding_dropout").get<double>();
    c.ff_dropout = j.at("ff_dropout").get<double>();
    c.composition = token_composition_from_string(j.at("composition").get<std::string>());
    c.time_scale = j.at("time_scale").get<double>();
    c.position_embedding = j.value("position_embedding", false);
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed model configuration: ") + e.what());
  }
}

Json to_json(const TrainReport& r) {
  Json j;
  Json epochs = Json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
  }
  j["epochs"] = std::move(epochs);
  j["stopped_epoch"] = r.stopped_epoch;
  j["best_epoch"] = r.best_epoch;
  j["best_val_loss"] = r.best_val_loss;
  j["lr_rule"] = r.lr_rule;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

void write_roc_csv(const RocResult& roc, const fs::path& path) {
  std::string text = "fpr,tpr\n";
  for (const auto& pt : roc.curve) text += format_double(pt.fpr) + "," + format_double(pt.tpr) + "\n";
  write_text_atomic(path, text);
}

// Checkpoints: parameters in store order (lexicographic names), each value
// rounded to float32 and stored little-endian.

namespace {

std::uint32_t to_little_endian(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
  }
  return x;
}

}  // namespace

void save_checkpoint(const Causalformer& model, const fs::path& manifest_path, const fs::path& blob_path) {
  Json params = Json::array();
  std::string blob;
  Index offset = 0;
  for (const auto& [name, p] : model.params()) {
    params.push_back({{"name", name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", offset}});
    for (Index k = 0; k < p.value.size(); ++k) {
      const auto bits = to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(p.value.data()[k])));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      blob.append(bytes, 4);
    }
    offset += p.value.size();
  }
  Json j;
  j["format"] = "causalformer-checkpoint";
  j["version"] = 1;
  j["dtype"] = "float32-le";
  j["seed"] = model.seed();
  j["model"] = to_json(model.config());
  j["blob"] = blob_path.filename().string();
  j["scalar_count"] = offset;
  j["parameters"] = std::move(params);
  write_text_atomic(blob_path, blob);
  write_json(manifest_path, j);
}

Causalformer load_checkpoint(const fs::path& manifest_path) {
  const Json j = read_json(manifest_path);
  try {
    if (j.at("format").get<std::string>() != "causalformer-checkpoint" || j.at("version").get<int>() != 1) {
      throw IoError(manifest_path.string() + " is not a version 1 checkpoint manifest");
    }
    Causalformer model(model_config_from_json(j.at("model")), j.at("seed").get<std::uint64_t>());
    const std::string blob = read_text(manifest_path.parent_path() / j.at("blob").get<std::string>());
    auto& store = model.params();
    const auto& entries = j.at("parameters");
    if (entries.size() != store.size()) throw IoError("checkpoint parameter count does not match the model");
    for (const auto& e : entries) {
      const auto name = e.at("name").get<std::string>();
      if (!store.contains(name)) throw IoError("checkpoint parameter '" + name + "' is unknown to the model");
      auto& value = store.at(name).value;
      const auto shape = e.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2 || shape[0] != value.rows() || shape[1] != value.cols()) {
        throw IoError("checkpoint parameter '" + name + "' has the wrong shape");
      }
      const auto offset = e.at("offset").get<Index>();
      if (offset < 0 || static_cast<std::size_t>(offset + value.size()) * 4 > blob.size()) {
        throw IoError("checkpoint blob is too short for '" + name + "'");
      }
      for (Index k = 0; k < value.size(); ++k) {
        std::uint32_t bits;
        std::memcpy(&bits, blob.data() + (offset + k) * 4, 4);
        value.data()[k] = static_cast<double>(std::bit_cast<float>(to_little_endian(bits)));
      }
    }
    return model;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

}  // namespace causalformer
