#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "causalformer/causal_extract.hpp"
#include "causalformer/dataset.hpp"
#include "causalformer/metrics.hpp"
#include "causalformer/model.hpp"
#include "causalformer/simulator.hpp"
#include "causalformer/trainer.hpp"

namespace causalformer {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

/// Write through a temporary file in the same directory, then rename.
void write_text_atomic(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& j);

Json to_json(const NetworkTopology& topology);
NetworkTopology topology_from_json(const Json& j);

/// Trace CSV with header t,v_0..v_{n-1}.
void write_trace_csv(const Matrix& v, const fs::path& path);
Matrix read_trace_csv(const fs::path& path);

/// Sidecar metadata {T, dt_ms, seed, strength, input_mean, input_var}.
Json trace_meta_json(const SimulationTrace& trace);

/// Dataset manifest {c, h, splits, mean, std, clip_threshold, scope, source}.
Json dataset_manifest(const WindowedDataset& data, const std::string& source);

std::string to_string(NormalizationScope s);
NormalizationScope normalization_scope_from_string(const std::string& s);

Json to_json(const CausalEstimate& estimate);
CausalEstimate estimate_from_json(const Json& j);

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const TrainReport& report);

/// Two-column CSV: fpr,tpr.
void write_roc_csv(const RocResult& roc, const fs::path& path);

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& rows);

}  // namespace causalformer
