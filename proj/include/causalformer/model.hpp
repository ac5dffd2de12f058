#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "causalformer/dataset.hpp"
#include "causalformer/kernel.hpp"

namespace causalformer {

/// How the value/time projection and the neuron-identity embedding combine.
enum class TokenComposition { Sum, Concat };

struct ModelConfig {
  Index neurons = 5;
  Index history = 10;  // c; a window holds c+1 history steps
  Index horizon = 1;   // h
  Index d_model = 100;
  Index heads = 10;
  Index head_dim = 8;
  Index d_ff = 400;
  Index encoder_layers = 1;
  Index decoder_layers = 1;
  double embedding_dropout = 0.1;
  double ff_dropout = 0.1;
  TokenComposition composition = TokenComposition::Sum;
  /// Step indices are multiplied by this before the time embedding (1/T).
  double time_scale = 1.0 / 5000.0;
  /// Adds a learned embedding of each token's position within its window.
  bool position_embedding = false;

  Index history_tokens() const { return neurons * (history + 1); }
  Index target_tokens() const { return neurons * horizon; }
  void validate() const;
};

/**
 * Token inputs for a batch of windows. Within each sample tokens are
 * neuron-major: all steps of neuron 0 in ascending time, then neuron 1, ...
 */
struct ModelInput {
  Index batch = 0;
  Matrix history_values;  // (batch * n * (c+1)) x 1
  Matrix history_times;   // same shape, already scaled
  Matrix target_values;   // (batch * n * h) x 1, zero-filled
  Matrix target_times;
  std::vector<Index> history_ids;
  std::vector<Index> target_ids;
  std::vector<Index> history_positions;  // 0..c
  std::vector<Index> target_positions;   // c+1..c+h
};

ModelInput make_input(const WindowedDataset& data, std::span<const Window> windows, const ModelConfig& cfg);

/// Targets aligned with the prediction rows: (batch * n * h) x 1.
Matrix make_targets(const WindowedDataset& data, std::span<const Window> windows);

/// Same-neuron admissibility for neuron-major layouts; block diagonal.
Mask local_mask(Index n, Index len_q, Index len_k, Index per_neuron_q, Index per_neuron_k);

/// Decoder global cross-attention weights of one sample: one (n h) x (n (c+1)) matrix per head.
struct AttentionRecord {
  std::vector<Matrix> global_cross;
};

enum class Mode { Train, Eval };

struct ForwardResult {
  Tensor predictions;    // (batch * n * h) x 1
  Tensor history_repr;   // encoder output, (batch * n * (c+1)) x d_model
  Tensor pre_global;     // decoder target tokens entering the global sublayer (last layer)
  std::vector<AttentionRecord> attention;  // per sample, filled when recording
};

/**
 * Encoder-decoder forecaster with information-separating attention.
 *
 * Encoder layers use self-attention restricted to each neuron's own history.
 * Decoder layers apply same-neuron cross-attention, then unrestricted
 * cross-attention over all history tokens (the recorded one), then the
 * position-wise feed-forward net. Sublayers are pre-norm residual blocks.
 */
class Causalformer {
 public:
  Causalformer(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }

  /// token = [value | time_embed(t)] W + b + identity[neuron]; concat mode projects [value | time | identity].
  /// With position_embedding the row of each token's window position is added as well.
  Tensor embed(Tape& tape, const Matrix& values, const Matrix& times, const std::vector<Index>& neuron_ids,
               const std::vector<Index>& positions, Mode mode, Rng* rng);

  /**
   * Projected multi-head attention. `groups` = n restricts every neuron's
   * queries to its own keys (same result as local_mask, without scoring the
   * masked pairs); `groups` = 1 with no mask is global attention.
   */
  Tensor multihead_attention(Tape& tape, const std::string& prefix, const Tensor& queries, const Tensor& keys,
                             Index batch, Index groups, const Mask* mask, std::vector<Matrix>* weights);

  Tensor encoder_forward(Tape& tape, const Tensor& history_tokens, Index batch, Mode mode, Rng* rng);

  struct DecoderResult {
    Tensor predictions;
    Tensor pre_global;
  };
  DecoderResult decoder_forward(Tape& tape, const Tensor& target_tokens, const Tensor& history_repr, Index batch,
                                Mode mode, Rng* rng, std::vector<AttentionRecord>* record);

  /// Full pass. `rng` drives dropout and is required in Train mode.
  ForwardResult forward(Tape& tape, const ModelInput& input, Mode mode, Rng* rng = nullptr,
                        bool record_attention = false);

 private:
  Tensor param(Tape& tape, const std::string& name) { return tape.parameter(params_, name); }
  Tensor norm(Tape& tape, const std::string& prefix, const Tensor& x);
  Tensor feed_forward(Tape& tape, const std::string& prefix, const Tensor& x, Mode mode, Rng* rng);

  void add_linear(const std::string& prefix, Index in, Index out, Rng& rng);
  void add_norm(const std::string& prefix, Index d);
  void add_attention(const std::string& prefix, Rng& rng);
  void add_ffn(const std::string& prefix, Rng& rng);

  ModelConfig cfg_;
  std::uint64_t seed_;
  ParamStore params_;
};

/// Round every parameter through 32-bit float, matching what a checkpoint stores.
void quantize_to_float32(ParamStore& store);

/// JSON manifest (names, shapes, offsets, hyperparameters, seed) + raw little-endian float32 blob.
void save_checkpoint(const Causalformer& model, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& blob_path);
Causalformer load_checkpoint(const std::filesystem::path& manifest_path);

std::string to_string(TokenComposition c);
TokenComposition token_composition_from_string(const std::string& s);

}  // namespace causalformer
