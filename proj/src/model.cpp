#include "causalformer/model.hpp"

#include <cmath>

#include "causalformer/errors.hpp"

namespace causalformer {

namespace {

Matrix xavier(Index in, Index out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
  return w;
}

}  // namespace

void ModelConfig::validate() const {
  if (neurons < 1) throw ConfigError("model needs at least one neuron");
  if (history < 0 || horizon < 1) throw ConfigError("history must be >= 0 and horizon >= 1");
  if (d_model < 2 || heads < 1 || head_dim < 1 || d_ff < 1) throw ConfigError("invalid model widths");
  if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("need at least one encoder and decoder layer");
  if (embedding_dropout < 0 || embedding_dropout >= 1 || ff_dropout < 0 || ff_dropout >= 1) {
    throw ConfigError("dropout probabilities must lie in [0, 1)");
  }
  if (!(time_scale > 0)) throw ConfigError("time scale must be positive");
}

Mask local_mask(Index n, Index len_q, Index len_k, Index per_neuron_q, Index per_neuron_k) {
  if (n < 1 || per_neuron_q < 1 || per_neuron_k < 1 || len_q != n * per_neuron_q || len_k != n * per_neuron_k) {
    throw DimensionError("local_mask: lengths " + std::to_string(len_q) + "x" + std::to_string(len_k) +
                         " do not match " + std::to_string(n) + " neurons");
  }
  Mask m = Mask::Constant(len_q, len_k, false);
  for (Index i = 0; i < n; ++i) {
    m.block(i * per_neuron_q, i * per_neuron_k, per_neuron_q, per_neuron_k).setConstant(true);
  }
  return m;
}

ModelInput make_input(const WindowedDataset& data, std::span<const Window> windows, const ModelConfig& cfg) {
  const Index n = data.neurons();
  const Index c1 = data.history() + 1;
  const Index h = data.horizon();
  if (n != cfg.neurons || data.history() != cfg.history || h != cfg.horizon) {
    throw DimensionError("dataset layout does not match the model configuration");
  }
  const auto B = static_cast<Index>(windows.size());
  ModelInput in;
  in.batch = B;
  in.history_values.resize(B * n * c1, 1);
  in.history_times.resize(B * n * c1, 1);
  in.target_values = Matrix::Zero(B * n * h, 1);
  in.target_times.resize(B * n * h, 1);
  in.history_ids.resize(static_cast<std::size_t>(B * n * c1));
  in.target_ids.resize(static_cast<std::size_t>(B * n * h));
  in.history_positions.resize(in.history_ids.size());
  in.target_positions.resize(in.target_ids.size());
  const auto& x = data.series().x;
  for (Index b = 0; b < B; ++b) {
    const Index start = windows[static_cast<std::size_t>(b)].start;
    for (Index i = 0; i < n; ++i) {
      for (Index s = 0; s < c1; ++s) {
        const Index r = (b * n + i) * c1 + s;
        in.history_values(r, 0) = x(start + s, i);
        in.history_times(r, 0) = static_cast<double>(start + s) * cfg.time_scale;
        in.history_ids[static_cast<std::size_t>(r)] = i;
        in.history_positions[static_cast<std::size_t>(r)] = s;
      }
      for (Index s = 0; s < h; ++s) {
        const Index r = (b * n + i) * h + s;
        in.target_times(r, 0) = static_cast<double>(start + c1 + s) * cfg.time_scale;
        in.target_ids[static_cast<std::size_t>(r)] = i;
        in.target_positions[static_cast<std::size_t>(r)] = c1 + s;
      }
    }
  }
  return in;
}

Matrix make_targets(const WindowedDataset& data, std::span<const Window> windows) {
  const Index n = data.neurons();
  const Index c1 = data.history() + 1;
  const Index h = data.horizon();
  const auto B = static_cast<Index>(windows.size());
  Matrix y(B * n * h, 1);
  const auto& x = data.series().x;
  for (Index b = 0; b < B; ++b) {
    const Index start = windows[static_cast<std::size_t>(b)].start;
    for (Index i = 0; i < n; ++i)
      for (Index s = 0; s < h; ++s) y((b * n + i) * h + s, 0) = x(start + c1 + s, i);
  }
  return y;
}

Causalformer::Causalformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x1417));
  const Index d = cfg_.d_model;

  // Registration order fixes the initialization stream; storage order is lexicographic.
  params_.add("embed.identity", xavier(cfg_.neurons, d, rng));
  params_.add("embed.time.w", xavier(1, 1, rng));
  params_.add("embed.time.b", Matrix::Zero(1, 1));
  const Index in_width = cfg_.composition == TokenComposition::Sum ? 2 : 2 + d;
  add_linear("embed.in", in_width, d, rng);

  for (Index l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    add_norm(p + "norm_attn", d);
    add_attention(p + "local_self", rng);
    add_norm(p + "norm_ffn", d);
    add_ffn(p + "ffn", rng);
  }
  add_norm("encoder.norm_out", d);

  for (Index l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    add_norm(p + "norm_local", d);
    add_attention(p + "local_cross", rng);
    add_norm(p + "norm_global", d);
    add_attention(p + "global_cross", rng);
    add_norm(p + "norm_ffn", d);
    add_ffn(p + "ffn", rng);
  }
  add_norm("decoder.norm_out", d);
  add_linear("readout", d, 1, rng);
  if (cfg_.position_embedding) {
    params_.add("embed.position", xavier(cfg_.history + 1 + cfg_.horizon, d, rng));
  }
}

void Causalformer::add_linear(const std::string& prefix, Index in, Index out, Rng& rng) {
  params_.add(prefix + ".w", xavier(in, out, rng));
  params_.add(prefix + ".b", Matrix::Zero(1, out));
}

void Causalformer::add_norm(const std::string& prefix, Index d) {
  params_.add(prefix + ".gain", Matrix::Ones(1, d));
  params_.add(prefix + ".bias", Matrix::Zero(1, d));
}

void Causalformer::add_attention(const std::string& prefix, Rng& rng) {
  const Index inner = cfg_.heads * cfg_.head_dim;
  add_linear(prefix + ".q", cfg_.d_model, inner, rng);
  add_linear(prefix + ".k", cfg_.d_model, inner, rng);
  add_linear(prefix + ".v", cfg_.d_model, inner, rng);
  add_linear(prefix + ".o", inner, cfg_.d_model, rng);
}

void Causalformer::add_ffn(const std::string& prefix, Rng& rng) {
  add_linear(prefix + ".in", cfg_.d_model, cfg_.d_ff, rng);
  add_linear(prefix + ".out", cfg_.d_ff, cfg_.d_model, rng);
}

Tensor Causalformer::norm(Tape& tape, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, param(tape, prefix + ".gain"), param(tape, prefix + ".bias"));
}

Tensor Causalformer::feed_forward(Tape& tape, const std::string& prefix, const Tensor& x, Mode mode, Rng* rng) {
  auto hidden = relu(linear(x, param(tape, prefix + ".in.w"), param(tape, prefix + ".in.b")));
  if (mode == Mode::Train && cfg_.ff_dropout > 0) hidden = dropout(hidden, cfg_.ff_dropout, true, *rng);
  return linear(hidden, param(tape, prefix + ".out.w"), param(tape, prefix + ".out.b"));
}

Tensor Causalformer::embed(Tape& tape, const Matrix& values, const Matrix& times,
                           const std::vector<Index>& neuron_ids, const std::vector<Index>& positions,
                           Mode mode, Rng* rng) {
  if (values.rows() != times.rows() || values.rows() != static_cast<Index>(neuron_ids.size()) ||
      values.cols() != 1 || times.cols() != 1) {
    throw DimensionError("embed: values, timestamps and neuron ids must align");
  }
  auto v = tape.constant(values);
  auto t = linear(tape.constant(times), param(tape, "embed.time.w"), param(tape, "embed.time.b"));
  auto identity = gather_rows(param(tape, "embed.identity"), neuron_ids);
  Tensor tokens;
  if (cfg_.composition == TokenComposition::Sum) {
    tokens = add(linear(concat_cols(v, t), param(tape, "embed.in.w"), param(tape, "embed.in.b")), identity);
  } else {
    tokens = linear(concat_cols(concat_cols(v, t), identity), param(tape, "embed.in.w"), param(tape, "embed.in.b"));
  }
  if (cfg_.position_embedding) {
    if (positions.size() != neuron_ids.size()) throw DimensionError("embed: positions must align with tokens");
    tokens = add(tokens, gather_rows(param(tape, "embed.position"), positions));
  }
  if (mode == Mode::Train && cfg_.embedding_dropout > 0) {
    tokens = dropout(tokens, cfg_.embedding_dropout, true, *rng);
  }
  return tokens;
}

Tensor Causalformer::multihead_attention(Tape& tape, const std::string& prefix, const Tensor& queries,
                                         const Tensor& keys, Index batch, Index groups, const Mask* mask,
                                         std::vector<Matrix>* weights) {
  auto q = linear(queries, param(tape, prefix + ".q.w"), param(tape, prefix + ".q.b"));
  auto k = linear(keys, param(tape, prefix + ".k.w"), param(tape, prefix + ".k.b"));
  auto v = linear(keys, param(tape, prefix + ".v.w"), param(tape, prefix + ".v.b"));
  auto heads = attention(q, k, v, AttentionShape{batch, cfg_.heads, cfg_.head_dim, groups}, mask, weights);
  return linear(heads, param(tape, prefix + ".o.w"), param(tape, prefix + ".o.b"));
}

Tensor Causalformer::encoder_forward(Tape& tape, const Tensor& history_tokens, Index batch, Mode mode, Rng* rng) {
  if (history_tokens.rows() != batch * cfg_.history_tokens() || history_tokens.cols() != cfg_.d_model) {
    throw DimensionError("encoder: unexpected token matrix shape");
  }
  Tensor x = history_tokens;
  for (Index l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    auto normed = norm(tape, p + "norm_attn", x);
    x = add(x, multihead_attention(tape, p + "local_self", normed, normed, batch, cfg_.neurons, nullptr, nullptr));
    x = add(x, feed_forward(tape, p + "ffn", norm(tape, p + "norm_ffn", x), mode, rng));
  }
  return norm(tape, "encoder.norm_out", x);
}

Causalformer::DecoderResult Causalformer::decoder_forward(Tape& tape, const Tensor& target_tokens,
                                                          const Tensor& history_repr, Index batch, Mode mode,
                                                          Rng* rng, std::vector<AttentionRecord>* record) {
  if (target_tokens.rows() != batch * cfg_.target_tokens() || target_tokens.cols() != cfg_.d_model) {
    throw DimensionError("decoder: unexpected token matrix shape");
  }
  Tensor x = target_tokens;
  Tensor pre_global;
  std::vector<Matrix> weights;
  for (Index l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    const bool last = l + 1 == cfg_.decoder_layers;
    x = add(x, multihead_attention(tape, p + "local_cross", norm(tape, p + "norm_local", x), history_repr, batch,
                                   cfg_.neurons, nullptr, nullptr));
    if (last) pre_global = x;
    x = add(x, multihead_attention(tape, p + "global_cross", norm(tape, p + "norm_global", x), history_repr,
                                   batch, 1, nullptr, (last && record != nullptr) ? &weights : nullptr));
    x = add(x, feed_forward(tape, p + "ffn", norm(tape, p + "norm_ffn", x), mode, rng));
  }
  if (record != nullptr) {
    const auto H = static_cast<std::size_t>(cfg_.heads);
    for (Index b = 0; b < batch; ++b) {
      AttentionRecord r;
      r.global_cross.assign(std::make_move_iterator(weights.begin() + static_cast<std::ptrdiff_t>(b * H)),
                            std::make_move_iterator(weights.begin() + static_cast<std::ptrdiff_t>((b + 1) * H)));
      record->push_back(std::move(r));
    }
  }
  auto out = norm(tape, "decoder.norm_out", x);
  return {linear(out, param(tape, "readout.w"), param(tape, "readout.b")), pre_global};
}

ForwardResult Causalformer::forward(Tape& tape, const ModelInput& input, Mode mode, Rng* rng,
                                    bool record_attention) {
  if (mode == Mode::Train && rng == nullptr) throw ConfigError("training forward pass needs a dropout rng");
  ForwardResult r;
  auto hist = embed(tape, input.history_values, input.history_times, input.history_ids, input.history_positions, mode, rng);
  auto tgt = embed(tape, input.target_values, input.target_times, input.target_ids, input.target_positions, mode, rng);
  r.history_repr = encoder_forward(tape, hist, input.batch, mode, rng);
  auto dec = decoder_forward(tape, tgt, r.history_repr, input.batch, mode, rng,
                             record_attention ? &r.attention : nullptr);
  r.predictions = dec.predictions;
  r.pre_global = dec.pre_global;
  return r;
}

void quantize_to_float32(ParamStore& store) {
  for (auto& [name, p] : store) {
    p.value = p.value.cast<float>().cast<double>();
  }
}

std::string to_string(TokenComposition c) { return c == TokenComposition::Sum ? "sum" : "concat"; }

TokenComposition token_composition_from_string(const std::string& s) {
  if (s == "sum") return TokenComposition::Sum;
  if (s == "concat") return TokenComposition::Concat;
  throw ConfigError("unknown token composition '" + s + "' (expected sum or concat)");
}

}  // namespace causalformer
