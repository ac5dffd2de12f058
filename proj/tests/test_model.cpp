#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "causalformer/dataset.hpp"
#include "causalformer/errors.hpp"
#include "causalformer/model.hpp"
#include "grad_check.hpp"

using namespace causalformer;
using causalformer::testing::rel_error;

namespace {

WindowedDataset random_dataset(Index n, Index T, Index c, Index h, std::uint64_t seed) {
  Rng rng(seed);
  Matrix raw(T, n);
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = rng.normal(-55.0, 10.0);
  const auto splits = split_indices(T, c, h);
  return WindowedDataset(normalize(raw, splits.train), splits, c, h);
}

ModelConfig config_for(Index n, Index c, Index h) {
  ModelConfig cfg;
  cfg.neurons = n;
  cfg.history = c;
  cfg.horizon = h;
  return cfg;
}

ModelConfig small_config(Index n, Index c, Index h) {
  auto cfg = config_for(n, c, h);
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.head_dim = 3;
  cfg.d_ff = 12;
  return cfg;
}

std::span<const Window> first(const std::vector<Window>& ws, std::size_t k) {
  return std::span<const Window>(ws.data(), std::min(k, ws.size()));
}

}  // namespace

// ---------------------------------------------------------------- masks

TEST(LocalMask, TwoNeuronsThreeTokens) {
  const Mask m = local_mask(2, 6, 6, 3, 3);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) EXPECT_EQ(m(i, j), (i / 3) == (j / 3));
}

TEST(LocalMask, SingleNeuronAllowsEverything) {
  EXPECT_TRUE(local_mask(1, 4, 7, 4, 7).all());
}

TEST(LocalMask, DecoderLayout) {
  const Mask m = local_mask(5, 5, 55, 1, 11);
  for (Index j = 0; j < 5; ++j)
    for (Index k = 0; k < 55; ++k) EXPECT_EQ(m(j, k), k >= 11 * j && k <= 11 * j + 10);
}

TEST(LocalMask, InconsistentLengthsThrow) {
  EXPECT_THROW(local_mask(2, 5, 6, 3, 3), DimensionError);
  EXPECT_THROW(local_mask(0, 0, 0, 1, 1), DimensionError);
}

// ---------------------------------------------------------------- shapes

TEST(Model, ReferenceShapes) {
  const auto data = random_dataset(5, 200, 10, 1, 1);
  Causalformer model(config_for(5, 10, 1), 3);
  const auto in = make_input(data, first(data.test(), 1), model.config());
  Tape tape;
  auto tokens = model.embed(tape, in.history_values, in.history_times, in.history_ids, in.history_positions,
                            Mode::Eval, nullptr);
  EXPECT_EQ(tokens.rows(), 55);
  EXPECT_EQ(tokens.cols(), 100);
  auto enc = model.encoder_forward(tape, tokens, 1, Mode::Eval, nullptr);
  EXPECT_EQ(enc.rows(), 55);
  EXPECT_EQ(enc.cols(), 100);

  Tape tape2;
  const auto r = model.forward(tape2, in, Mode::Eval, nullptr, true);
  EXPECT_EQ(r.predictions.rows(), 5);
  EXPECT_EQ(r.predictions.cols(), 1);
  EXPECT_TRUE(r.predictions.value().allFinite());
  ASSERT_EQ(r.attention.size(), 1u);
  ASSERT_EQ(r.attention[0].global_cross.size(), 10u);
  for (const auto& a : r.attention[0].global_cross) {
    ASSERT_EQ(a.rows(), 5);
    ASSERT_EQ(a.cols(), 55);
    EXPECT_GE(a.minCoeff(), 0.0);
    for (Index j = 0; j < 5; ++j) EXPECT_NEAR(a.row(j).sum(), 1.0, 1e-9);
  }
}

TEST(Model, BatchedRecordsSplitPerSample) {
  const auto data = random_dataset(3, 120, 4, 1, 2);
  Causalformer model(small_config(3, 4, 1), 5);
  const auto in = make_input(data, first(data.test(), 4), model.config());
  Tape tape;
  const auto batched = model.forward(tape, in, Mode::Eval, nullptr, true);
  ASSERT_EQ(batched.attention.size(), 4u);
  for (std::size_t b = 0; b < 4; ++b) {
    const auto one = make_input(data, std::span<const Window>(&data.test()[b], 1), model.config());
    Tape t;
    const auto single = model.forward(t, one, Mode::Eval, nullptr, true);
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_LT((single.attention[0].global_cross[h] - batched.attention[b].global_cross[h]).cwiseAbs().maxCoeff(),
                1e-12);
    }
    EXPECT_LT((single.predictions.value() - batched.predictions.value().middleRows(3 * b, 3)).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(Model, InputLayoutIsNeuronMajor) {
  const auto data = random_dataset(3, 100, 4, 2, 3);
  auto cfg = small_config(3, 4, 2);
  const auto in = make_input(data, first(data.train(), 2), cfg);
  const auto& x = data.series().x;
  for (Index b = 0; b < 2; ++b) {
    const Index start = data.train()[static_cast<std::size_t>(b)].start;
    for (Index i = 0; i < 3; ++i) {
      for (Index s = 0; s < 5; ++s) {
        const Index r = (b * 3 + i) * 5 + s;
        EXPECT_EQ(in.history_values(r, 0), x(start + s, i));
        EXPECT_EQ(in.history_ids[static_cast<std::size_t>(r)], i);
        EXPECT_DOUBLE_EQ(in.history_times(r, 0), (start + s) * cfg.time_scale);
      }
      for (Index s = 0; s < 2; ++s) {
        const Index r = (b * 3 + i) * 2 + s;
        EXPECT_EQ(in.target_values(r, 0), 0.0);
        EXPECT_EQ(in.target_ids[static_cast<std::size_t>(r)], i);
      }
    }
  }
  const Matrix y = make_targets(data, first(data.train(), 2));
  EXPECT_EQ(y(0, 0), x(data.train()[0].start + 5, 0));
  EXPECT_EQ(y(1, 0), x(data.train()[0].start + 6, 0));
  EXPECT_EQ(y(2, 0), x(data.train()[0].start + 5, 1));
}

// ---------------------------------------------------------------- embedding

TEST(Embedding, IdentityRowsAreAdditive) {
  Causalformer model(config_for(4, 10, 1), 7);
  Matrix values(2, 1), times(2, 1);
  values << 0.37, 0.37;
  times << 0.002, 0.002;
  Tape tape;
  auto tok = model.embed(tape, values, times, {1, 3}, {0, 0}, Mode::Eval, nullptr);
  const auto& id = model.params().at("embed.identity").value;
  EXPECT_LT(((tok.value().row(0) - tok.value().row(1)) - (id.row(1) - id.row(3))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Embedding, PositionRowsAreAdditive) {
  ModelConfig with_positions = config_for(2, 10, 1);
  with_positions.position_embedding = true;
  Causalformer model(with_positions, 10);
  Matrix values(2, 1), times(2, 1);
  values << -0.4, -0.4;
  times << 0.01, 0.01;
  Tape tape;
  auto tok = model.embed(tape, values, times, {1, 1}, {2, 11}, Mode::Eval, nullptr);
  const auto& pos = model.params().at("embed.position").value;
  EXPECT_EQ(pos.rows(), 12);
  EXPECT_LT(((tok.value().row(0) - tok.value().row(1)) - (pos.row(2) - pos.row(11))).cwiseAbs().maxCoeff(), 1e-12);

  Causalformer without(config_for(2, 10, 1), 10);
  EXPECT_FALSE(without.params().contains("embed.position"));
}

TEST(Embedding, ZeroInputsGiveBiasOnlyToken) {
  Causalformer model(config_for(2, 10, 1), 8);
  model.params().at("embed.identity").value.row(0).setZero();
  model.params().at("embed.in.b").value.setConstant(0.25);
  Tape tape;
  auto tok = model.embed(tape, Matrix::Zero(1, 1), Matrix::Zero(1, 1), {0}, {0}, Mode::Eval, nullptr);
  // The time embedding bias starts at zero, so only the projection bias remains.
  EXPECT_EQ(tok.value(), Matrix::Constant(1, 100, 0.25));
}

TEST(Embedding, Errors) {
  Causalformer model(config_for(2, 10, 1), 9);
  Tape tape;
  EXPECT_THROW(model.embed(tape, Matrix::Zero(1, 1), Matrix::Zero(1, 1), {2}, {0}, Mode::Eval, nullptr), IndexError);
  EXPECT_THROW(model.embed(tape, Matrix::Zero(2, 1), Matrix::Zero(1, 1), {0, 1}, {0, 0}, Mode::Eval, nullptr),
               DimensionError);
}

TEST(Embedding, ConcatCompositionRuns) {
  auto cfg = small_config(3, 4, 1);
  cfg.composition = TokenComposition::Concat;
  const auto data = random_dataset(3, 100, 4, 1, 10);
  Causalformer model(cfg, 1);
  EXPECT_EQ(model.params().at("embed.in.w").value.rows(), 2 + cfg.d_model);
  Tape tape;
  const auto r = model.forward(tape, make_input(data, first(data.val(), 3), cfg), Mode::Eval);
  EXPECT_EQ(r.predictions.rows(), 9);
  EXPECT_TRUE(r.predictions.value().allFinite());
}

// ---------------------------------------------------------------- attention sublayer

TEST(MultiheadAttention, GroupedMatchesLocalMask) {
  Causalformer model(small_config(4, 5, 1), 11);
  Rng rng(12);
  const Matrix hist = causalformer::testing::random_matrix(2 * 4 * 6, 8, rng);
  const Matrix tgt = causalformer::testing::random_matrix(2 * 4, 8, rng);
  const Mask mask = local_mask(4, 4, 24, 1, 6);
  std::vector<Matrix> w_grouped, w_masked;
  Tape t;
  auto keys = t.constant(hist);
  auto q = t.constant(tgt);
  auto grouped = model.multihead_attention(t, "decoder.0.local_cross", q, keys, 2, 4, nullptr, &w_grouped);
  auto masked = model.multihead_attention(t, "decoder.0.local_cross", q, keys, 2, 1, &mask, &w_masked);
  EXPECT_LT((grouped.value() - masked.value()).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_EQ(w_grouped.size(), w_masked.size());
  for (std::size_t i = 0; i < w_grouped.size(); ++i) {
    EXPECT_LT((w_grouped[i] - w_masked[i]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---------------------------------------------------------------- separation

namespace {

struct SeparationOutcome {
  Index encoder_violations = 0;
  Index pre_global_violations = 0;
  Index prediction_changes = 0;
};

SeparationOutcome run_separation_trials(int trials, std::uint64_t seed) {
  const Index n = 4, c = 6;
  auto cfg = config_for(n, c, 1);
  Causalformer model(cfg, seed);
  Rng rng(derive_seed(seed, 1));
  SeparationOutcome out;
  for (int trial = 0; trial < trials; ++trial) {
    ModelInput in;
    in.batch = 1;
    in.history_values.resize(n * (c + 1), 1);
    in.history_times.resize(n * (c + 1), 1);
    in.target_values = Matrix::Zero(n, 1);
    in.target_times.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
      for (Index s = 0; s <= c; ++s) {
        const Index r = i * (c + 1) + s;
        in.history_values(r, 0) = rng.normal();
        in.history_times(r, 0) = (100 + s) * cfg.time_scale;
        in.history_ids.push_back(i);
        in.history_positions.push_back(s);
      }
      in.target_times(i, 0) = (101 + c) * cfg.time_scale;
      in.target_ids.push_back(i);
      in.target_positions.push_back(c + 1);
    }
    const Index victim = static_cast<Index>(rng.below(n));
    ModelInput perturbed = in;
    for (Index s = 0; s <= c; ++s) perturbed.history_values(victim * (c + 1) + s, 0) += rng.normal(0.0, 3.0);

    Tape ta, tb;
    const auto a = model.forward(ta, in, Mode::Eval);
    const auto b = model.forward(tb, perturbed, Mode::Eval);
    for (Index j = 0; j < n; ++j) {
      if (j == victim) continue;
      const auto rows_a = a.history_repr.value().middleRows(j * (c + 1), c + 1);
      const auto rows_b = b.history_repr.value().middleRows(j * (c + 1), c + 1);
      if (rows_a != rows_b) ++out.encoder_violations;
      if (a.pre_global.value().row(j) != b.pre_global.value().row(j)) ++out.pre_global_violations;
      if (a.predictions.value()(j, 0) != b.predictions.value()(j, 0)) ++out.prediction_changes;
    }
  }
  return out;
}

}  // namespace

TEST(Separation, OtherNeuronsAreExactlyInvariantBeforeGlobalAttention) {
  const auto r = run_separation_trials(100, 21);
  EXPECT_EQ(r.encoder_violations, 0);
  EXPECT_EQ(r.pre_global_violations, 0);
  // The global sublayer does mix neurons.
  EXPECT_GT(r.prediction_changes, 0);
}

// ---------------------------------------------------------------- gradients

namespace {

double model_loss(Causalformer& model, const ModelInput& in, const Matrix& y) {
  Tape t;
  return mse_loss(model.forward(t, in, Mode::Eval).predictions, y).value()(0, 0);
}

}  // namespace

TEST(Model, FullGradientCheckSmallWidths) {
  const auto data = random_dataset(2, 60, 2, 1, 30);
  Causalformer model(small_config(2, 2, 1), 31);
  // Move identity rows and biases off zero so every parameter carries a generic gradient.
  Rng rng(32);
  for (auto& [name, p] : model.params()) {
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.1 * rng.normal();
  }
  const auto windows = first(data.train(), 3);
  const auto in = make_input(data, windows, model.config());
  const Matrix y = make_targets(data, windows);
  {
    Tape t;
    t.backward(mse_loss(model.forward(t, in, Mode::Eval).predictions, y), model.params());
  }
  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  for (auto& [name, p] : model.params()) {
    for (Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      const double up = model_loss(model, in, y);
      p.value.data()[i] = orig - h;
      const double down = model_loss(model, in, y);
      p.value.data()[i] = orig;
      const double e = rel_error(p.grad.data()[i], (up - down) / (2 * h));
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  }
  EXPECT_LT(worst, 1e-3) << "worst parameter " << worst_name;
}

// ---------------------------------------------------------------- equivariance

TEST(Model, NeuronPermutationEquivariance) {
  const Index n = 4, c = 5;
  Rng rng(40);
  Matrix raw(120, n);
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = rng.normal(-55.0, 10.0);
  const std::vector<Index> perm{2, 0, 3, 1};  // new neuron k is old neuron perm[k]
  Matrix raw_p(raw.rows(), n);
  for (Index k = 0; k < n; ++k) raw_p.col(k) = raw.col(perm[static_cast<std::size_t>(k)]);
  const auto splits = split_indices(120, c, 1);
  const WindowedDataset da(normalize(raw, splits.train), splits, c, 1);
  const WindowedDataset db(normalize(raw_p, splits.train), splits, c, 1);

  Causalformer a(small_config(n, c, 1), 41);
  Causalformer b = a;
  const auto& id = a.params().at("embed.identity").value;
  auto& id_b = b.params().at("embed.identity").value;
  for (Index k = 0; k < n; ++k) id_b.row(k) = id.row(perm[static_cast<std::size_t>(k)]);

  const auto wa = first(da.test(), 3);
  const auto wb = first(db.test(), 3);
  Tape ta, tb;
  const auto ra = a.forward(ta, make_input(da, wa, a.config()), Mode::Eval, nullptr, true);
  const auto rb = b.forward(tb, make_input(db, wb, b.config()), Mode::Eval, nullptr, true);
  for (Index s = 0; s < 3; ++s) {
    for (Index k = 0; k < n; ++k) {
      const Index old = perm[static_cast<std::size_t>(k)];
      EXPECT_NEAR(rb.predictions.value()(s * n + k, 0), ra.predictions.value()(s * n + old, 0), 1e-10);
      for (std::size_t h = 0; h < 2; ++h) {
        const auto& A = ra.attention[static_cast<std::size_t>(s)].global_cross[h];
        const auto& B = rb.attention[static_cast<std::size_t>(s)].global_cross[h];
        for (Index l = 0; l < n; ++l) {
          const Index old_l = perm[static_cast<std::size_t>(l)];
          EXPECT_LT((B.block(k, l * (c + 1), 1, c + 1) - A.block(old, old_l * (c + 1), 1, c + 1))
                        .cwiseAbs()
                        .maxCoeff(),
                    1e-10);
        }
      }
    }
  }
}

// ---------------------------------------------------------------- misc

TEST(Model, SeedDeterminesInitialization) {
  const auto cfg = small_config(3, 4, 1);
  Causalformer a(cfg, 5), b(cfg, 5), c(cfg, 6);
  bool any_diff = false;
  for (const auto& [name, p] : a.params()) {
    EXPECT_EQ(p.value, b.params().at(name).value) << name;
    any_diff = any_diff || p.value != c.params().at(name).value;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, ParameterInventory) {
  Causalformer model(config_for(5, 10, 1), 1);
  const auto& ps = model.params();
  EXPECT_EQ(ps.at("embed.identity").value.rows(), 5);
  EXPECT_EQ(ps.at("embed.identity").value.cols(), 100);
  for (const char* attn : {"encoder.0.local_self", "decoder.0.local_cross", "decoder.0.global_cross"}) {
    const std::string p(attn);
    EXPECT_EQ(ps.at(p + ".q.w").value.cols(), 80);
    EXPECT_EQ(ps.at(p + ".o.w").value.rows(), 80);
    EXPECT_EQ(ps.at(p + ".o.w").value.cols(), 100);
  }
  EXPECT_EQ(ps.at("encoder.0.ffn.in.w").value.cols(), 400);
  EXPECT_EQ(ps.at("decoder.0.ffn.out.w").value.rows(), 400);
  EXPECT_EQ(ps.at("readout.w").value.cols(), 1);
  EXPECT_FALSE(ps.contains("encoder.1.local_self.q.w"));
}

TEST(Model, EvalIsDeterministicAndTrainNeedsRng) {
  const auto data = random_dataset(3, 100, 4, 1, 50);
  Causalformer model(small_config(3, 4, 1), 51);
  const auto in = make_input(data, first(data.val(), 5), model.config());
  Tape t1, t2, t3;
  EXPECT_EQ(model.forward(t1, in, Mode::Eval).predictions.value(),
            model.forward(t2, in, Mode::Eval).predictions.value());
  EXPECT_THROW(model.forward(t3, in, Mode::Train), ConfigError);
}

TEST(Model, InvalidConfigRejected) {
  auto cfg = small_config(3, 4, 1);
  cfg.ff_dropout = 1.0;
  EXPECT_THROW(Causalformer(cfg, 0), ConfigError);
  auto cfg2 = small_config(3, 4, 1);
  cfg2.horizon = 0;
  EXPECT_THROW(Causalformer(cfg2, 0), ConfigError);
  const auto data = random_dataset(3, 100, 4, 1, 52);
  EXPECT_THROW(make_input(data, first(data.val(), 1), small_config(4, 4, 1)), DimensionError);
}
