#include "causalformer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "causalformer/causal_extract.hpp"
#include "causalformer/errors.hpp"

namespace causalformer {

namespace {

// Every batch allocates and frees the same large activations; stop glibc from
// returning that memory to the OS (and faulting it back in) on each batch.
void keep_heap_resident() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be positive");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("learning rate decay must lie in (0, 1]");
  if (lr_patience < 1) throw ConfigError("learning rate patience must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be nonnegative");
  if (max_epochs < 1 || early_stop_patience < 1) throw ConfigError("epoch counts must be positive");
  if (early_stop_patience >= max_epochs) throw ConfigError("early stopping patience must be below max_epochs");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
}

double PlateauScheduler::step(double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
  }
  return lr_;
}

bool EarlyStopping::update(double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else {
    ++bad_epochs_;
  }
  return bad_epochs_ >= patience_;
}

double evaluate_loss(Causalformer& model, const WindowedDataset& data, std::span<const Window> windows,
                     Index batch_size) {
  if (windows.empty()) throw EmptySplitError("cannot evaluate on an empty split");
  double sse = 0.0;
  Index count = 0;
  for (std::size_t b = 0; b < windows.size(); b += static_cast<std::size_t>(batch_size)) {
    auto chunk = windows.subspan(b, std::min(windows.size() - b, static_cast<std::size_t>(batch_size)));
    Tape tape;
    auto out = model.forward(tape, make_input(data, chunk, model.config()), Mode::Eval);
    const Matrix target = make_targets(data, chunk);
    sse += (out.predictions.value() - target).squaredNorm();
    count += target.size();
  }
  return sse / static_cast<double>(count);
}

TrainReport train(Causalformer& model, const WindowedDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  keep_heap_resident();
  if (data.train().empty() || data.val().empty()) throw ConfigError("training needs train and validation windows");
  const auto clock_start = std::chrono::steady_clock::now();

  Rng shuffle_rng(derive_seed(cfg.seed, 0x5f));
  Rng dropout_rng(derive_seed(cfg.seed, 0xd0));
  PlateauScheduler scheduler(cfg.lr, cfg.lr_decay, cfg.lr_patience);
  EarlyStopping stopper(cfg.early_stop_patience);
  AdamWConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  TrainReport report;
  report.lr_rule = "plateau(factor=" + std::to_string(cfg.lr_decay) +
                   ", patience=" + std::to_string(cfg.lr_patience) + ")";
  report.best_val_loss = std::numeric_limits<double>::infinity();
  ParamStore best = model.params();

  std::vector<Window> order(data.train().begin(), data.train().end());
  auto& params = model.params();
  params.zero_grad();
  for (Index epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    Index seen = 0;
    Index batch_index = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      std::span<const Window> chunk(order.data() + b,
                                    std::min(order.size() - b, static_cast<std::size_t>(cfg.batch_size)));
      Tape tape;
      auto out = model.forward(tape, make_input(data, chunk, model.config()), Mode::Train, &dropout_rng);
      auto loss = mse_loss(out.predictions, make_targets(data, chunk));
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index));
      }
      tape.backward(loss, params);
      adamw_step(params, opt);
      params.zero_grad();
      loss_sum += value * static_cast<double>(chunk.size());
      seen += static_cast<Index>(chunk.size());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.val_loss = evaluate_loss(model, data, data.val(), cfg.eval_batch_size);
    stats.lr = opt.lr;
    if (!std::isfinite(stats.val_loss)) {
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (stats.val_loss < report.best_val_loss) {
      report.best_val_loss = stats.val_loss;
      report.best_epoch = epoch;
      best.assign_values(params);
    }
    report.stopped_epoch = epoch;
    opt.lr = scheduler.step(stats.val_loss);
    if (stopper.update(stats.val_loss)) break;
  }
  params.assign_values(best);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return report;
}

TestPass run_test_pass(Causalformer& model, const WindowedDataset& data, Index batch_size, bool record_attention) {
  const auto& windows = data.test();
  if (windows.empty()) throw EmptySplitError("test split is empty");
  const Index n = data.neurons();
  const Index h = data.horizon();
  TestPass pass;
  pass.predicted.resize(static_cast<Index>(windows.size()), n);
  pass.truth.resize(static_cast<Index>(windows.size()), n);
  SampleAccumulator acc(n);
  std::span<const Window> all(windows);
  for (std::size_t b = 0; b < windows.size(); b += static_cast<std::size_t>(batch_size)) {
    auto chunk = all.subspan(b, std::min(windows.size() - b, static_cast<std::size_t>(batch_size)));
    Tape tape;
    auto out = model.forward(tape, make_input(data, chunk, model.config()), Mode::Eval, nullptr, record_attention);
    const Matrix target = make_targets(data, chunk);
    const auto& pred = out.predictions.value();
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      const auto row = static_cast<Index>(b + s);
      for (Index i = 0; i < n; ++i) {
        pass.predicted(row, i) = pred((static_cast<Index>(s) * n + i) * h, 0);
        pass.truth(row, i) = target((static_cast<Index>(s) * n + i) * h, 0);
      }
    }
    if (record_attention) {
      for (const auto& rec : out.attention) acc.add(aggregate_sample(rec.global_cross, n));
    }
  }
  if (record_attention) pass.attention_sampavg = acc.result();
  return pass;
}

R2Result r2_score(const Matrix& truth, const Matrix& predicted) {
  if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols() || truth.rows() == 0) {
    throw DimensionError("r2_score: truth and prediction shapes differ");
  }
  R2Result r;
  r.per_neuron.resize(truth.cols());
  for (Index j = 0; j < truth.cols(); ++j) {
    const double mean = truth.col(j).mean();
    const double sst = (truth.col(j).array() - mean).square().sum();
    if (!(sst > 0)) throw DegenerateError("neuron " + std::to_string(j) + " has zero variance on the test split");
    const double sse = (truth.col(j) - predicted.col(j)).squaredNorm();
    r.per_neuron(j) = 1.0 - sse / sst;
  }
  r.mean = r.per_neuron.mean();
  return r;
}

R2Result evaluate_r2(Causalformer& model, const WindowedDataset& data, Index batch_size) {
  auto pass = run_test_pass(model, data, batch_size, false);
  return r2_score(pass.truth, pass.predicted);
}

}  // namespace causalformer
