#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "causalformer/dataset.hpp"
#include "causalformer/model.hpp"

namespace causalformer {

struct TrainConfig {
  Index batch_size = 16;
  double lr = 5e-4;
  double lr_decay = 0.5;
  /// Epochs without validation improvement before the learning rate is decayed.
  Index lr_patience = 3;
  double weight_decay = 1e-3;
  Index max_epochs = 200;
  Index early_stop_patience = 10;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  Index eval_batch_size = 64;

  void validate() const;
};

/// Multiplies the learning rate by `factor` after `patience` epochs without improvement.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, Index patience) : lr_(lr), factor_(factor), patience_(patience) {}

  /// Feed one validation loss; returns the learning rate for the next epoch.
  double step(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  Index patience_;
  double best_ = std::numeric_limits<double>::infinity();
  Index bad_epochs_ = 0;
};

/// Signals a stop once `patience` consecutive epochs fail to improve on the best loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(Index patience) : patience_(patience) {}

  bool update(double val_loss);
  double best() const { return best_; }
  Index bad_epochs() const { return bad_epochs_; }

 private:
  Index patience_;
  double best_ = std::numeric_limits<double>::infinity();
  Index bad_epochs_ = 0;
};

struct EpochStats {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  Index stopped_epoch = 0;
  Index best_epoch = 0;
  double best_val_loss = 0.0;
  double wall_seconds = 0.0;
  std::string lr_rule;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/**
 * Minimize the per-sample MSE with AdamW on shuffled mini-batches. On return
 * the model holds the parameters of the epoch with the lowest validation loss.
 */
TrainReport train(Causalformer& model, const WindowedDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Mean squared error over the given windows in eval mode.
double evaluate_loss(Causalformer& model, const WindowedDataset& data, std::span<const Window> windows,
                     Index batch_size = 64);

/// One-step forecasts on the test split plus the per-sample attention estimates.
struct TestPass {
  Matrix predicted;  // test windows x n (first forecast step)
  Matrix truth;
  Matrix attention_sampavg;  // head/history-summed, sample-averaged, row-normalized
};

TestPass run_test_pass(Causalformer& model, const WindowedDataset& data, Index batch_size = 64,
                       bool record_attention = true);

struct R2Result {
  Vector per_neuron;
  double mean = 0.0;
};

/// R^2 per column: 1 - SSE / SST around the column mean of `truth`.
R2Result r2_score(const Matrix& truth, const Matrix& predicted);

R2Result evaluate_r2(Causalformer& model, const WindowedDataset& data, Index batch_size = 64);

}  // namespace causalformer
