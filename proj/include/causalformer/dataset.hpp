#pragma once

#include <string>
#include <vector>

#include "causalformer/kernel/types.hpp"

namespace causalformer {

/// Half-open step range [begin, end).
struct StepRange {
  Index begin = 0;
  Index end = 0;
  Index size() const { return end - begin; }
  bool operator==(const StepRange&) const = default;
};

struct SplitRanges {
  StepRange train;
  StepRange val;
  StepRange test;
};

enum class NormalizationScope { PerNeuron, Global };

/// Clipped and z-scored series with the statistics used.
struct NormalizedSeries {
  Matrix x;  // T x n
  RowVector mean;
  RowVector stddev;
  double clip_threshold = 30.0;
  NormalizationScope scope = NormalizationScope::PerNeuron;
  StepRange stats_range;
};

/**
 * 60/20/20 contiguous split: floor(0.6 T), floor(0.2 T), remainder.
 * Every split must hold at least one window of history + target steps.
 */
SplitRanges split_indices(Index steps, Index history = 10, Index horizon = 1);

/**
 * Clip at `clip_threshold` then z-score with population statistics computed on
 * `stats_range` only. PerNeuron uses one mean/std per column; Global shares a
 * single pair across all columns.
 */
NormalizedSeries normalize(const Matrix& raw, StepRange stats_range, double clip_threshold = 30.0,
                           NormalizationScope scope = NormalizationScope::PerNeuron);

/// Inverse of the z-score (clipping is not undone).
Matrix denormalize(const NormalizedSeries& series, const Matrix& x);

/// One forecasting window, expressed as offsets into the series.
struct Window {
  Index start = 0;  // first history step

  std::vector<Index> history_steps(Index history) const;
  std::vector<Index> target_steps(Index history, Index horizon) const;
};

/// Number of windows a range yields for history length c+1 and horizon h.
Index window_count(Index range_length, Index history, Index horizon);

/// Exhaustive stride-1 windows contained in `range`; throws EmptySplitError if none fit.
std::vector<Window> window(StepRange range, Index history, Index horizon);

/**
 * Normalized series plus per-split windows. history is c (the window holds
 * c+1 history steps) and horizon is h.
 */
class WindowedDataset {
 public:
  WindowedDataset(NormalizedSeries series, SplitRanges splits, Index history = 10, Index horizon = 1);

  const NormalizedSeries& series() const { return series_; }
  const SplitRanges& splits() const { return splits_; }
  Index history() const { return history_; }
  Index horizon() const { return horizon_; }
  Index neurons() const { return series_.x.cols(); }
  Index steps() const { return series_.x.rows(); }

  const std::vector<Window>& train() const { return train_; }
  const std::vector<Window>& val() const { return val_; }
  const std::vector<Window>& test() const { return test_; }

  /// n x (c+1) history block and n x h target block of a window.
  Matrix history_block(const Window& w) const;
  Matrix target_block(const Window& w) const;

 private:
  NormalizedSeries series_;
  SplitRanges splits_;
  Index history_;
  Index horizon_;
  std::vector<Window> train_;
  std::vector<Window> val_;
  std::vector<Window> test_;
};

}  // namespace causalformer
