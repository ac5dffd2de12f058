#include "causalformer/dataset.hpp"

#include <cmath>

#include "causalformer/errors.hpp"

namespace causalformer {

SplitRanges split_indices(Index steps, Index history, Index horizon) {
  if (history < 0 || horizon < 1) throw ConfigError("history must be >= 0 and horizon >= 1");
  const Index n_train = (6 * steps) / 10;
  const Index n_val = (2 * steps) / 10;
  SplitRanges s;
  s.train = {0, n_train};
  s.val = {n_train, n_train + n_val};
  s.test = {n_train + n_val, steps};
  const Index need = history + 1 + horizon;
  if (s.train.size() < need || s.val.size() < need || s.test.size() < need) {
    throw ConfigError("series of " + std::to_string(steps) + " steps is too short for windows of " +
                      std::to_string(need) + " steps in every split");
  }
  return s;
}

NormalizedSeries normalize(const Matrix& raw, StepRange stats_range, double clip_threshold,
                           NormalizationScope scope) {
  if (stats_range.begin < 0 || stats_range.end > raw.rows() || stats_range.size() < 1) {
    throw ConfigError("statistics range outside the series");
  }
  NormalizedSeries out;
  out.clip_threshold = clip_threshold;
  out.scope = scope;
  out.stats_range = stats_range;
  Matrix clipped = raw.cwiseMin(clip_threshold);
  const auto seg = clipped.middleRows(stats_range.begin, stats_range.size());
  const Index n = raw.cols();
  out.mean.resize(n);
  out.stddev.resize(n);
  if (scope == NormalizationScope::PerNeuron) {
    for (Index j = 0; j < n; ++j) {
      const double m = seg.col(j).mean();
      const double sd = std::sqrt((seg.col(j).array() - m).square().mean());
      if (!(sd > 0)) {
        throw DegenerateError("neuron " + std::to_string(j) + " has zero variance on the statistics segment");
      }
      out.mean(j) = m;
      out.stddev(j) = sd;
    }
  } else {
    const double m = seg.mean();
    const double sd = std::sqrt((seg.array() - m).square().mean());
    if (!(sd > 0)) throw DegenerateError("series has zero variance on the statistics segment");
    out.mean.setConstant(m);
    out.stddev.setConstant(sd);
  }
  out.x = (clipped.rowwise() - out.mean).array().rowwise() / out.stddev.array();
  return out;
}

Matrix denormalize(const NormalizedSeries& series, const Matrix& x) {
  if (x.cols() != series.mean.size()) throw DimensionError("denormalize: column count mismatch");
  return (x.array().rowwise() * series.stddev.array()).rowwise() + series.mean.array();
}

std::vector<Index> Window::history_steps(Index history) const {
  std::vector<Index> s(static_cast<std::size_t>(history + 1));
  for (Index k = 0; k <= history; ++k) s[static_cast<std::size_t>(k)] = start + k;
  return s;
}

std::vector<Index> Window::target_steps(Index history, Index horizon) const {
  std::vector<Index> s(static_cast<std::size_t>(horizon));
  for (Index k = 0; k < horizon; ++k) s[static_cast<std::size_t>(k)] = start + history + 1 + k;
  return s;
}

Index window_count(Index range_length, Index history, Index horizon) {
  const Index n = range_length - (history + 1) - horizon + 1;
  return n > 0 ? n : 0;
}

std::vector<Window> window(StepRange range, Index history, Index horizon) {
  const Index n = window_count(range.size(), history, horizon);
  if (n == 0) {
    throw EmptySplitError("range [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                          ") holds no window of " + std::to_string(history + 1 + horizon) + " steps");
  }
  std::vector<Window> out(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) out[static_cast<std::size_t>(k)].start = range.begin + k;
  return out;
}

WindowedDataset::WindowedDataset(NormalizedSeries series, SplitRanges splits, Index history, Index horizon)
    : series_(std::move(series)), splits_(splits), history_(history), horizon_(horizon) {
  if (splits_.test.end > series_.x.rows()) throw ConfigError("split ranges exceed the series length");
  train_ = window(splits_.train, history_, horizon_);
  val_ = window(splits_.val, history_, horizon_);
  test_ = window(splits_.test, history_, horizon_);
}

Matrix WindowedDataset::history_block(const Window& w) const {
  return series_.x.middleRows(w.start, history_ + 1).transpose();
}

Matrix WindowedDataset::target_block(const Window& w) const {
  return series_.x.middleRows(w.start + history_ + 1, horizon_).transpose();
}

}  // namespace causalformer
