#pragma once

#include <span>
#include <string>
#include <vector>

#include "causalformer/kernel/types.hpp"

namespace causalformer {

enum class Provenance { Attention, VarF };

/**
 * N x N edge scores. scores(j, i) is the evidence that neuron i
 * Granger-causes neuron j.
 */
struct CausalEstimate {
  Matrix scores;
  Provenance provenance = Provenance::Attention;
  bool diagonal_zeroed = false;

  Index n() const { return scores.rows(); }
};

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/**
 * Collapse one head's (n h) x (n (c+1)) cross-attention into n x n: entry
 * (j, i) sums neuron i's (c+1)-wide column block over neuron j's h target rows.
 */
Matrix aggregate_history(const Matrix& attention, Index n);

/// Element-wise sum over heads.
Matrix aggregate_heads(std::span<const Matrix> per_head);

/// Head-summed, history-summed estimate for one sample.
Matrix aggregate_sample(std::span<const Matrix> per_head_attention, Index n);

/// Divide every row by its sum; throws NormalizationError for a zero row.
Matrix row_normalize(const Matrix& m);

/// Mean over samples, then row renormalization.
Matrix average_and_renormalize(std::span<const Matrix> per_sample);

/// Mean over models, diagonal replaced with zeros.
CausalEstimate average_models(std::span<const Matrix> per_model);

/// Running sum of per-sample estimates, so test passes need not keep every sample.
class SampleAccumulator {
 public:
  explicit SampleAccumulator(Index n) : sum_(Matrix::Zero(n, n)) {}

  void add(const Matrix& sample);
  Index count() const { return count_; }
  /// Mean over the added samples, row-renormalized.
  Matrix result() const;

 private:
  Matrix sum_;
  Index count_ = 0;
};

}  // namespace causalformer
