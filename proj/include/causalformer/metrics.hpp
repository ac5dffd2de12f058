#pragma once

#include <span>
#include <vector>

#include "causalformer/kernel/types.hpp"

namespace causalformer {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocResult {
  double auroc = 0.0;
  std::vector<RocPoint> curve;  // (0,0) first, (1,1) last, one point per distinct score
  Index positives = 0;
  Index negatives = 0;
};

/// Tie-corrected Mann-Whitney AUROC of flat scores against 0/1 labels.
RocResult roc(std::span<const double> scores, std::span<const int> labels);

/**
 * AUROC of an n x n score matrix against a 0/1 adjacency of the same
 * orientation. With `include_diagonal` the diagonal takes part with score and
 * label forced to 0; otherwise only the off-diagonal pairs are ranked.
 */
RocResult auroc(const Matrix& scores, const Eigen::MatrixXi& truth, bool include_diagonal = true);

}  // namespace causalformer
