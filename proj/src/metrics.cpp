#include "causalformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "causalformer/errors.hpp"

namespace causalformer {

RocResult roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc: scores and labels differ in length");
  RocResult r;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] != 0 && labels[k] != 1) throw ConfigError("roc: labels must be 0 or 1");
    if (std::isnan(scores[k])) throw ConfigError("roc: scores contain NaN");
    (labels[k] ? r.positives : r.negatives) += 1;
  }
  if (r.positives == 0 || r.negatives == 0) {
    throw UndefinedAurocError("AUROC needs at least one positive and one negative (got " +
                              std::to_string(r.positives) + " and " + std::to_string(r.negatives) + ")");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Walk tie groups from the highest score down. Each group adds one curve
  // point and contributes its positives x the negatives ranked below it, plus
  // half of the within-group positive/negative pairs.
  const auto p = static_cast<double>(r.positives);
  const auto n = static_cast<double>(r.negatives);
  double tp = 0.0;
  double fp = 0.0;
  double concordant = 0.0;
  r.curve.push_back({0.0, 0.0});
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    double group_pos = 0.0;
    double group_neg = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[g]]) {
      (labels[order[end]] ? group_pos : group_neg) += 1.0;
      ++end;
    }
    concordant += group_pos * (n - fp - group_neg) + 0.5 * group_pos * group_neg;
    tp += group_pos;
    fp += group_neg;
    r.curve.push_back({fp / n, tp / p});
    g = end;
  }
  r.auroc = concordant / (p * n);
  return r;
}

RocResult auroc(const Matrix& scores, const Eigen::MatrixXi& truth, bool include_diagonal) {
  if (scores.rows() != scores.cols() || truth.rows() != scores.rows() || truth.cols() != scores.cols()) {
    throw DimensionError("auroc: scores and truth must be matching square matrices");
  }
  const Index n = scores.rows();
  std::vector<double> flat_scores;
  std::vector<int> flat_labels;
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) {
      if (i == j) {
        if (!include_diagonal) continue;
        flat_scores.push_back(0.0);
        flat_labels.push_back(0);
        continue;
      }
      flat_scores.push_back(scores(j, i));
      flat_labels.push_back(truth(j, i) != 0 ? 1 : 0);
    }
  }
  return roc(flat_scores, flat_labels);
}

}  // namespace causalformer
