#pragma once

#include <string>
#include <vector>

#include "causalformer/causal_extract.hpp"
#include "causalformer/kernel/types.hpp"

namespace causalformer {

/// Least-squares VAR(p) with intercept: x_t = c + sum_k A_k x_{t-k} + e_t.
struct VarFit {
  Index order = 0;
  std::vector<Matrix> coefficients;  // A_1..A_p, each n x n; A_k(j, i) multiplies x_{t-k, i} in equation j
  Vector intercept;
  Matrix sigma;      // residual covariance, scaled by 1 / t_eff
  Matrix residuals;  // t_eff x n
  Index t_eff = 0;
};

/**
 * Fit on rows [start, T) of `series` (T x n); rows before `start` only serve
 * as lags. `start` defaults to p.
 */
VarFit fit_var(const Matrix& series, Index p, Index start = -1);

enum class InformationCriterion { AIC, BIC };

std::string to_string(InformationCriterion c);
InformationCriterion information_criterion_from_string(const std::string& s);

/// Criterion value of one fit: ln det sigma + penalty (p n^2 + n) / t_eff.
double information_criterion(const VarFit& fit, InformationCriterion criterion);

struct OrderSelection {
  Index order = 0;
  std::vector<double> scores;  // index p-1; NaN for singular candidates
};

/// Orders 1..max_p, all fitted on the window that drops the first max_p rows.
OrderSelection select_order(const Matrix& series, Index max_p, InformationCriterion criterion);

struct GcMatrix {
  Matrix f;      // f(j, i): evidence for i -> j; diagonal zero
  Mask missing;  // entries whose reduced fit was singular (f is 0 there)
  std::vector<std::string> errors;
  Index order = 0;

  CausalEstimate estimate() const;
};

/**
 * Conditional Granger causality for every ordered pair:
 * f(j, i) = ln(sigma'_jj / sigma_jj), where sigma' is the residual covariance
 * after refitting without any lag of series i.
 */
GcMatrix pairwise_conditional_gc(const Matrix& series, Index p);

}  // namespace causalformer
