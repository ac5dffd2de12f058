#include "causalformer/var_baseline.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "causalformer/errors.hpp"

namespace causalformer {

namespace {

// Column-major working copies: the QR below is column oriented.
using ColMatrix = Eigen::MatrixXd;

ColMatrix lagged_design(const Matrix& series, Index p, Index start, const std::vector<Index>& sources) {
  const Index rows = series.rows() - start;
  const Index k = static_cast<Index>(sources.size());
  ColMatrix x(rows, 1 + k * p);
  x.col(0).setOnes();
  for (Index lag = 1; lag <= p; ++lag) {
    for (Index s = 0; s < k; ++s) {
      x.col(1 + (lag - 1) * k + s) = series.col(sources[static_cast<std::size_t>(s)]).segment(start - lag, rows);
    }
  }
  return x;
}

struct OlsResult {
  ColMatrix beta;
  ColMatrix residuals;
};

OlsResult ols(const ColMatrix& x, const ColMatrix& y, Index p) {
  Eigen::ColPivHouseholderQR<ColMatrix> qr(x);
  if (qr.rank() < x.cols()) {
    throw SingularityError("VAR(" + std::to_string(p) + ") regressors are rank deficient (rank " +
                           std::to_string(qr.rank()) + " of " + std::to_string(x.cols()) +
                           "); try a lower order");
  }
  OlsResult r;
  r.beta = qr.solve(y);
  r.residuals = y - x * r.beta;
  return r;
}

std::vector<Index> all_but(Index n, Index skip) {
  std::vector<Index> out;
  for (Index i = 0; i < n; ++i) {
    if (i != skip) out.push_back(i);
  }
  return out;
}

}  // namespace

VarFit fit_var(const Matrix& series, Index p, Index start) {
  if (p < 0) throw ConfigError("VAR order must be nonnegative");
  if (start < 0) start = p;
  if (start < p) throw ConfigError("VAR window start must leave room for p lags");
  const Index n = series.cols();
  const Index t_eff = series.rows() - start;
  if (n < 1) throw DimensionError("VAR series has no channels");
  if (t_eff <= n * p + 1) {
    throw ConfigError("VAR(" + std::to_string(p) + ") needs more than " + std::to_string(n * p + 1) +
                      " samples, got " + std::to_string(t_eff));
  }
  const ColMatrix x = lagged_design(series, p, start, all_but(n, -1));
  const ColMatrix y = series.bottomRows(t_eff);
  const auto ols_fit = ols(x, y, p);

  VarFit fit;
  fit.order = p;
  fit.t_eff = t_eff;
  fit.intercept = ols_fit.beta.row(0).transpose();
  for (Index lag = 1; lag <= p; ++lag) {
    fit.coefficients.emplace_back(ols_fit.beta.middleRows(1 + (lag - 1) * n, n).transpose());
  }
  fit.residuals = ols_fit.residuals;
  fit.sigma = ols_fit.residuals.transpose() * ols_fit.residuals / static_cast<double>(t_eff);
  fit.sigma = 0.5 * (fit.sigma + fit.sigma.transpose()).eval();
  return fit;
}

std::string to_string(InformationCriterion c) { return c == InformationCriterion::AIC ? "aic" : "bic"; }

InformationCriterion information_criterion_from_string(const std::string& s) {
  if (s == "aic" || s == "AIC") return InformationCriterion::AIC;
  if (s == "bic" || s == "BIC") return InformationCriterion::BIC;
  throw ConfigError("unknown information criterion '" + s + "'");
}

double information_criterion(const VarFit& fit, InformationCriterion criterion) {
  Eigen::LLT<Eigen::MatrixXd> llt(fit.sigma);
  if (llt.info() != Eigen::Success) {
    throw SingularityError("VAR(" + std::to_string(fit.order) + ") residual covariance is not positive definite");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const auto n = static_cast<double>(fit.sigma.rows());
  const auto t_eff = static_cast<double>(fit.t_eff);
  const double penalty = criterion == InformationCriterion::AIC ? 2.0 : std::log(t_eff);
  return log_det + penalty * (static_cast<double>(fit.order) * n * n + n) / t_eff;
}

OrderSelection select_order(const Matrix& series, Index max_p, InformationCriterion criterion) {
  if (max_p < 1) throw ConfigError("max_p must be at least 1");
  OrderSelection sel;
  double best = std::numeric_limits<double>::infinity();
  for (Index p = 1; p <= max_p; ++p) {
    double score = std::numeric_limits<double>::quiet_NaN();
    try {
      score = information_criterion(fit_var(series, p, max_p), criterion);
    } catch (const SingularityError&) {
    }
    sel.scores.push_back(score);
    if (score < best) {
      best = score;
      sel.order = p;
    }
  }
  if (sel.order == 0) throw SingularityError("every candidate VAR order up to " + std::to_string(max_p) + " is singular");
  return sel;
}

CausalEstimate GcMatrix::estimate() const {
  CausalEstimate e;
  e.scores = f;
  e.provenance = Provenance::VarF;
  e.diagonal_zeroed = true;
  return e;
}

GcMatrix pairwise_conditional_gc(const Matrix& series, Index p) {
  const Index n = series.cols();
  GcMatrix gc;
  gc.order = p;
  gc.f = Matrix::Zero(n, n);
  gc.missing = Mask::Constant(n, n, false);
  if (n < 2) return gc;

  const VarFit full = fit_var(series, p);
  const ColMatrix y = series.bottomRows(full.t_eff);
  for (Index i = 0; i < n; ++i) {
    try {
      const auto reduced = ols(lagged_design(series, p, p, all_but(n, i)), y, p);
      for (Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double reduced_var = reduced.residuals.col(j).squaredNorm() / static_cast<double>(full.t_eff);
        gc.f(j, i) = std::max(0.0, std::log(reduced_var / full.sigma(j, j)));
      }
    } catch (const SingularityError& e) {
      for (Index j = 0; j < n; ++j) gc.missing(j, i) = j != i;
      gc.errors.push_back("source " + std::to_string(i) + ": " + e.what());
    }
  }
  return gc;
}

}  // namespace causalformer
