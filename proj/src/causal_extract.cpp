#include "causalformer/causal_extract.hpp"

#include "causalformer/errors.hpp"

namespace causalformer {

std::string to_string(Provenance p) { return p == Provenance::Attention ? "attention" : "var_f"; }

Provenance provenance_from_string(const std::string& s) {
  if (s == "attention") return Provenance::Attention;
  if (s == "var_f") return Provenance::VarF;
  throw ConfigError("unknown provenance '" + s + "'");
}

Matrix aggregate_history(const Matrix& attention, Index n) {
  if (n < 1 || attention.rows() % n != 0 || attention.cols() % n != 0 || attention.rows() == 0) {
    throw DimensionError("aggregate_history: " + std::to_string(attention.rows()) + "x" +
                         std::to_string(attention.cols()) + " attention is not divisible into " +
                         std::to_string(n) + " neuron blocks");
  }
  const Index h = attention.rows() / n;
  const Index w = attention.cols() / n;
  Matrix out(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) out(j, i) = attention.block(j * h, i * w, h, w).sum();
  return out;
}

Matrix aggregate_heads(std::span<const Matrix> per_head) {
  if (per_head.empty()) throw ConfigError("aggregate_heads needs at least one head");
  Matrix total = per_head.front();
  for (std::size_t k = 1; k < per_head.size(); ++k) {
    if (per_head[k].rows() != total.rows() || per_head[k].cols() != total.cols()) {
      throw DimensionError("aggregate_heads: head shapes differ");
    }
    total += per_head[k];
  }
  return total;
}

Matrix aggregate_sample(std::span<const Matrix> per_head_attention, Index n) {
  std::vector<Matrix> collapsed;
  collapsed.reserve(per_head_attention.size());
  for (const auto& a : per_head_attention) collapsed.push_back(aggregate_history(a, n));
  return aggregate_heads(collapsed);
}

Matrix row_normalize(const Matrix& m) {
  Matrix out = m;
  for (Index j = 0; j < m.rows(); ++j) {
    const double s = m.row(j).sum();
    if (!(s > 0)) throw NormalizationError("row " + std::to_string(j) + " has no mass to normalize");
    out.row(j) /= s;
  }
  return out;
}

Matrix average_and_renormalize(std::span<const Matrix> per_sample) {
  if (per_sample.empty()) throw ConfigError("need at least one sample");
  Matrix total = Matrix::Zero(per_sample.front().rows(), per_sample.front().cols());
  for (const auto& s : per_sample) {
    if (s.rows() != total.rows() || s.cols() != total.cols()) {
      throw DimensionError("average_and_renormalize: sample shapes differ");
    }
    total += s;
  }
  return row_normalize(total / static_cast<double>(per_sample.size()));
}

CausalEstimate average_models(std::span<const Matrix> per_model) {
  if (per_model.empty()) throw ConfigError("need at least one model");
  Matrix total = Matrix::Zero(per_model.front().rows(), per_model.front().cols());
  for (const auto& m : per_model) {
    if (m.rows() != total.rows() || m.cols() != total.cols()) {
      throw DimensionError("average_models: estimate shapes differ");
    }
    total += m;
  }
  CausalEstimate est;
  est.scores = total / static_cast<double>(per_model.size());
  est.scores.diagonal().setZero();
  est.diagonal_zeroed = true;
  est.provenance = Provenance::Attention;
  return est;
}

void SampleAccumulator::add(const Matrix& sample) {
  if (sample.rows() != sum_.rows() || sample.cols() != sum_.cols()) {
    throw DimensionError("sample estimate shape differs from accumulator");
  }
  sum_ += sample;
  ++count_;
}

Matrix SampleAccumulator::result() const {
  if (count_ == 0) throw ConfigError("no samples accumulated");
  return row_normalize(sum_ / static_cast<double>(count_));
}

}  // namespace causalformer
