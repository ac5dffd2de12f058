#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "causalformer/errors.hpp"
#include "causalformer/kernel/rng.hpp"
#include "causalformer/kernel/tape.hpp"

namespace causalformer {

namespace detail {

inline std::string shape_str(Index r, Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                         " vs " + shape_str(b.rows(), b.cols()));
  }
}

/// Row softmax in place. -inf entries become exactly zero.
template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  for (Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const Scalar mx = row.maxCoeff();
    if (mx == neg_inf) throw MaskingError("softmax row " + std::to_string(i) + " is fully masked");
    Scalar total = 0;
    for (Index j = 0; j < row.size(); ++j) {
      const Scalar e = row(j) == neg_inf ? Scalar(0) : std::exp(row(j) - mx);
      row(j) = e;
      total += e;
    }
    row /= total;
  }
}

}  // namespace detail

/// c = a b, reduction over the shared dimension.
template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + detail::shape_str(a.rows(), a.cols()) +
                         " x " + detail::shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> c = a.value() * b.value();
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(std::move(c), {a, b}, [ia, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    if (t.wants_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.wants_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b},
                         [ia, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, g);
                         });
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b},
                         [ia, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, -g);
                         });
}

/// Element-wise product.
template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto ia = a.id();
  const auto ib = b.id();
  MatrixX<Scalar> c = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(c), {a, b}, [ia, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    if (t.wants_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.wants_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar s) {
  const auto ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    t.accumulate(ia, g * s);
  });
}

/// x + 1 b, broadcasting the 1xc row `b` over the rows of x.
template <typename Scalar>
BasicTensor<Scalar> add_bias(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_bias: bias " + detail::shape_str(b.rows(), b.cols()) + " for input " +
                         detail::shape_str(x.rows(), x.cols()));
  }
  const auto ix = x.id();
  const auto ib = b.id();
  MatrixX<Scalar> y = x.value().rowwise() + b.value().row(0);
  return x.tape().record(std::move(y), {x, b}, [ix, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    t.accumulate(ix, g);
    if (t.wants_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

/// x W + b with W: in x out and b: 1 x out.
template <typename Scalar>
BasicTensor<Scalar> linear(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& w,
                           const BasicTensor<Scalar>& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw DimensionError("linear: input " + detail::shape_str(x.rows(), x.cols()) + ", weight " +
                         detail::shape_str(w.rows(), w.cols()) + ", bias " + detail::shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> y(x.rows(), w.cols());
  y.noalias() = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  const auto ix = x.id();
  const auto iw = w.id();
  const auto ib = b.id();
  return x.tape().record(std::move(y), {x, w, b}, [ix, iw, ib](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    if (t.wants_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.wants_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (t.wants_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

template <typename Scalar>
BasicTensor<Scalar> relu(const BasicTensor<Scalar>& x) {
  const auto ix = x.id();
  MatrixX<Scalar> y = x.value().cwiseMax(Scalar(0));
  return x.tape().record(std::move(y), {x}, [ix](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    t.accumulate(ix, (t.value(ix).array() > Scalar(0)).select(g, Scalar(0)));
  });
}

/// Sum of all entries as a 1x1 tensor.
template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x) {
  const auto ix = x.id();
  const Index r = x.rows();
  const Index c = x.cols();
  MatrixX<Scalar> s(1, 1);
  s(0, 0) = x.value().sum();
  return x.tape().record(std::move(s), {x}, [ix, r, c](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    t.accumulate(ix, MatrixX<Scalar>::Constant(r, c, g(0, 0)));
  });
}

/// Mean of squared differences against a fixed target, as a 1x1 tensor.
template <typename Scalar, typename Derived>
BasicTensor<Scalar> mse_loss(const BasicTensor<Scalar>& pred, const Eigen::MatrixBase<Derived>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw DimensionError("mse_loss: prediction " + detail::shape_str(pred.rows(), pred.cols()) +
                         " vs target " + detail::shape_str(target.rows(), target.cols()));
  }
  auto diff = std::make_shared<MatrixX<Scalar>>(pred.value() - target);
  const Scalar count = static_cast<Scalar>(diff->size());
  MatrixX<Scalar> loss(1, 1);
  loss(0, 0) = diff->squaredNorm() / count;
  const auto ip = pred.id();
  return pred.tape().record(std::move(loss), {pred},
                            [ip, diff, count](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
                              t.accumulate(ip, (*diff) * (Scalar(2) * g(0, 0) / count));
                            });
}

/// Row-wise softmax; -inf logits receive exactly zero weight.
template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x) {
  MatrixX<Scalar> y = x.value();
  detail::softmax_rows_inplace(y);
  const auto ix = x.id();
  auto y_keep = std::make_shared<MatrixX<Scalar>>(y);
  return x.tape().record(std::move(y), {x}, [ix, y_keep](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    const auto& p = *y_keep;
    VectorX<Scalar> dot = g.cwiseProduct(p).rowwise().sum();
    t.accumulate(ix, p.cwiseProduct(g - dot.replicate(1, g.cols())));
  });
}

/**
 * Per-row layer normalization over the last dimension with population
 * variance, followed by an affine map with 1xd gain and bias.
 */
template <typename Scalar>
BasicTensor<Scalar> layer_norm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain,
                               const BasicTensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  const Index d = x.cols();
  if (d < 2) throw DimensionError("layer_norm needs at least 2 features");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  const auto& xv = x.value();
  auto xhat = std::make_shared<MatrixX<Scalar>>(xv.rows(), d);
  auto inv_std = std::make_shared<VectorX<Scalar>>(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    const Scalar mean = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mean).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (xv.row(i).array() - mean) * is;
  }
  MatrixX<Scalar> y = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() +
                      bias.value().row(0).array();
  const auto ix = x.id();
  const auto ig = gain.id();
  const auto ib = bias.id();
  return x.tape().record(
      std::move(y), {x, gain, bias},
      [ix, ig, ib, xhat, inv_std, d](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
        if (t.wants_grad(ig)) t.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
        if (t.wants_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.wants_grad(ix)) return;
        MatrixX<Scalar> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
        MatrixX<Scalar> dx(dxhat.rows(), d);
        for (Index i = 0; i < dxhat.rows(); ++i) {
          const Scalar m1 = dxhat.row(i).mean();
          const Scalar m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
          dx.row(i) = (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv_std)(i);
        }
        t.accumulate(ix, dx);
      });
}

/// Inverted dropout. Identity when `training` is false or p == 0.
template <typename Scalar>
BasicTensor<Scalar> dropout(const BasicTensor<Scalar>& x, Scalar p, bool training, Rng& rng) {
  if (p < 0 || p >= 1) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0) return x;
  const Scalar keep_scale = Scalar(1) / (Scalar(1) - p);
  auto mask = std::make_shared<MatrixX<Scalar>>(x.rows(), x.cols());
  for (Index i = 0; i < mask->size(); ++i) {
    mask->data()[i] = rng.uniform() < p ? Scalar(0) : keep_scale;
  }
  const auto ix = x.id();
  return x.tape().record(x.value().cwiseProduct(*mask), {x},
                         [ix, mask](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
                           t.accumulate(ix, g.cwiseProduct(*mask));
                         });
}

/// [a | b] along columns.
template <typename Scalar>
BasicTensor<Scalar> concat_cols(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row counts differ");
  const Index ca = a.cols();
  const Index cb = b.cols();
  MatrixX<Scalar> y(a.rows(), ca + cb);
  y << a.value(), b.value();
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib, ca, cb](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
    if (t.wants_grad(ia)) t.accumulate(ia, g.leftCols(ca));
    if (t.wants_grad(ib)) t.accumulate(ib, g.rightCols(cb));
  });
}

/// Row lookup into an embedding table; the backward pass scatter-adds.
template <typename Scalar>
BasicTensor<Scalar> gather_rows(const BasicTensor<Scalar>& table, const std::vector<Index>& ids) {
  const Index n = table.rows();
  MatrixX<Scalar> y(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= n) {
      throw IndexError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(n) + " rows");
    }
    y.row(static_cast<Index>(r)) = table.value().row(ids[r]);
  }
  const auto it = table.id();
  const Index cols = table.cols();
  return table.tape().record(std::move(y), {table},
                             [it, ids, n, cols](const MatrixX<Scalar>& g, BasicTape<Scalar>& t) {
                               MatrixX<Scalar> dt = MatrixX<Scalar>::Zero(n, cols);
                               for (std::size_t r = 0; r < ids.size(); ++r) {
                                 dt.row(ids[r]) += g.row(static_cast<Index>(r));
                               }
                               t.accumulate(it, dt);
                             });
}

/// Layout of a batched multi-head attention call.
struct AttentionShape {
  Index batch = 1;
  Index heads = 1;
  Index head_dim = 1;
  /// Contiguous token groups per sample; queries of group g see only keys of group g.
  Index groups = 1;
};

/**
 * Batched multi-head scaled dot-product attention.
 *
 * q is (batch*Lq) x (heads*head_dim), k and v are (batch*Lk) x (heads*head_dim);
 * sample b occupies a contiguous row block and head h a contiguous column
 * block. Per (b, h): P = softmax(Q K^T / sqrt(head_dim)) with -inf where
 * `mask` is false, output block = P V.
 *
 * With groups > 1 the scores are only formed inside the diagonal
 * (Lq/groups) x (Lk/groups) blocks; entries outside them are exactly zero,
 * the same result as a block-diagonal mask at a fraction of the cost.
 * When `weights` is non-null the full Lq x Lk matrices P are appended in
 * (b, h) order.
 */
template <typename Scalar>
BasicTensor<Scalar> attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                              const BasicTensor<Scalar>& v, AttentionShape shape, const Mask* mask,
                              std::vector<MatrixX<Scalar>>* weights = nullptr) {
  const Index B = shape.batch;
  const Index H = shape.heads;
  const Index dh = shape.head_dim;
  const Index G = shape.groups;
  if (B < 1 || H < 1 || dh < 1 || G < 1) throw DimensionError("attention: invalid shape");
  if (q.rows() % B != 0 || k.rows() % B != 0) throw DimensionError("attention: rows not divisible by batch");
  if (q.cols() != H * dh || k.cols() != H * dh || v.cols() != H * dh) {
    throw DimensionError("attention: expected " + std::to_string(H * dh) + " feature columns");
  }
  if (v.rows() != k.rows()) throw DimensionError("attention: key/value row counts differ");
  const Index Lq = q.rows() / B;
  const Index Lk = k.rows() / B;
  if (Lq % G != 0 || Lk % G != 0) throw DimensionError("attention: token counts not divisible by groups");
  const Index gq = Lq / G;
  const Index gk = Lk / G;
  if (mask != nullptr && (mask->rows() != Lq || mask->cols() != Lk)) {
    throw DimensionError("attention: mask " + detail::shape_str(mask->rows(), mask->cols()) +
                         " for " + detail::shape_str(Lq, Lk) + " scores");
  }
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  // probs[(b * H + h) * G + g] is the gq x gk softmax block.
  auto probs = std::make_shared<std::vector<MatrixX<Scalar>>>();
  probs->reserve(static_cast<std::size_t>(B * H * G));
  MatrixX<Scalar> out(B * Lq, H * dh);
  for (Index b = 0; b < B; ++b) {
    for (Index h = 0; h < H; ++h) {
      for (Index g = 0; g < G; ++g) {
        const Index qo = b * Lq + g * gq;
        const Index ko = b * Lk + g * gk;
        MatrixX<Scalar> s = Q.block(qo, h * dh, gq, dh).lazyProduct(K.block(ko, h * dh, gk, dh).transpose());
        s *= scale_factor;
        if (mask != nullptr) {
          for (Index i = 0; i < gq; ++i)
            for (Index j = 0; j < gk; ++j)
              if (!(*mask)(g * gq + i, g * gk + j)) s(i, j) = neg_inf;
        }
        detail::softmax_rows_inplace(s);
        out.block(qo, h * dh, gq, dh).noalias() = s.lazyProduct(V.block(ko, h * dh, gk, dh));
        probs->push_back(std::move(s));
      }
    }
  }
  if (weights != nullptr) {
    for (Index b = 0; b < B; ++b) {
      for (Index h = 0; h < H; ++h) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(Lq, Lk);
        for (Index g = 0; g < G; ++g) {
          full.block(g * gq, g * gk, gq, gk) = (*probs)[static_cast<std::size_t>((b * H + h) * G + g)];
        }
        weights->push_back(std::move(full));
      }
    }
  }

  const auto iq = q.id();
  const auto ik = k.id();
  const auto iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [=](const MatrixX<Scalar>& grad_out, BasicTape<Scalar>& t) {
        const auto& Qv = t.value(iq);
        const auto& Kv = t.value(ik);
        const auto& Vv = t.value(iv);
        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(Qv.rows(), Qv.cols());
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(Kv.rows(), Kv.cols());
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(Vv.rows(), Vv.cols());
        for (Index b = 0; b < B; ++b) {
          for (Index h = 0; h < H; ++h) {
            for (Index g = 0; g < G; ++g) {
              const Index qo = b * Lq + g * gq;
              const Index ko = b * Lk + g * gk;
              const auto& p = (*probs)[static_cast<std::size_t>((b * H + h) * G + g)];
              const auto go = grad_out.block(qo, h * dh, gq, dh);
              dv.block(ko, h * dh, gk, dh).noalias() += p.transpose().lazyProduct(go);
              MatrixX<Scalar> dp = go.lazyProduct(Vv.block(ko, h * dh, gk, dh).transpose());
              VectorX<Scalar> dot = dp.cwiseProduct(p).rowwise().sum();
              MatrixX<Scalar> ds = p.cwiseProduct(dp - dot.replicate(1, gk)) * scale_factor;
              dq.block(qo, h * dh, gq, dh).noalias() += ds.lazyProduct(Kv.block(ko, h * dh, gk, dh));
              dk.block(ko, h * dh, gk, dh).noalias() += ds.transpose().lazyProduct(Qv.block(qo, h * dh, gq, dh));
            }
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

}  // namespace causalformer
