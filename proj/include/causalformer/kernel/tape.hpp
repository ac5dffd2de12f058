#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "causalformer/errors.hpp"
#include "causalformer/kernel/param_store.hpp"
#include "causalformer/kernel/types.hpp"

namespace causalformer {

template <typename Scalar>
class BasicTape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class BasicTensor {
 public:
  using Mat = MatrixX<Scalar>;

  BasicTensor() = default;
  BasicTensor(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  BasicTape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Mat& value() const { return tape_->value(id_); }
  const Mat& grad() const { return tape_->grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/**
 * Reverse-mode autodiff tape. Every op appends one node holding its forward
 * value and a closure that pushes the upstream gradient into its inputs.
 * backward() walks the nodes in reverse creation order, so gradient
 * accumulation order is fixed for a given forward program.
 */
template <typename Scalar>
class BasicTape {
 public:
  using Mat = MatrixX<Scalar>;
  using Tensor = BasicTensor<Scalar>;
  using Store = BasicParamStore<Scalar>;
  using BackwardFn = std::function<void(const Mat& upstream, BasicTape& tape)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Tensor constant(Mat value) { return push(std::move(value), false, nullptr); }

  /// Free leaf that receives a gradient (used by tests and oracles).
  Tensor variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a named parameter; each call records a fresh node.
  Tensor parameter(Store& store, const std::string& name) {
    auto& p = store.at(name);
    auto t = push(p.value, true, nullptr);
    nodes_[t.id()].param = &p;
    nodes_[t.id()].store = &store;
    return t;
  }

  /// Append an op result. `fn` is dropped when no input requires a gradient.
  Tensor record(Mat value, std::initializer_list<Tensor> inputs, BackwardFn fn) {
#ifndef NDEBUG
    if (!value.allFinite()) throw DivergenceError("non-finite value produced by a forward op");
#endif
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id());
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Mat& value(std::size_t id) const { return nodes_.at(id).value; }

  const Mat& grad(std::size_t id) const {
    const auto& n = nodes_.at(id);
    if (!n.has_grad) {
      zero_cache_ = Mat::Zero(n.value.rows(), n.value.cols());
      return zero_cache_;
    }
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Add `g` into the gradient of node `id`; no-op for constants.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    // g never references this node's own gradient, so evaluation can skip the temporary.
    if (!n.has_grad) {
      n.grad.resize(g.rows(), g.cols());
      n.grad.noalias() = g;
      n.has_grad = true;
    } else {
      n.grad.noalias() += g;
    }
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /**
   * Propagate d(loss)/d(node) for a 1x1 loss. Parameter gradients are then
   * added to every store referenced on the tape; each such store must have
   * been zeroed since its last backward pass.
   */
  void backward(const Tensor& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw DimensionError("backward needs a scalar loss");
    std::vector<Store*> stores;
    for (const auto& n : nodes_) {
      if (n.store != nullptr && std::find(stores.begin(), stores.end(), n.store) == stores.end()) {
        stores.push_back(n.store);
      }
    }
    for (auto* s : stores) s->begin_accumulation();

    for (auto& n : nodes_) {
      n.has_grad = false;
    }
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(n.grad, *this);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  /// Same contract as BasicTape::backward; named for call sites that pass the store.
  void backward(const Tensor& loss, Store& store) {
    bool references = false;
    for (const auto& n : nodes_) references = references || n.store == &store;
    if (!references) store.begin_accumulation();
    backward(loss);
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    BasicParameter<Scalar>* param = nullptr;
    Store* store = nullptr;
  };

  Tensor push(Mat value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.size() - 1);
  }

  // A deque keeps references from value() valid while later ops append nodes.
  std::deque<Node> nodes_;
  mutable Mat zero_cache_;
};

using Tape = BasicTape<double>;
using Tensor = BasicTensor<double>;

}  // namespace causalformer
