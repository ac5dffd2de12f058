#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "causalformer/errors.hpp"
#include "causalformer/kernel/types.hpp"

namespace causalformer {

/// A learnable array with its gradient accumulator and AdamW moments.
template <typename Scalar>
struct BasicParameter {
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  MatrixX<Scalar> m;
  MatrixX<Scalar> v;
};

/**
 * Named parameters. Iteration is lexicographic by name (std::map order), which
 * fixes the optimizer traversal and the checkpoint layout.
 *
 * The store tracks whether its gradients hold the result of a backward pass;
 * a second backward before zero_grad() is rejected.
 */
template <typename Scalar>
class BasicParamStore {
 public:
  using Parameter = BasicParameter<Scalar>;
  using Mat = MatrixX<Scalar>;
  using Map = std::map<std::string, Parameter>;

  Parameter& add(const std::string& name, Mat init) {
    if (entries_.count(name) != 0) throw ConfigError("duplicate parameter '" + name + "'");
    const Index r = init.rows();
    const Index c = init.cols();
    auto& p = entries_[name];
    p.value = std::move(init);
    p.grad = Mat::Zero(r, c);
    p.m = Mat::Zero(r, c);
    p.v = Mat::Zero(r, c);
    return p;
  }

  Parameter& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [name, p] : entries_) n += p.value.size();
    return n;
  }

  typename Map::iterator begin() { return entries_.begin(); }
  typename Map::iterator end() { return entries_.end(); }
  typename Map::const_iterator begin() const { return entries_.begin(); }
  typename Map::const_iterator end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& [name, p] : entries_) p.grad.setZero();
    gradients_populated_ = false;
  }

  bool gradients_populated() const { return gradients_populated_; }

  /// Called by the tape when a backward pass writes into this store.
  void begin_accumulation() {
    if (gradients_populated_) {
      throw GradientStateError("backward called twice without zero_grad()");
    }
    gradients_populated_ = true;
  }

  std::int64_t step_count() const { return step_count_; }
  void increment_step() { ++step_count_; }

  /// Copy parameter values from another store with the same layout.
  void assign_values(const BasicParamStore& other) {
    for (auto& [name, p] : entries_) {
      const auto& src = other.at(name);
      if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols()) {
        throw DimensionError("shape mismatch for parameter '" + name + "'");
      }
      p.value = src.value;
    }
  }

 private:
  Map entries_;
  bool gradients_populated_ = false;
  std::int64_t step_count_ = 0;
};

using Parameter = BasicParameter<double>;
using ParamStore = BasicParamStore<double>;

}  // namespace causalformer
