#pragma once

#include <cmath>

#include "causalformer/errors.hpp"
#include "causalformer/kernel/param_store.hpp"

namespace causalformer {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

/**
 * One AdamW update over every parameter in lexicographic order.
 *
 * The weight decay is decoupled: theta <- theta - lr * wd * theta is applied
 * first, then the bias-corrected adaptive step
 * theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
 */
template <typename Scalar>
void adamw_step(BasicParamStore<Scalar>& store, const AdamWConfig& cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("learning rate must be positive");
  if (cfg.weight_decay < 0) throw ConfigError("weight decay must be nonnegative");
  if (!store.gradients_populated()) throw GradientStateError("adamw_step called before backward");
  store.increment_step();
  const auto t = static_cast<double>(store.step_count());
  const Scalar bc1 = Scalar(1 - std::pow(cfg.beta1, t));
  const Scalar bc2 = Scalar(1 - std::pow(cfg.beta2, t));
  const Scalar lr = Scalar(cfg.lr);
  const Scalar b1 = Scalar(cfg.beta1);
  const Scalar b2 = Scalar(cfg.beta2);
  const Scalar eps = Scalar(cfg.eps);
  const Scalar decay = Scalar(1) - lr * Scalar(cfg.weight_decay);
  for (auto& [name, p] : store) {
    p.value *= decay;
    p.m = b1 * p.m + (Scalar(1) - b1) * p.grad;
    p.v = b2 * p.v + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + eps);
  }
}

}  // namespace causalformer
