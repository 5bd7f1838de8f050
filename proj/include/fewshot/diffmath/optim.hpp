// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "fewshot/diffmath/autodiff.hpp"

namespace fewshot {

struct NamedParam {
  std::string name;
  ad::Var var;
};

using ParamSet = std::vector<NamedParam>;

/// Name of the first parameter holding a non-finite value, or empty.
inline std::string first_non_finite(const ParamSet& params) {
  for (const auto& p : params)
    if (!p.var->value.all_finite()) return p.name;
  return {};
}

inline void zero_grads(const ParamSet& params) {
  for (const auto& p : params) p.var->grad.fill(0.0);
}

/// SGD with momentum and L2 weight decay.
class OptimState {
 public:
  OptimState(const ParamSet& params, double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(lr > 0.0)) fail(ErrorKind::config, "learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight decay must be >= 0");
    velocity_.reserve(params.size());
    for (const auto& p : params) velocity_.emplace_back(p.var->value.rows(), p.var->value.cols());
  }

  double lr() const noexcept { return lr_; }
  double momentum() const noexcept { return momentum_; }
  double weight_decay() const noexcept { return weight_decay_; }
  const std::vector<Matrix>& velocity() const noexcept { return velocity_; }
  std::vector<Matrix>& velocity() noexcept { return velocity_; }

  /// Multiplies the learning rate; used by step schedules between epochs.
  void decay_lr(double factor) { lr_ *= factor; }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<Matrix> velocity_;
};

/// v <- m*v + grad + wd*param; param <- param - lr*v; then zero the gradients.
inline void sgd_step(const ParamSet& params, OptimState& state) {
  auto& vel = state.velocity();
  if (vel.size() != params.size()) {
    fail(ErrorKind::state_corruption, "optimizer tracks " + std::to_string(vel.size()) +
                                          " velocities for " + std::to_string(params.size()) +
                                          " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& node = *params[k].var;
    if (!vel[k].same_shape(node.value)) {
      fail(ErrorKind::state_corruption, "velocity for '" + params[k].name + "' is " +
                                            vel[k].shape() + " but parameter is " +
                                            node.value.shape());
    }
    if (!node.grad.same_shape(node.value)) {
      fail(ErrorKind::state_corruption, "gradient for '" + params[k].name + "' has wrong shape");
    }
  }
  const double m = state.momentum();
  const double wd = state.weight_decay();
  const double lr = state.lr();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& node = *params[k].var;
    auto& v = vel[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = m * v[i] + node.grad[i] + wd * node.value[i];
      node.value[i] -= lr * v[i];
    }
    node.grad.fill(0.0);
  }
}

}  // namespace fewshot
