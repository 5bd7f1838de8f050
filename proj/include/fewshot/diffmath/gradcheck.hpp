// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fewshot/diffmath/optim.hpp"

namespace fewshot {

struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double tolerance = 0.0;

  bool passed() const {
    return std::none_of(params.begin(), params.end(), [](const auto& p) { return p.flagged; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
  std::vector<std::string> flagged_names() const {
    std::vector<std::string> out;
    for (const auto& p : params)
      if (p.flagged) out.push_back(p.name);
    return out;
  }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares backward() against central differences for every entry of every
/// parameter. `build` must rebuild the loss from the parameters' current values.
inline GradCheckReport grad_check(const std::function<ad::Var()>& build, const ParamSet& params,
                                  double h = 1e-4, double tol = 1e-4) {
  auto eval = [&] { return build()->value[0]; };

  const double first = eval();
  const double second = eval();
  if (first != second) {
    fail(ErrorKind::determinism, "grad_check: loss builder is not deterministic (" +
                                     std::to_string(first) + " vs " + std::to_string(second) +
                                     ")");
  }

  zero_grads(params);
  auto loss = build();
  ad::backward(loss);
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.var->grad);
  zero_grads(params);

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ParamGradError err;
    err.name = params[k].name;
    auto& value = params[k].var->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + h;
      const double up = eval();
      value[i] = orig - h;
      const double down = eval();
      value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = relative_error(analytic[k][i], numeric);
      if (i == 0 || rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = i;
        err.analytic = analytic[k][i];
        err.numeric = numeric;
      }
    }
    err.flagged = err.max_rel_error > tol;
    report.params.push_back(err);
  }
  return report;
}

}  // namespace fewshot
