// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reverse-mode differentiation over dense rank-2 matrices.
//
// A graph is built eagerly: every primitive computes its value immediately
// and, when any input requires a gradient, records its parents plus a rule
// that pushes the node's gradient into theirs. backward() walks the nodes
// reachable from a scalar loss in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fewshot/diffmath/matrix.hpp"

namespace fewshot::ad {

struct Node;
using Var = std::shared_ptr<Node>;
using BackwardRule = std::function<void(const Node&)>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated (zeros) only when requires_grad
  std::string op;
  std::vector<Var> parents;
  BackwardRule rule;
  bool requires_grad = false;

  bool is_leaf() const noexcept { return !rule; }
};

/// Trainable leaf.
inline Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->grad = Matrix(value.rows(), value.cols());
  n->value = std::move(value);
  n->op = "parameter";
  n->requires_grad = true;
  return n;
}

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return n;
}

inline Var scalar_constant(double v) { return constant(Matrix(1, 1, v)); }

/// Extension point for custom primitives. `rule` runs only when some parent
/// requires a gradient; it must accumulate into each such parent's grad.
inline Var make_node(std::string op, Matrix value, std::vector<Var> parents, BackwardRule rule) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->grad = Matrix(value.rows(), value.cols());
    n->parents = std::move(parents);
    n->rule = std::move(rule);
  }
  n->value = std::move(value);
  return n;
}

namespace detail {

inline void require_conformable(bool ok, std::string_view op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    fail(ErrorKind::dimension,
         std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

inline void require_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    fail(ErrorKind::usage, "dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
}

// c += a * b^T
inline void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) += dot(arow, b.row(j));
  }
}

// c += a^T * b
inline void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
}

// c += a * b
inline void gemm_nn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
}

inline std::vector<double> row_norms(const Matrix& x, std::string_view op) {
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = norm2(x.row(i));
    if (!std::isfinite(norms[i])) {
      fail(ErrorKind::numeric, std::string(op) + ": row " + std::to_string(i) + " has non-finite norm");
    }
    if (!(norms[i] > 0.0)) {
      fail(ErrorKind::degenerate_input,
           std::string(op) + ": row " + std::to_string(i) + " has zero norm");
    }
  }
  return norms;
}

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

/// a (n×k) · b (k×m)
inline Var matmul(const Var& a, const Var& b) {
  detail::require_conformable(a->value.cols() == b->value.rows(), "matmul", a->value, b->value);
  Matrix out = fewshot::matmul(a->value, b->value);
  return make_node("matmul", std::move(out), {a, b}, [](const Node& self) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    if (a->requires_grad) detail::gemm_nt_acc(self.grad, b->value, a->grad);
    if (b->requires_grad) detail::gemm_tn_acc(a->value, self.grad, b->grad);
  });
}

/// a (n×k) · bᵀ where b is (m×k)
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_conformable(a->value.cols() == b->value.cols(), "matmul_nt", a->value,
                              b->value);
  Matrix out(a->value.rows(), b->value.rows());
  detail::gemm_nt_acc(a->value, b->value, out);
  return make_node("matmul_nt", std::move(out), {a, b}, [](const Node& self) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    if (a->requires_grad) detail::gemm_nn_acc(self.grad, b->value, a->grad);
    if (b->requires_grad) detail::gemm_tn_acc(self.grad, a->value, b->grad);
  });
}

/// Elementwise sum. `b` may also be a single row broadcast over a's rows.
inline Var add(const Var& a, const Var& b) {
  const Matrix& av = a->value;
  const Matrix& bv = b->value;
  const bool broadcast = !av.same_shape(bv) && bv.rows() == 1 && bv.cols() == av.cols();
  detail::require_conformable(av.same_shape(bv) || broadcast, "add", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto orow = out.row(i);
    auto brow = bv.row(broadcast ? 0 : i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] += brow[j];
  }
  return make_node("add", std::move(out), {a, b}, [broadcast](const Node& self) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    if (a->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
    if (b->requires_grad) {
      for (std::size_t i = 0; i < self.grad.rows(); ++i) {
        auto g = self.grad.row(i);
        auto bg = b->grad.row(broadcast ? 0 : i);
        for (std::size_t j = 0; j < g.size(); ++j) bg[j] += g[j];
      }
    }
  });
}

/// Elementwise product. `b` may also be a single row broadcast over a's rows.
inline Var hadamard(const Var& a, const Var& b) {
  const Matrix& av = a->value;
  const Matrix& bv = b->value;
  const bool broadcast = !av.same_shape(bv) && bv.rows() == 1 && bv.cols() == av.cols();
  detail::require_conformable(av.same_shape(bv) || broadcast, "hadamard", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto orow = out.row(i);
    auto brow = bv.row(broadcast ? 0 : i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] *= brow[j];
  }
  return make_node("hadamard", std::move(out), {a, b}, [broadcast](const Node& self) {
    const Var& a = self.parents[0];
    const Var& b = self.parents[1];
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
      auto g = self.grad.row(i);
      auto arow = a->value.row(i);
      const std::size_t bi = broadcast ? 0 : i;
      auto brow = b->value.row(bi);
      if (a->requires_grad) {
        auto ag = a->grad.row(i);
        for (std::size_t j = 0; j < g.size(); ++j) ag[j] += g[j] * brow[j];
      }
      if (b->requires_grad) {
        auto bg = b->grad.row(bi);
        for (std::size_t j = 0; j < g.size(); ++j) bg[j] += g[j] * arow[j];
      }
    }
  });
}

/// x scaled by a 1×1 node.
inline Var scale(const Var& x, const Var& s) {
  if (s->value.rows() != 1 || s->value.cols() != 1) {
    fail(ErrorKind::dimension, "scale: factor must be 1x1, got " + s->value.shape());
  }
  const double f = s->value[0];
  Matrix out = x->value;
  for (double& v : out.data()) v *= f;
  return make_node("scale", std::move(out), {x, s}, [](const Node& self) {
    const Var& x = self.parents[0];
    const Var& s = self.parents[1];
    if (x->requires_grad) {
      const double f = s->value[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += f * self.grad[i];
    }
    if (s->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x->value[i];
      s->grad[0] += acc;
    }
  });
}

/// alpha·x + beta with constant coefficients.
inline Var affine(const Var& x, double alpha, double beta = 0.0) {
  Matrix out = x->value;
  for (double& v : out.data()) v = alpha * v + beta;
  return make_node("affine", std::move(out), {x}, [alpha](const Node& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += alpha * self.grad[i];
  });
}

inline Var scale(const Var& x, double f) { return affine(x, f, 0.0); }

inline Var row_l2_normalize(const Var& x) {
  const auto norms = detail::row_norms(x->value, "row_l2_normalize");
  Matrix out = x->value;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v /= norms[i];
  return make_node("row_l2_normalize", std::move(out), {x}, [norms](const Node& self) {
    auto& xg = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.value.rows(); ++i) {
      auto y = self.value.row(i);
      auto g = self.grad.row(i);
      const double yg = dot(y, g);
      auto dst = xg.row(i);
      for (std::size_t j = 0; j < y.size(); ++j) dst[j] += (g[j] - y[j] * yg) / norms[i];
    }
  });
}

inline Var sigmoid(const Var& x) {
  Matrix out = x->value;
  for (double& v : out.data()) v = detail::stable_sigmoid(v);
  return make_node("sigmoid", std::move(out), {x}, [](const Node& self) {
    auto& xg = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      xg[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Var relu(const Var& x) {
  Matrix out = x->value;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_node("relu", std::move(out), {x}, [](const Node& self) {
    const Var& x = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (x->value[i] > 0.0) x->grad[i] += self.grad[i];
  });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
/// `train` is false. The mask is a pure function of `seed`.
inline Var dropout(const Var& x, double rate, bool train, std::uint64_t seed) {
  detail::require_rate(rate);
  if (!train || rate == 0.0) return x;
  std::mt19937_64 engine(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  Matrix mask(x->value.rows(), x->value.cols());
  for (double& m : mask.data()) m = keep(engine) ? inv : 0.0;
  Matrix out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_node("dropout", std::move(out), {x}, [mask = std::move(mask)](const Node& self) {
    auto& xg = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) xg[i] += self.grad[i] * mask[i];
  });
}

/// Softmax over each row, computed with the row maximum subtracted.
inline Var row_softmax(const Var& x) {
  Matrix out = x->value;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : r) v /= z;
  }
  return make_node("row_softmax", std::move(out), {x}, [](const Node& self) {
    auto& xg = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.value.rows(); ++i) {
      auto y = self.value.row(i);
      auto g = self.grad.row(i);
      const double yg = dot(y, g);
      auto dst = xg.row(i);
      for (std::size_t j = 0; j < y.size(); ++j) dst[j] += y[j] * (g[j] - yg);
    }
  });
}

/// Pairwise cosine similarities: out(i, j) = cos(x_i, y_j).
inline Var cosine_rows(const Var& x, const Var& y) {
  detail::require_conformable(x->value.cols() == y->value.cols(), "cosine_rows", x->value,
                              y->value);
  const auto nx = detail::row_norms(x->value, "cosine_rows");
  const auto ny = detail::row_norms(y->value, "cosine_rows");
  Matrix xh = x->value;
  Matrix yh = y->value;
  for (std::size_t i = 0; i < xh.rows(); ++i)
    for (double& v : xh.row(i)) v /= nx[i];
  for (std::size_t i = 0; i < yh.rows(); ++i)
    for (double& v : yh.row(i)) v /= ny[i];
  Matrix out(xh.rows(), yh.rows());
  detail::gemm_nt_acc(xh, yh, out);
  return make_node(
      "cosine_rows", std::move(out), {x, y},
      [xh = std::move(xh), yh = std::move(yh), nx, ny](const Node& self) {
        const Var& x = self.parents[0];
        const Var& y = self.parents[1];
        // Project the gradient w.r.t. the unit vectors back through the normalization.
        auto push = [](const Matrix& unit, const Matrix& dunit, const std::vector<double>& norms,
                       Matrix& dst) {
          for (std::size_t i = 0; i < unit.rows(); ++i) {
            auto u = unit.row(i);
            auto du = dunit.row(i);
            const double ud = dot(u, du);
            auto d = dst.row(i);
            for (std::size_t j = 0; j < u.size(); ++j) d[j] += (du[j] - u[j] * ud) / norms[i];
          }
        };
        if (x->requires_grad) {
          Matrix dxh(xh.rows(), xh.cols());
          detail::gemm_nn_acc(self.grad, yh, dxh);
          push(xh, dxh, nx, x->grad);
        }
        if (y->requires_grad) {
          Matrix dyh(yh.rows(), yh.cols());
          detail::gemm_tn_acc(self.grad, xh, dyh);
          push(yh, dyh, ny, y->grad);
        }
      });
}

/// Mean over rows of -log softmax(logits)[target], via log-sum-exp.
inline Var softmax_cross_entropy(const Var& logits, std::vector<std::size_t> targets) {
  const Matrix& z = logits->value;
  if (targets.size() != z.rows()) {
    fail(ErrorKind::dimension, "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for logits " + z.shape());
  }
  Matrix probs = z;
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] >= z.cols()) {
      fail(ErrorKind::dimension, "softmax_cross_entropy: target " + std::to_string(targets[i]) +
                                     " out of range for " + std::to_string(z.cols()) +
                                     " classes");
    }
    auto r = probs.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    loss += lse - z(i, targets[i]);
    for (double& v : r) v = std::exp(v - lse);
  }
  const double n = static_cast<double>(z.rows());
  return make_node("softmax_cross_entropy", Matrix(1, 1, loss / n), {logits},
                   [probs = std::move(probs), targets = std::move(targets), n](const Node& self) {
                     auto& g = self.parents[0]->grad;
                     const double up = self.grad[0] / n;
                     for (std::size_t i = 0; i < probs.rows(); ++i) {
                       auto p = probs.row(i);
                       auto d = g.row(i);
                       for (std::size_t j = 0; j < p.size(); ++j)
                         d[j] += up * (p[j] - (j == targets[i] ? 1.0 : 0.0));
                     }
                   });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data()) s += v;
  return make_node("sum", Matrix(1, 1, s), {x}, [](const Node& self) {
    auto& g = self.parents[0]->grad;
    for (double& v : g.data()) v += self.grad[0];
  });
}

/// Fills gradients of every node reachable from `loss` that requires one.
/// Intermediate gradients are reset first; leaf gradients accumulate across
/// calls until zeroed.
inline void backward(const Var& loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1) {
    fail(ErrorKind::usage, "backward: loss must be 1x1, got " + loss->value.shape());
  }
  if (!loss->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf()) n->grad.fill(0.0);
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->rule(**it);
}

}  // namespace fewshot::ad
