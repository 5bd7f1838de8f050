// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Classification-weight generator with semantic-guided attention.
//
// For a novel class c with support rows x_i:
//   p_avg = mean_i x_i
//   p_att = mean_i sum_j softmax_j(gamma * cos(phi_q x_i, k_j)) w_j
//   p     = lambda1 * p_avg + lambda2 * p_att
//   a     = sigmoid(W2 * dropout(relu(W1 * s_c + b1)) + b2)
//   w_c   = a ⊙ p            (mode sega)
//           p                (mode none)
//           (1 - a) ⊙ p      (mode inverse)
// and queries are scored by t * cos(x, w_c).
//
// Everything is written once against the autodiff graph; the Matrix-level
// entry points wrap their inputs as constants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fewshot/diffmath/autodiff.hpp"
#include "fewshot/diffmath/optim.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

enum class AttentionMode { sega, none, inverse };

constexpr std::string_view to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::sega: return "sega";
    case AttentionMode::none: return "none";
    case AttentionMode::inverse: return "inverse";
  }
  return "?";
}

struct ModelConfig {
  std::size_t attn_hidden_dim = 300;
  double dropout = 0.5;
  double gamma_init = 10.0;
  double temp_init = 10.0;
  double lambda1_init = 1.0;
  double lambda2_init = 0.001;
  double key_init_range = 0.01;  // keys and phi_q ~ U(-r, r)
};

struct SegaParams {
  Matrix w_base;  // M x d_v, row j is base class j's weight
  Matrix keys;    // M x d_v
  Matrix phi_q;   // d_v x d_v, query = phi_q * x
  Matrix mlp_w1;  // d_s x H
  Matrix mlp_b1;  // 1 x H
  Matrix mlp_w2;  // H x d_v
  Matrix mlp_b2;  // 1 x d_v
  double lambda1 = 1.0;
  double lambda2 = 0.001;
  double gamma = 10.0;
  double temp = 10.0;

  std::size_t base_count() const { return w_base.rows(); }
  std::size_t visual_dim() const { return w_base.cols(); }
  std::size_t semantic_dim() const { return mlp_w1.rows(); }
  std::size_t hidden_dim() const { return mlp_w1.cols(); }

  void validate() const {
    const std::size_t m = base_count(), dv = visual_dim(), ds = semantic_dim(), h = hidden_dim();
    auto expect = [](const Matrix& x, std::size_t r, std::size_t c, std::string_view name) {
      if (x.rows() != r || x.cols() != c) {
        fail(ErrorKind::shape_mismatch, "field " + std::string(name) + ": expected " +
                                            Matrix::shape_string(r, c) + ", got " + x.shape());
      }
      if (!x.all_finite()) fail(ErrorKind::numeric, "field " + std::string(name) + " has non-finite entries");
    };
    if (m == 0 || dv == 0 || ds == 0 || h == 0) fail(ErrorKind::shape_mismatch, "parameters have an empty dimension");
    expect(keys, m, dv, "keys");
    expect(phi_q, dv, dv, "phi_q");
    expect(mlp_b1, 1, h, "mlp_b1");
    expect(mlp_w2, h, dv, "mlp_w2");
    expect(mlp_b2, 1, dv, "mlp_b2");
    expect(w_base, m, dv, "w_base");
    expect(mlp_w1, ds, h, "mlp_w1");
    if (!(gamma > 0.0)) fail(ErrorKind::numeric, "gamma must be > 0");
    if (!(temp > 0.0)) fail(ErrorKind::numeric, "temperature must be > 0");
    if (!std::isfinite(lambda1) || !std::isfinite(lambda2)) fail(ErrorKind::numeric, "non-finite lambda");
  }
};

/// Fresh generator around fitted base weights. Hidden layer uses the usual
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; the output bias starts at zero so
/// the initial attention sits near 0.5.
inline SegaParams init_params(Matrix w_base, std::size_t semantic_dim, const ModelConfig& cfg,
                              std::uint64_t seed) {
  if (cfg.attn_hidden_dim == 0) fail(ErrorKind::config, "attn_hidden_dim must be positive");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) fail(ErrorKind::config, "dropout must lie in [0,1)");
  if (!(cfg.gamma_init > 0.0) || !(cfg.temp_init > 0.0))
    fail(ErrorKind::config, "gamma and temperature must start > 0");
  Rng rng = make_rng(seed, "init");
  const std::size_t m = w_base.rows(), dv = w_base.cols(), h = cfg.attn_hidden_dim;
  auto uniform = [&rng](Matrix& x, double r) {
    std::uniform_real_distribution<double> u(-r, r);
    for (double& v : x.data()) v = u(rng);
  };
  SegaParams p;
  p.w_base = std::move(w_base);
  p.keys = Matrix(m, dv);
  p.phi_q = Matrix(dv, dv);
  p.mlp_w1 = Matrix(semantic_dim, h);
  p.mlp_b1 = Matrix(1, h);
  p.mlp_w2 = Matrix(h, dv);
  p.mlp_b2 = Matrix(1, dv);
  uniform(p.keys, cfg.key_init_range);
  uniform(p.phi_q, cfg.key_init_range);
  uniform(p.mlp_w1, 1.0 / std::sqrt(static_cast<double>(semantic_dim)));
  uniform(p.mlp_b1, 1.0 / std::sqrt(static_cast<double>(semantic_dim)));
  uniform(p.mlp_w2, 1.0 / std::sqrt(static_cast<double>(h)));
  p.lambda1 = cfg.lambda1_init;
  p.lambda2 = cfg.lambda2_init;
  p.gamma = cfg.gamma_init;
  p.temp = cfg.temp_init;
  p.validate();
  return p;
}

/// The parameters as graph leaves. Trainable fields become parameters,
/// the rest constants.
struct ParamVars {
  ad::Var w_base, keys, phi_q, mlp_w1, mlp_b1, mlp_w2, mlp_b2, lambda1, lambda2, gamma, temp;

  static ParamVars bind(const SegaParams& p, bool train_generator, bool train_base) {
    auto leaf = [](Matrix m, bool trainable) {
      return trainable ? ad::parameter(std::move(m)) : ad::constant(std::move(m));
    };
    const bool g = train_generator;
    return ParamVars{leaf(p.w_base, train_base),   leaf(p.keys, g),
                     leaf(p.phi_q, g),             leaf(p.mlp_w1, g),
                     leaf(p.mlp_b1, g),            leaf(p.mlp_w2, g),
                     leaf(p.mlp_b2, g),            leaf(Matrix(1, 1, p.lambda1), g),
                     leaf(Matrix(1, 1, p.lambda2), g), leaf(Matrix(1, 1, p.gamma), g),
                     leaf(Matrix(1, 1, p.temp), g)};
  }

  static ParamVars constants(const SegaParams& p) { return bind(p, false, false); }

  SegaParams snapshot() const {
    SegaParams p;
    p.w_base = w_base->value;
    p.keys = keys->value;
    p.phi_q = phi_q->value;
    p.mlp_w1 = mlp_w1->value;
    p.mlp_b1 = mlp_b1->value;
    p.mlp_w2 = mlp_w2->value;
    p.mlp_b2 = mlp_b2->value;
    p.lambda1 = lambda1->value[0];
    p.lambda2 = lambda2->value[0];
    p.gamma = gamma->value[0];
    p.temp = temp->value[0];
    return p;
  }

  /// Named leaves that require gradients, in a fixed order.
  ParamSet trainable() const {
    ParamSet out;
    auto add = [&out](const char* name, const ad::Var& v) {
      if (v->requires_grad) out.push_back({name, v});
    };
    add("w_base", w_base);
    add("keys", keys);
    add("phi_q", phi_q);
    add("mlp_w1", mlp_w1);
    add("mlp_b1", mlp_b1);
    add("mlp_w2", mlp_w2);
    add("mlp_b2", mlp_b2);
    add("lambda1", lambda1);
    add("lambda2", lambda2);
    add("gamma", gamma);
    add("temp", temp);
    return out;
  }
};

namespace graph {

inline constexpr double kMaskedLogit = -1e30;

/// (n x n*k) matrix averaging consecutive groups of k rows.
inline Matrix group_mean_matrix(std::size_t n, std::size_t k) {
  Matrix g(n, n * k);
  const double w = 1.0 / static_cast<double>(k);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < k; ++i) g(c, c * k + i) = w;
  return g;
}

/// Attention vectors, one row per semantic row.
inline ad::Var semantic_attention(const ParamVars& pv, const ad::Var& semantics, double dropout_rate,
                                  bool train, std::uint64_t dropout_seed) {
  if (semantics->value.cols() != pv.mlp_w1->value.rows()) {
    fail(ErrorKind::dimension, "semantic_attention: semantic vectors have " +
                                   std::to_string(semantics->value.cols()) + " dims, generator expects " +
                                   std::to_string(pv.mlp_w1->value.rows()));
  }
  auto hidden = ad::relu(ad::add(ad::matmul(semantics, pv.mlp_w1), pv.mlp_b1));
  hidden = ad::dropout(hidden, dropout_rate, train, dropout_seed);
  return ad::sigmoid(ad::add(ad::matmul(hidden, pv.mlp_w2), pv.mlp_b2));
}

inline ad::Var avg_prototypes(const ad::Var& support, std::size_t n, std::size_t k) {
  return ad::matmul(ad::constant(group_mean_matrix(n, k)), support);
}

/// `key_mask`, when given, is a 1 x M additive mask on the attention logits
/// (0 to keep a base class, kMaskedLogit to drop it).
inline ad::Var attention_prototypes(const ParamVars& pv, const ad::Var& support, std::size_t n, std::size_t k,
                                    const ad::Var& key_mask = nullptr) {
  auto queries = ad::matmul_nt(support, pv.phi_q);
  auto logits = ad::scale(ad::cosine_rows(queries, pv.keys), pv.gamma);
  if (key_mask) logits = ad::add(logits, key_mask);
  auto att = ad::row_softmax(logits);
  auto per_sample = ad::matmul(att, pv.w_base);
  return ad::matmul(ad::constant(group_mean_matrix(n, k)), per_sample);
}

/// lambda1 * p_avg + lambda2 * p_att for each class of a class-major support block.
inline ad::Var prototypes(const ParamVars& pv, const ad::Var& support, std::size_t n, std::size_t k,
                          const ad::Var& key_mask = nullptr) {
  if (n == 0 || k == 0 || support->value.rows() != n * k) {
    fail(ErrorKind::dimension, "prototypes: support has " + std::to_string(support->value.rows()) +
                                   " rows, expected " + std::to_string(n) + "x" + std::to_string(k));
  }
  if (support->value.cols() != pv.w_base->value.cols()) {
    fail(ErrorKind::dimension, "prototypes: support rows have " + std::to_string(support->value.cols()) +
                                   " dims, base weights have " + std::to_string(pv.w_base->value.cols()));
  }
  return ad::add(ad::scale(avg_prototypes(support, n, k), pv.lambda1),
                 ad::scale(attention_prototypes(pv, support, n, k, key_mask), pv.lambda2));
}

inline ad::Var apply_attention(const ad::Var& attention, const ad::Var& proto, AttentionMode mode) {
  switch (mode) {
    case AttentionMode::sega: return ad::hadamard(attention, proto);
    case AttentionMode::none:
      if (!attention->value.empty()) require_same_shape(attention->value, proto->value, "apply_attention");
      return proto;
    case AttentionMode::inverse: return ad::hadamard(ad::affine(attention, -1.0, 1.0), proto);
  }
  return proto;
}

/// t * cos(x_i, w_c) for every query row and weight row.
inline ad::Var cosine_scores(const ad::Var& queries, const ad::Var& weights, const ad::Var& temp) {
  return ad::scale(ad::cosine_rows(queries, weights), temp);
}

/// Weights for the N classes of a support block (class-major, K rows each).
/// `semantics` holds one row per class and may be empty for mode none.
inline ad::Var generate_weights(const ParamVars& pv, const ad::Var& support, std::size_t n, std::size_t k,
                                const ad::Var& semantics, AttentionMode mode, double dropout_rate = 0.0,
                                bool train = false, std::uint64_t dropout_seed = 0) {
  auto proto = prototypes(pv, support, n, k);
  if (mode == AttentionMode::none) return proto;
  if (semantics->value.rows() != n) {
    fail(ErrorKind::dimension, "generate_weights: " + std::to_string(semantics->value.rows()) +
                                   " semantic vectors for " + std::to_string(n) + " classes");
  }
  auto att = semantic_attention(pv, semantics, dropout_rate, train, dropout_seed);
  return apply_attention(att, proto, mode);
}

struct EpisodeLossOptions {
  double dropout = 0.0;
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

struct EpisodeLoss {
  ad::Var loss;
  ad::Var scores;  // queries x M
};

/// Stage-2 objective: generated weights replace the sampled base classes'
/// rows, every other base weight is gated by its own attention, and the
/// queries are classified against all M classes. The sampled classes' own
/// base weights are masked out of the transfer attention; otherwise p_att
/// could simply look up the answer.
///
/// `class_ids` are the sampled base classes (support is class-major over
/// them); `targets` are global base indices per query row.
inline EpisodeLoss episode_loss(const ParamVars& pv, const Matrix& support, const std::vector<std::size_t>& class_ids,
                                std::size_t k, const Matrix& query, const std::vector<std::size_t>& targets,
                                const Matrix& base_semantics, const EpisodeLossOptions& opt) {
  const std::size_t m = pv.w_base->value.rows();
  const std::size_t dv = pv.w_base->value.cols();
  const std::size_t n = class_ids.size();
  if (base_semantics.rows() != m) {
    fail(ErrorKind::dimension, "episode_loss: " + std::to_string(base_semantics.rows()) +
                                   " base semantic vectors for " + std::to_string(m) + " base classes");
  }
  Matrix select(m, n);   // scatters generated rows into their base slots
  Matrix gather(n, m);   // picks the sampled classes' attention rows
  Matrix keep(m, dv, 1.0);
  Matrix key_mask(1, m);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = class_ids[i];
    if (c >= m) fail(ErrorKind::dimension, "episode_loss: class id out of range");
    select(c, i) = 1.0;
    gather(i, c) = 1.0;
    key_mask[c] = kMaskedLogit;
    for (double& v : keep.row(c)) v = 0.0;
  }
  if (n >= m) fail(ErrorKind::insufficient_samples, "episode_loss: every base class is sampled, none left to attend to");

  auto att_all = semantic_attention(pv, ad::constant(base_semantics), opt.dropout, opt.train, opt.dropout_seed);
  auto enhanced_base = ad::hadamard(att_all, pv.w_base);
  auto proto = prototypes(pv, ad::constant(support), n, k, ad::constant(std::move(key_mask)));
  auto generated = ad::hadamard(ad::matmul(ad::constant(std::move(gather)), att_all), proto);
  auto weights = ad::add(ad::hadamard(enhanced_base, ad::constant(std::move(keep))),
                         ad::matmul(ad::constant(std::move(select)), generated));
  auto scores = cosine_scores(ad::constant(query), weights, pv.temp);
  auto loss = ad::softmax_cross_entropy(scores, targets);
  return {loss, scores};
}

}  // namespace graph

// Matrix-level operations for inference and inspection.

inline Matrix avg_prototype(const Matrix& support) {
  if (support.rows() == 0) fail(ErrorKind::input, "avg_prototype: empty support set");
  return graph::avg_prototypes(ad::constant(support), 1, support.rows())->value;
}

inline Matrix attention_prototype(const Matrix& support, const SegaParams& params) {
  if (support.rows() == 0) fail(ErrorKind::input, "attention_prototype: empty support set");
  return graph::attention_prototypes(ParamVars::constants(params), ad::constant(support), 1, support.rows())->value;
}

inline Matrix combine_prototype(const Matrix& p_avg, const Matrix& p_att, double lambda1, double lambda2) {
  require_same_shape(p_avg, p_att, "combine_prototype");
  return ad::add(ad::scale(ad::constant(p_avg), lambda1), ad::scale(ad::constant(p_att), lambda2))->value;
}

/// Inference-time attention (dropout off) for each row of `semantics`.
inline Matrix semantic_attention(const Matrix& semantics, const SegaParams& params) {
  return graph::semantic_attention(ParamVars::constants(params), ad::constant(semantics), 0.0, false, 0)->value;
}

inline Matrix apply_attention(const Matrix& attention, const Matrix& proto, AttentionMode mode) {
  require_same_shape(attention, proto, "apply_attention");
  return graph::apply_attention(ad::constant(attention), ad::constant(proto), mode)->value;
}

struct Classification {
  Matrix scores;                   // rows x classes
  std::vector<std::size_t> label;  // argmax per row, smallest index on ties
};

inline std::vector<std::size_t> row_argmax(const Matrix& scores) {
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto r = scores.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline Classification classify(const Matrix& x, const Matrix& weights, double temp) {
  auto scores = graph::cosine_scores(ad::constant(x), ad::constant(weights), ad::scalar_constant(temp))->value;
  auto labels = row_argmax(scores);
  return {std::move(scores), std::move(labels)};
}

/// Weights for N classes from a class-major support block of N*K rows.
inline Matrix generate_weights(const Matrix& support, std::size_t n, std::size_t k, const Matrix& semantics,
                               const SegaParams& params, AttentionMode mode) {
  return graph::generate_weights(ParamVars::constants(params), ad::constant(support), n, k,
                                 ad::constant(semantics), mode)
      ->value;
}

}  // namespace fewshot
