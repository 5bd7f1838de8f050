// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Two training stages on fixed, pre-extracted features.
//
// Stage 1 fits the base classifier W_base (cosine softmax over the M base
// classes) and stands in for training a feature extractor. Stage 2 trains the
// generator episodically: each fake N-way K-shot episode over base classes
// generates weights for its N classes, every other base weight is gated by
// its own attention, and the episode's queries are scored against all M.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/datastore/embeddings.hpp"
#include "fewshot/datastore/features.hpp"
#include "fewshot/diffmath/optim.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/generator.hpp"

namespace fewshot {

struct TrainConfig {
  // stage 1
  std::size_t base_epochs = 30;
  std::size_t base_batch_size = 64;
  double base_lr = 0.1;
  double base_temp = 10.0;

  // stage 2
  std::size_t epochs = 20;
  std::size_t episodes_per_epoch = 1000;
  double lr = 0.1;
  std::vector<std::size_t> milestones{10, 15};  // decay after these epochs
  double decay = 0.1;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t queries_per_class = 15;
  bool train_base = false;
  bool include_base_queries = false;  // one query from every non-sampled base class
  std::size_t divergence_window = 100;

  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) fail(ErrorKind::config, std::string(name) + " must be positive");
    };
    positive(base_epochs, "base_epochs");
    positive(base_batch_size, "base_batch_size");
    positive(epochs, "epochs");
    positive(episodes_per_epoch, "episodes_per_epoch");
    positive(n_way, "n_way");
    positive(k_shot, "k_shot");
    positive(queries_per_class, "queries_per_class");
    positive(divergence_window, "divergence_window");
    if (!(decay > 0.0 && decay <= 1.0)) fail(ErrorKind::config, "decay must lie in (0,1]");
    if (!(lr > 0.0) || !(base_lr > 0.0)) fail(ErrorKind::config, "learning rates must be > 0");
    if (!(base_temp > 0.0)) fail(ErrorKind::config, "base_temp must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be >= 0");
  }
};

/// Divergence with the parameters from before it started.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, SegaParams last_good)
      : Error(ErrorKind::divergence, message), last_good_(std::move(last_good)) {}
  const SegaParams& last_good() const noexcept { return last_good_; }

 private:
  SegaParams last_good_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

inline std::string format_epoch_record(const EpochRecord& r) {
  return "{\"epoch\":" + std::to_string(r.epoch) + ",\"mean_loss\":" + io::format_real(r.mean_loss) +
         ",\"accuracy\":" + io::format_real(r.accuracy) + ",\"lr\":" + io::format_real(r.lr) + "}";
}

/// One JSON object per line.
inline std::string format_epoch_log(const std::vector<EpochRecord>& log) {
  std::string out;
  for (const auto& r : log) out += format_epoch_record(r) + "\n";
  return out;
}

/// Parameters carrying only a base classifier; what stage 1 can hand back.
inline SegaParams base_only(Matrix w_base) {
  SegaParams p;
  p.w_base = std::move(w_base);
  return p;
}

struct BaseFit {
  Matrix w_base;
  std::vector<EpochRecord> log;
  double train_accuracy = 0.0;
};

/// Fits W_base by minibatch SGD on the cosine-softmax cross-entropy over all
/// base samples. The features themselves are read-only.
inline BaseFit fit_base_weights(const FeatureSet& fs, const TrainConfig& cfg) {
  cfg.validate();
  const auto& classes = fs.classes(Split::base);
  if (classes.empty()) fail(ErrorKind::degenerate_task, "base split is empty");
  if (classes.size() < 2) {
    fail(ErrorKind::degenerate_task, "base split has a single class ('" + classes[0].label +
                                         "'); a classifier needs at least two");
  }
  const std::size_t m = classes.size(), dv = fs.dim();

  std::vector<std::pair<std::size_t, std::size_t>> samples;  // (class, row)
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t r = 0; r < classes[c].samples.rows(); ++r) samples.emplace_back(c, r);

  Rng rng = make_rng(cfg.seed, "fit-base");
  // Rows start at the normalized class means (a cosine classifier's weight
  // plays the role of a class prototype); SGD then refines them. A zero mean
  // falls back to a random unit direction.
  Matrix init = class_means(fs, Split::base);
  {
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t c = 0; c < m; ++c) {
      auto r = init.row(c);
      double n = 0.0;
      for (double v : r) n += v * v;
      if (!(n > 0.0)) {
        for (double& v : r) v = g(rng);
        n = 0.0;
        for (double v : r) n += v * v;
      }
      n = std::sqrt(n);
      for (double& v : r) v /= n;
    }
  }
  auto w = ad::parameter(init);
  const ParamSet params{{"w_base", w}};
  OptimState opt(params, cfg.base_lr, cfg.momentum, cfg.weight_decay);
  auto temp = ad::scalar_constant(cfg.base_temp);

  BaseFit out;
  Matrix last_good = w->value;
  for (std::size_t epoch = 1; epoch <= cfg.base_epochs; ++epoch) {
    std::shuffle(samples.begin(), samples.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < samples.size(); b += cfg.base_batch_size) {
      const std::size_t e = std::min(samples.size(), b + cfg.base_batch_size);
      Matrix x(0, dv);
      std::vector<std::size_t> targets;
      for (std::size_t i = b; i < e; ++i) {
        x.append_row(classes[samples[i].first].samples.row(samples[i].second));
        targets.push_back(samples[i].first);
      }
      ad::Var scores, loss;
      try {
        scores = graph::cosine_scores(ad::constant(std::move(x)), w, temp);
        loss = ad::softmax_cross_entropy(scores, targets);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        throw DivergenceError("stage-1 forward pass failed in epoch " + std::to_string(epoch) + ": " + e.what(),
                              base_only(last_good));
      }
      const double l = loss->value[0];
      if (!std::isfinite(l)) {
        throw DivergenceError("stage-1 loss became non-finite in epoch " + std::to_string(epoch),
                              base_only(last_good));
      }
      const auto pred = row_argmax(scores->value);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == targets[i];
      loss_sum += l * static_cast<double>(e - b);
      ad::backward(loss);
      sgd_step(params, opt);
      if (!w->value.all_finite()) {
        throw DivergenceError("stage-1 weights became non-finite in epoch " + std::to_string(epoch),
                              base_only(last_good));
      }
    }
    last_good = w->value;
    const double n = static_cast<double>(samples.size());
    out.log.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n, opt.lr()});
  }
  out.w_base = w->value;
  // Accuracy of the final weights, not the running average over the last epoch.
  std::size_t correct = 0;
  for (std::size_t c = 0; c < m; ++c) {
    const auto r = classify(classes[c].samples, out.w_base, cfg.base_temp);
    for (auto p : r.label) correct += p == c;
  }
  out.train_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return out;
}

/// Semantic vectors of the base classes in W_base row order. Fails naming the
/// first label whose chain does not resolve.
inline SemanticMatrix base_semantics(const FeatureSet& fs, const LabelResolver& resolver,
                                     const EmbeddingTable& table) {
  return resolve_all(fs.labels(Split::base), resolver, table);
}

struct Stage2Result {
  SegaParams params;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline Stage2Result train_stage2(const FeatureSet& fs, const Matrix& semantics, SegaParams params,
                                 const ModelConfig& model, const TrainConfig& cfg,
                                 const EpochCallback& on_epoch = {}) {
  cfg.validate();
  params.validate();
  const std::size_t m = params.base_count();
  if (fs.class_count(Split::base) != m) {
    fail(ErrorKind::shape_mismatch, "W_base has " + std::to_string(m) + " rows but the base split has " +
                                        std::to_string(fs.class_count(Split::base)) + " classes");
  }
  if (fs.dim() != params.visual_dim()) {
    fail(ErrorKind::shape_mismatch, "features have d_v=" + std::to_string(fs.dim()) + ", parameters " +
                                        std::to_string(params.visual_dim()));
  }
  if (semantics.rows() != m || semantics.cols() != params.semantic_dim()) {
    fail(ErrorKind::shape_mismatch, "base semantics are " + semantics.shape() + ", expected " +
                                        Matrix::shape_string(m, params.semantic_dim()));
  }
  SamplerConfig sampler{cfg.n_way, cfg.k_shot, cfg.queries_per_class, 0};
  validate_sampler(fs, Split::base, sampler);

  auto pv = ParamVars::bind(params, true, cfg.train_base);
  const ParamSet trainable = pv.trainable();
  OptimState opt(trainable, cfg.lr, cfg.momentum, cfg.weight_decay);
  EpisodeCursor cursor{derive_seed(cfg.seed, "stage2"), 0};
  Rng extra_rng = make_rng(cfg.seed, "stage2-base-queries");
  const double blowup = 10.0 * std::log(static_cast<double>(m));

  Stage2Result out;
  SegaParams last_good = params;
  std::size_t over_streak = 0;
  const auto& base = fs.classes(Split::base);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
      const Episode ep = sample_training_episode(fs, sampler, cursor);
      Matrix query = ep.query;
      std::vector<std::size_t> targets;
      targets.reserve(query.rows() + m);
      for (auto l : ep.query_labels) targets.push_back(ep.class_ids[l]);
      if (cfg.include_base_queries) {
        std::vector<bool> sampled(m, false);
        for (auto c : ep.class_ids) sampled[c] = true;
        for (std::size_t c = 0; c < m; ++c) {
          if (sampled[c]) continue;
          std::uniform_int_distribution<std::size_t> pick(0, base[c].samples.rows() - 1);
          query.append_row(base[c].samples.row(pick(extra_rng)));
          targets.push_back(c);
        }
      }

      graph::EpisodeLossOptions lopt{model.dropout, true, derive_seed(cfg.seed, "dropout", ep.counter)};
      graph::EpisodeLoss res;
      try {
        res = graph::episode_loss(pv, ep.support, ep.class_ids, cfg.k_shot, query, targets, semantics, lopt);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        throw DivergenceError("stage-2 forward pass failed at epoch " + std::to_string(epoch) + ", episode " +
                                  std::to_string(i) + ": " + e.what(),
                              last_good);
      }
      const double l = res.loss->value[0];
      if (!std::isfinite(l)) {
        throw DivergenceError("stage-2 loss became non-finite at epoch " + std::to_string(epoch) +
                                  ", episode " + std::to_string(i),
                              last_good);
      }
      over_streak = l > blowup ? over_streak + 1 : 0;
      if (over_streak >= cfg.divergence_window) {
        throw DivergenceError("stage-2 loss stayed above 10 ln M = " + io::format_real(blowup) + " for " +
                                  std::to_string(over_streak) + " consecutive episodes",
                              last_good);
      }
      const auto pred = row_argmax(res.scores->value);
      for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == targets[q];
      total += pred.size();
      loss_sum += l;

      ad::backward(res.loss);
      sgd_step(trainable, opt);
      if (const auto bad = first_non_finite(trainable); !bad.empty()) {
        throw DivergenceError("stage-2 parameter '" + bad + "' became non-finite at epoch " + std::to_string(epoch) +
                                  ", episode " + std::to_string(i),
                              last_good);
      }
      // Kernel sharpness and temperature must stay positive.
      pv.gamma->value[0] = std::max(pv.gamma->value[0], 1e-3);
      pv.temp->value[0] = std::max(pv.temp->value[0], 1e-3);
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(cfg.episodes_per_epoch),
                    static_cast<double>(correct) / static_cast<double>(total), opt.lr()};
    out.log.push_back(rec);
    last_good = pv.snapshot();
    if (on_epoch) on_epoch(rec);
    if (std::find(cfg.milestones.begin(), cfg.milestones.end(), epoch) != cfg.milestones.end()) {
      opt.decay_lr(cfg.decay);
    }
  }
  out.params = pv.snapshot();
  return out;
}

}  // namespace fewshot
