// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fewshot/datastore/synthetic.hpp"
#include "fewshot/evaluation.hpp"
#include "fewshot/training.hpp"
#include "test_util.hpp"

namespace fewshot {
namespace {

using testing::kind_of;
using testing::message_of;

SyntheticSpec small_spec(bool noiseless, std::uint64_t seed = 3) {
  SyntheticSpec s;
  s.visual_dim = 16;
  s.semantic_dim = 8;
  s.base_classes = 8;
  s.val_classes = 2;
  s.novel_classes = 4;
  s.samples_per_class = 12;
  s.subset_size = 4;
  s.families = 2;
  s.seed = seed;
  if (noiseless) s.sigma_discriminative = s.sigma_background = s.sigma_semantic = 0.0;
  return s;
}

TrainConfig small_train(std::uint64_t seed = 5) {
  TrainConfig t;
  t.base_epochs = 30;
  t.base_batch_size = 16;
  t.epochs = 6;
  t.episodes_per_epoch = 100;
  t.milestones = {3, 5};
  t.n_way = 3;
  t.k_shot = 1;
  t.queries_per_class = 5;
  t.seed = seed;
  return t;
}

ModelConfig small_model() {
  ModelConfig m;
  m.attn_hidden_dim = 16;
  return m;
}

struct Trained {
  SyntheticBenchmark bench;
  SegaParams params;
  std::vector<EpochRecord> log;
};

Trained train_small(const SyntheticSpec& spec, const TrainConfig& tc, const ModelConfig& mc) {
  Trained t{generate_synthetic(spec), {}, {}};
  const auto fit = fit_base_weights(t.bench.features, tc);
  const auto sem = base_semantics(t.bench.features, t.bench.resolver, t.bench.embeddings);
  auto res = train_stage2(t.bench.features, sem.vectors, init_params(fit.w_base, spec.semantic_dim, mc, tc.seed), mc,
                          tc);
  t.params = std::move(res.params);
  t.log = std::move(res.log);
  return t;
}

// Fake-novel episode accuracy on base classes with dropout off.
double fake_episode_accuracy(const Trained& t, const TrainConfig& tc, std::size_t episodes) {
  const auto sem = base_semantics(t.bench.features, t.bench.resolver, t.bench.embeddings);
  const auto pv = ParamVars::constants(t.params);
  SamplerConfig sc{tc.n_way, tc.k_shot, tc.queries_per_class, 0};
  EpisodeCursor cursor{derive_seed(999, "check"), 0};
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < episodes; ++i) {
    const auto ep = sample_training_episode(t.bench.features, sc, cursor);
    std::vector<std::size_t> targets;
    for (auto l : ep.query_labels) targets.push_back(ep.class_ids[l]);
    const auto r = graph::episode_loss(pv, ep.support, ep.class_ids, tc.k_shot, ep.query, targets, sem.vectors,
                                       {0.0, false, 0});
    const auto pred = row_argmax(r.scores->value);
    for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == targets[q];
    total += pred.size();
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig t;
  t.epochs = 0;
  EXPECT_EQ(kind_of([&] { t.validate(); }), ErrorKind::config);
  t = {};
  t.decay = 0.0;
  EXPECT_EQ(kind_of([&] { t.validate(); }), ErrorKind::config);
  t.decay = 1.5;
  EXPECT_EQ(kind_of([&] { t.validate(); }), ErrorKind::config);
  t = {};
  t.momentum = 1.0;
  EXPECT_EQ(kind_of([&] { t.validate(); }), ErrorKind::config);
  t = {};
  EXPECT_NO_THROW(t.validate());
}

TEST(EpochRecord, JsonLine) {
  EXPECT_EQ(format_epoch_record({3, 0.5, 0.25, 0.01}), R"({"epoch":3,"mean_loss":0.5,"accuracy":0.25,"lr":0.01})");
}

TEST(FitBase, TwoSeparable2dClassesReachFullAccuracy) {
  FeatureSet fs(2);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.1);
  for (int i = 0; i < 20; ++i) {
    const double a[] = {1.0 + n(rng), n(rng)};
    const double b[] = {n(rng), 1.0 + n(rng)};
    fs.add_sample(Split::base, "east", a);
    fs.add_sample(Split::base, "north", b);
  }
  TrainConfig t;
  t.base_epochs = 50;
  t.base_batch_size = 8;
  const auto fit = fit_base_weights(fs, t);
  EXPECT_EQ(fit.train_accuracy, 1.0);
  EXPECT_EQ(fit.log.size(), 50u);
  EXPECT_EQ(fit.w_base.rows(), 2u);
}

TEST(FitBase, ZeroNoiseWeightsAlignWithClassMeans) {
  // One family per base class, so every class owns a block of dims.
  auto spec = small_spec(true);
  spec.visual_dim = 32;
  spec.families = 8;
  const auto b = generate_synthetic(spec);
  const auto fit = fit_base_weights(b.features, small_train());
  const auto means = class_means(b.features, Split::base);
  for (std::size_t c = 0; c < means.rows(); ++c) {
    double dot = 0, nw = 0, nm = 0;
    for (std::size_t d = 0; d < means.cols(); ++d) {
      dot += fit.w_base(c, d) * means(c, d);
      nw += fit.w_base(c, d) * fit.w_base(c, d);
      nm += means(c, d) * means(c, d);
    }
    EXPECT_GT(dot / std::sqrt(nw * nm), 0.9) << "class " << c;
  }
  EXPECT_EQ(fit.train_accuracy, 1.0);
}

TEST(FitBase, SingleClassIsDegenerate) {
  FeatureSet fs(2);
  const double v[] = {1.0, 0.0};
  fs.add_sample(Split::base, "only", v);
  fs.add_sample(Split::base, "only", std::vector<double>{0.5, 0.5});
  EXPECT_EQ(kind_of([&] { fit_base_weights(fs, TrainConfig{}); }), ErrorKind::degenerate_task);
  EXPECT_NE(message_of([&] { fit_base_weights(fs, TrainConfig{}); }).find("only"), std::string::npos);
  EXPECT_EQ(kind_of([&] { fit_base_weights(FeatureSet(2), TrainConfig{}); }), ErrorKind::degenerate_task);
}

TEST(FitBase, NonFiniteLossRaisesDivergenceWithLastGood) {
  const auto b = generate_synthetic(small_spec(false));
  auto t = small_train();
  t.base_lr = 1e300;
  try {
    fit_base_weights(b.features, t);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::divergence);
    EXPECT_TRUE(e.last_good().w_base.all_finite());
    EXPECT_EQ(e.last_good().w_base.rows(), 8u);
  }
}

TEST(FitBase, Deterministic) {
  const auto b = generate_synthetic(small_spec(false));
  const auto a = fit_base_weights(b.features, small_train());
  const auto c = fit_base_weights(b.features, small_train());
  EXPECT_EQ(a.w_base, c.w_base);
  EXPECT_EQ(format_epoch_log(a.log), format_epoch_log(c.log));
}

TEST(Stage2, InitialLossWithUniformScoresIsLogM) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  auto tc = small_train();
  tc.epochs = 1;
  tc.episodes_per_epoch = 1;
  tc.milestones = {};
  auto mc = small_model();
  mc.temp_init = 1e-9;  // every score ~0: uniform softmax
  const auto fit = fit_base_weights(b.features, tc);
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  const auto res = train_stage2(b.features, sem.vectors, init_params(fit.w_base, spec.semantic_dim, mc, 1), mc, tc);
  ASSERT_EQ(res.log.size(), 1u);
  EXPECT_NEAR(res.log[0].mean_loss, std::log(8.0), 1e-6);
}

TEST(Stage2, ZeroNoiseReachesFullFakeEpisodeAccuracy) {
  const auto tc = small_train();
  const auto t = train_small(small_spec(true), tc, small_model());
  EXPECT_EQ(fake_episode_accuracy(t, tc, 200), 1.0);
}

// Epoch averages come from freshly sampled episodes, so an epoch that draws
// harder class combinations can tick up slightly even while the model keeps
// improving. What must hold: after the two warm-up epochs the loss never
// climbs back above where warm-up ended, and it ends lower than it started.
TEST(Stage2, ZeroNoiseEpochLossNeverReturnsAboveWarmup) {
  auto tc = small_train();
  tc.epochs = 8;
  tc.milestones = {};
  const auto t = train_small(small_spec(true), tc, small_model());
  ASSERT_EQ(t.log.size(), tc.epochs);
  const double warm = t.log[1].mean_loss;
  for (std::size_t e = 2; e < t.log.size(); ++e) EXPECT_LE(t.log[e].mean_loss, warm) << "epoch " << t.log[e].epoch;
  EXPECT_LT(t.log.back().mean_loss, t.log[2].mean_loss);
  EXPECT_LT(t.log.back().mean_loss, t.log.front().mean_loss);
}

TEST(Stage2, FixedSeedGivesBitIdenticalLogAndParams) {
  const auto tc = small_train();
  const auto a = train_small(small_spec(false), tc, small_model());
  const auto b = train_small(small_spec(false), tc, small_model());
  EXPECT_EQ(format_epoch_log(a.log), format_epoch_log(b.log));
  EXPECT_EQ(params_digest(a.params), params_digest(b.params));
  auto tc2 = tc;
  tc2.seed = tc.seed + 1;
  const auto c = train_small(small_spec(false), tc2, small_model());
  EXPECT_NE(format_epoch_log(a.log), format_epoch_log(c.log));
}

TEST(Stage2, LearningRateFollowsMilestones) {
  const auto tc = small_train();
  const auto t = train_small(small_spec(false), tc, small_model());
  const double expect[] = {0.1, 0.1, 0.1, 0.01, 0.01, 0.001};
  for (std::size_t e = 0; e < 6; ++e) EXPECT_NEAR(t.log[e].lr, expect[e], 1e-15) << "epoch " << e + 1;
}

TEST(Stage2, FeaturesAreNotMutated) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  const FeatureSet before = b.features;
  auto tc = small_train();
  tc.epochs = 1;
  const auto fit = fit_base_weights(b.features, tc);
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  train_stage2(b.features, sem.vectors, init_params(fit.w_base, spec.semantic_dim, small_model(), 1), small_model(), tc);
  EXPECT_TRUE(before == b.features);
}

TEST(Stage2, BaseWeightsFrozenUnlessCoTrained) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  auto tc = small_train();
  tc.epochs = 1;
  tc.episodes_per_epoch = 20;
  const auto fit = fit_base_weights(b.features, tc);
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  const auto p0 = init_params(fit.w_base, spec.semantic_dim, small_model(), 1);
  const auto frozen = train_stage2(b.features, sem.vectors, p0, small_model(), tc);
  EXPECT_EQ(frozen.params.w_base, p0.w_base);
  EXPECT_NE(frozen.params.keys, p0.keys);
  tc.train_base = true;
  const auto co = train_stage2(b.features, sem.vectors, p0, small_model(), tc);
  EXPECT_NE(co.params.w_base, p0.w_base);
}

TEST(Stage2, BaseQueriesToggleRuns) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  auto tc = small_train();
  tc.epochs = 1;
  tc.episodes_per_epoch = 10;
  tc.include_base_queries = true;
  const auto fit = fit_base_weights(b.features, tc);
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  const auto res =
      train_stage2(b.features, sem.vectors, init_params(fit.w_base, spec.semantic_dim, small_model(), 1), small_model(), tc);
  EXPECT_TRUE(std::isfinite(res.log[0].mean_loss));
}

TEST(Stage2, BlowUpRaisesDivergenceWithLastGood) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  auto tc = small_train();
  tc.lr = 1e8;
  tc.divergence_window = 5;
  const auto fit = fit_base_weights(b.features, small_train());
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  const auto p0 = init_params(fit.w_base, spec.semantic_dim, small_model(), 1);
  try {
    train_stage2(b.features, sem.vectors, p0, small_model(), tc);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::divergence);
    EXPECT_EQ(params_digest(e.last_good()), params_digest(p0));
  }
}

TEST(Stage2, UnresolvableBaseLabelAbortsBeforeTraining) {
  const auto b = generate_synthetic(small_spec(false));
  LabelResolver partial;
  for (const auto& l : b.features.labels(Split::base)) partial.add(l, {"no-such-token"});
  EXPECT_EQ(kind_of([&] { base_semantics(b.features, partial, b.embeddings); }), ErrorKind::unresolvable_label);
  EXPECT_NE(message_of([&] { base_semantics(b.features, partial, b.embeddings); }).find("base_"), std::string::npos);
}

TEST(Stage2, ShapeChecks) {
  const auto spec = small_spec(false);
  const auto b = generate_synthetic(spec);
  const auto tc = small_train();
  const auto fit = fit_base_weights(b.features, tc);
  const auto sem = base_semantics(b.features, b.resolver, b.embeddings);
  const auto p0 = init_params(fit.w_base, spec.semantic_dim, small_model(), 1);
  EXPECT_EQ(kind_of([&] { train_stage2(b.features, Matrix(8, 3), p0, small_model(), tc); }), ErrorKind::shape_mismatch);
  auto few = p0;
  few.w_base = Matrix(7, 16);
  few.keys = Matrix(7, 16);
  EXPECT_EQ(kind_of([&] { train_stage2(b.features, sem.vectors, few, small_model(), tc); }), ErrorKind::shape_mismatch);
}

}  // namespace
}  // namespace fewshot
