// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Episodic evaluation on novel classes: accuracy with 95% CIs, the
// four-variant ablation, prototype stability and the shot sweep.
//
// Episode i of a run is sample_episode(novel, seed, i), so every variant and
// every worker sees the same stream regardless of scheduling.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fewshot/datastore/embeddings.hpp"
#include "fewshot/datastore/features.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/generator.hpp"

namespace fewshot {

enum class Variant { sega, none, fake, inverse };

inline constexpr std::array<Variant, 4> kAllVariants{Variant::sega, Variant::none, Variant::fake,
                                                     Variant::inverse};

constexpr std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::sega: return "sega";
    case Variant::none: return "none";
    case Variant::fake: return "fake";
    case Variant::inverse: return "inverse";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : kAllVariants)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

constexpr AttentionMode attention_mode(Variant v) {
  switch (v) {
    case Variant::none: return AttentionMode::none;
    case Variant::inverse: return AttentionMode::inverse;
    default: return AttentionMode::sega;
  }
}

struct EvalConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t queries_per_class = 15;
  std::size_t episodes = 2000;
  std::size_t stability_episodes = 600;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: SEGA_THREADS or all cores

  SamplerConfig sampler() const { return {n_way, k_shot, queries_per_class, seed}; }
};

/// Worker count: explicit setting, else SEGA_THREADS, else hardware threads.
inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SEGA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0) {
      fail(ErrorKind::config, "SEGA_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over `threads` workers with a static stride.
/// The first exception (lowest worker) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct MeanCi {
  double mean = 0.0;
  double ci95 = 0.0;
};

/// Mean and 1.96 * sample-std / sqrt(n). A single value has ci95 0.
inline MeanCi mean_ci95(const std::vector<double>& xs) {
  if (xs.empty()) fail(ErrorKind::input, "mean_ci95: no values");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

/// "69.04±0.26": percentages with two decimals.
inline std::string format_accuracy(const MeanCi& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", 100.0 * m.mean, 100.0 * m.ci95);
  return buf;
}

inline bool cis_overlap(const MeanCi& a, const MeanCi& b) {
  return a.mean - a.ci95 <= b.mean + b.ci95 && b.mean - b.ci95 <= a.mean + a.ci95;
}

/// Hash of every parameter value; pins a report to the exact weights.
inline std::uint64_t params_digest(const SegaParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_matrix = [&h](const Matrix& m) {
    h = splitmix64(h ^ m.rows());
    h = splitmix64(h ^ m.cols());
    for (double v : m.data()) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
  };
  for (const Matrix* m : {&p.w_base, &p.keys, &p.phi_q, &p.mlp_w1, &p.mlp_b1, &p.mlp_w2, &p.mlp_b2}) mix_matrix(*m);
  for (double v : {p.lambda1, p.lambda2, p.gamma, p.temp}) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct EvalReport {
  Variant variant = Variant::sega;
  std::size_t n_way = 0, k_shot = 0, queries_per_class = 0, episodes = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::vector<double> accuracies;
  std::vector<std::uint64_t> episode_digests;
  double mean = 0.0;
  double ci95 = 0.0;

  MeanCi summary() const { return {mean, ci95}; }
};

/// Novel-class semantic rows for a variant: the resolved vectors, or a
/// derangement of them for the fake ablation. Empty for variant none.
inline Matrix variant_semantics(Variant v, const Matrix& novel_semantics, std::uint64_t seed) {
  if (v == Variant::none) return Matrix(novel_semantics.rows(), 0);
  if (v == Variant::fake) return derange_rows(novel_semantics, derive_seed(seed, "fake"));
  return novel_semantics;
}

/// Generated weights for one episode's classes under a variant.
inline Matrix episode_weights(const SegaParams& params, const Episode& ep, const Matrix& semantics_rows,
                              Variant v) {
  Matrix sem(0, params.semantic_dim());
  if (v != Variant::none)
    for (auto c : ep.class_ids) sem.append_row(semantics_rows.row(c));
  return generate_weights(ep.support, ep.n_way(), ep.k_shot(), sem, params, attention_mode(v));
}

inline double episode_accuracy(const SegaParams& params, const Episode& ep, const Matrix& semantics_rows,
                               Variant v) {
  const auto w = episode_weights(params, ep, semantics_rows, v);
  const auto r = classify(ep.query, w, params.temp);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < r.label.size(); ++i) correct += r.label[i] == ep.query_labels[i];
  return static_cast<double>(correct) / static_cast<double>(r.label.size());
}

inline void check_eval_inputs(const SegaParams& params, const FeatureSet& fs, const Matrix& novel_semantics,
                              const EvalConfig& cfg) {
  params.validate();
  if (fs.dim() != params.visual_dim()) {
    fail(ErrorKind::shape_mismatch, "features have d_v=" + std::to_string(fs.dim()) + ", checkpoint has " +
                                        std::to_string(params.visual_dim()));
  }
  if (novel_semantics.rows() != fs.class_count(Split::novel) || novel_semantics.cols() != params.semantic_dim()) {
    fail(ErrorKind::shape_mismatch, "novel semantics are " + novel_semantics.shape() + ", expected " +
                                        Matrix::shape_string(fs.class_count(Split::novel), params.semantic_dim()));
  }
  if (cfg.episodes == 0) fail(ErrorKind::config, "episode count must be positive");
  validate_sampler(fs, Split::novel, cfg.sampler());
}

/// `novel_semantics` holds one resolved vector per novel class, in split order.
inline EvalReport evaluate(const SegaParams& params, const FeatureSet& fs, const Matrix& novel_semantics,
                           const EvalConfig& cfg, Variant variant) {
  check_eval_inputs(params, fs, novel_semantics, cfg);
  const Matrix sem = variant_semantics(variant, novel_semantics, cfg.seed);
  const SamplerConfig sampler = cfg.sampler();

  EvalReport rep;
  rep.variant = variant;
  rep.n_way = cfg.n_way;
  rep.k_shot = cfg.k_shot;
  rep.queries_per_class = cfg.queries_per_class;
  rep.episodes = cfg.episodes;
  rep.seed = cfg.seed;
  rep.accuracies.assign(cfg.episodes, 0.0);
  rep.episode_digests.assign(cfg.episodes, 0);
  parallel_for(cfg.episodes, resolve_threads(cfg.threads), [&](std::size_t i) {
    const Episode ep = sample_episode(fs, Split::novel, sampler, i);
    rep.accuracies[i] = episode_accuracy(params, ep, sem, variant);
    rep.episode_digests[i] = episode_digest(ep);
  });
  const auto s = mean_ci95(rep.accuracies);
  rep.mean = s.mean;
  rep.ci95 = s.ci95;
  std::string fp = hex64(params_digest(params)) + "/" + std::to_string(cfg.n_way) + "w" +
                   std::to_string(cfg.k_shot) + "s" + std::to_string(cfg.queries_per_class) + "q/" +
                   std::to_string(cfg.episodes) + "e/seed" + std::to_string(cfg.seed);
  rep.fingerprint = std::move(fp);
  return rep;
}

struct AblationTable {
  std::vector<EvalReport> reports;  // sega, none, fake, inverse

  const EvalReport& at(Variant v) const {
    for (const auto& r : reports)
      if (r.variant == v) return r;
    fail(ErrorKind::input, "ablation table has no '" + std::string(to_string(v)) + "' row");
  }
};

/// All four variants over one shared episode stream.
inline AblationTable run_ablation(const SegaParams& params, const FeatureSet& fs, const Matrix& novel_semantics,
                                  const EvalConfig& cfg) {
  AblationTable t;
  for (auto v : kAllVariants) t.reports.push_back(evaluate(params, fs, novel_semantics, cfg, v));
  for (const auto& r : t.reports) {
    if (r.episode_digests != t.reports.front().episode_digests) {
      fail(ErrorKind::determinism, "ablation variants saw different episode streams");
    }
  }
  return t;
}

struct StabilityReport {
  Variant variant = Variant::sega;
  std::size_t episodes = 0;
  double intra = 0.0;  // mean 1 - cos between same-class weights
  double inter = 0.0;  // mean 1 - cos between different-class weights
  double ratio = 0.0;  // intra / inter, 0 when degenerate
  bool degenerate = false;
  Matrix weights;                   // L2-normalized generated weights
  std::vector<std::string> labels;  // class of each weight row
};

inline StabilityReport prototype_stability(const SegaParams& params, const FeatureSet& fs,
                                           const Matrix& novel_semantics, const EvalConfig& cfg, Variant variant) {
  EvalConfig c = cfg;
  c.episodes = cfg.stability_episodes;
  check_eval_inputs(params, fs, novel_semantics, c);
  const Matrix sem = variant_semantics(variant, novel_semantics, cfg.seed);
  const SamplerConfig sampler = c.sampler();
  const std::size_t n_classes = fs.class_count(Split::novel);

  std::vector<Matrix> per_episode(c.episodes);
  std::vector<std::vector<std::size_t>> ids(c.episodes);
  parallel_for(c.episodes, resolve_threads(c.threads), [&](std::size_t i) {
    const Episode ep = sample_episode(fs, Split::novel, sampler, i);
    per_episode[i] = ad::row_l2_normalize(ad::constant(episode_weights(params, ep, sem, variant)))->value;
    ids[i] = ep.class_ids;
  });

  StabilityReport rep;
  rep.variant = variant;
  rep.episodes = c.episodes;
  rep.weights = Matrix(0, params.visual_dim());
  std::vector<std::size_t> cls;
  for (std::size_t i = 0; i < c.episodes; ++i) {
    for (std::size_t r = 0; r < ids[i].size(); ++r) {
      rep.weights.append_row(per_episode[i].row(r));
      cls.push_back(ids[i][r]);
      rep.labels.push_back(fs.at(Split::novel, ids[i][r]).label);
    }
  }
  std::vector<std::size_t> seen(n_classes, 0);
  for (auto k : cls) ++seen[k];
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (seen[k] < 2) {
      fail(ErrorKind::insufficient_coverage, "class '" + fs.at(Split::novel, k).label + "' was generated " +
                                                 std::to_string(seen[k]) + " time(s); stability needs two or more");
    }
  }

  const std::size_t n = rep.weights.rows();
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double d = 1.0 - dot(rep.weights.row(a), rep.weights.row(b));
      if (cls[a] == cls[b]) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  }
  if (n_intra == 0) fail(ErrorKind::insufficient_coverage, "no class was generated twice");
  rep.intra = std::clamp(intra / static_cast<double>(n_intra), 0.0, 2.0);
  rep.inter = n_inter ? std::clamp(inter / static_cast<double>(n_inter), 0.0, 2.0) : 0.0;
  rep.degenerate = rep.inter <= 1e-12;
  rep.ratio = rep.degenerate ? 0.0 : rep.intra / rep.inter;
  return rep;
}

struct ShotPoint {
  std::size_t k_shot = 0;
  MeanCi sega, none;
  MeanCi gain;  // paired: per-episode acc(sega) - acc(none)
};

inline MeanCi paired_gain(const EvalReport& a, const EvalReport& b) {
  if (a.episode_digests != b.episode_digests) fail(ErrorKind::input, "paired gain needs identical episode streams");
  std::vector<double> d(a.accuracies.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.accuracies[i] - b.accuracies[i];
  return mean_ci95(d);
}

/// gain_a - gain_b for independent episode streams; CI from the summed variances.
inline MeanCi gain_difference(const MeanCi& a, const MeanCi& b) {
  return {a.mean - b.mean, std::sqrt(a.ci95 * a.ci95 + b.ci95 * b.ci95)};
}

inline std::vector<ShotPoint> shot_sweep(const SegaParams& params, const FeatureSet& fs,
                                         const Matrix& novel_semantics, const EvalConfig& cfg,
                                         const std::vector<std::size_t>& shots, Variant treated = Variant::sega,
                                         Variant control = Variant::none) {
  if (shots.empty()) fail(ErrorKind::config, "shot list is empty");
  std::vector<ShotPoint> out;
  for (auto k : shots) {
    EvalConfig c = cfg;
    c.k_shot = k;
    const auto a = evaluate(params, fs, novel_semantics, c, treated);
    const auto b = evaluate(params, fs, novel_semantics, c, control);
    out.push_back({k, a.summary(), b.summary(), paired_gain(a, b)});
  }
  return out;
}

// Text outputs.

inline std::string format_ablation_table(const AblationTable& t) {
  std::string out = "variant   accuracy(%)\n";
  for (const auto& r : t.reports) {
    std::string name(to_string(r.variant));
    name.resize(10, ' ');
    out += name + format_accuracy(r.summary()) + "\n";
  }
  return out;
}

inline std::string format_episode_tsv(const EvalReport& r) {
  std::string out = "episode\tdigest\taccuracy\n";
  for (std::size_t i = 0; i < r.accuracies.size(); ++i)
    out += std::to_string(i) + "\t" + hex64(r.episode_digests[i]) + "\t" + io::format_real(r.accuracies[i]) + "\n";
  return out;
}

inline std::string format_shot_sweep_tsv(const std::vector<ShotPoint>& pts) {
  std::string out = "k_shot\tsega\tsega_ci95\tnone\tnone_ci95\tgain\tgain_ci95\n";
  for (const auto& p : pts) {
    out += std::to_string(p.k_shot);
    for (double v : {p.sega.mean, p.sega.ci95, p.none.mean, p.none.ci95, p.gain.mean, p.gain.ci95})
      out += "\t" + io::format_real(v);
    out += "\n";
  }
  return out;
}

}  // namespace fewshot
