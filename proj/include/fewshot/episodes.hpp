// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fewshot/datastore/features.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

struct SamplerConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t queries_per_class = 15;
  std::uint64_t seed = 0;
};

/// One N-way K-shot task. Support rows are class-major (K rows per class, in
/// `class_ids` order); query labels are positions 0..N-1 into `class_ids`.
struct Episode {
  Split split = Split::base;
  std::vector<std::size_t> class_ids;                  // indices into the split
  std::vector<std::vector<std::size_t>> support_index;  // sample rows per class
  std::vector<std::vector<std::size_t>> query_index;
  Matrix support;
  Matrix query;
  std::vector<std::size_t> query_labels;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::size_t n_way() const { return class_ids.size(); }
  std::size_t k_shot() const { return class_ids.empty() ? 0 : support.rows() / class_ids.size(); }
};

/// Sampler position: (seed, counter) fully determines the next episode.
struct EpisodeCursor {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
};

inline void validate_sampler(const FeatureSet& fs, Split split, const SamplerConfig& cfg) {
  if (cfg.n_way == 0 || cfg.k_shot == 0) fail(ErrorKind::config, "n_way and k_shot must be positive");
  const auto& classes = fs.classes(split);
  if (classes.size() < cfg.n_way) {
    fail(ErrorKind::insufficient_samples,
         std::to_string(cfg.n_way) + "-way episodes need " + std::to_string(cfg.n_way) +
             " classes but the " + std::string(to_string(split)) + " split has " +
             std::to_string(classes.size()));
  }
  const std::size_t need = cfg.k_shot + cfg.queries_per_class;
  for (const auto& c : classes) {
    if (c.samples.rows() < need) {
      fail(ErrorKind::insufficient_samples,
           "class '" + c.label + "' has " + std::to_string(c.samples.rows()) + " samples, needs " +
               std::to_string(need) + " (" + std::to_string(cfg.k_shot) + " support + " +
               std::to_string(cfg.queries_per_class) + " query)");
    }
  }
}

/// Draws episode `counter` of the stream `seed` from `split`. Pure.
inline Episode sample_episode(const FeatureSet& fs, Split split, const SamplerConfig& cfg,
                              std::uint64_t counter) {
  validate_sampler(fs, split, cfg);
  const auto& classes = fs.classes(split);
  Rng rng = make_rng(cfg.seed, to_string(split), counter);

  Episode ep;
  ep.split = split;
  ep.seed = cfg.seed;
  ep.counter = counter;

  std::vector<std::size_t> pool(classes.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // Partial Fisher-Yates: the first n_way entries are a uniform draw
  // without replacement.
  for (std::size_t i = 0; i < cfg.n_way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  ep.class_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.n_way));

  const std::size_t dim = fs.dim();
  ep.support = Matrix(0, dim);
  ep.query = Matrix(0, dim);
  for (std::size_t local = 0; local < ep.class_ids.size(); ++local) {
    const Matrix& samples = classes[ep.class_ids[local]].samples;
    std::vector<std::size_t> rows(samples.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const std::size_t take = cfg.k_shot + cfg.queries_per_class;
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, rows.size() - 1);
      std::swap(rows[i], rows[pick(rng)]);
    }
    std::vector<std::size_t> sup(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cfg.k_shot));
    std::vector<std::size_t> qry(rows.begin() + static_cast<std::ptrdiff_t>(cfg.k_shot),
                                 rows.begin() + static_cast<std::ptrdiff_t>(take));
    for (std::size_t r : sup) ep.support.append_row(samples.row(r));
    for (std::size_t r : qry) {
      ep.query.append_row(samples.row(r));
      ep.query_labels.push_back(local);
    }
    ep.support_index.push_back(std::move(sup));
    ep.query_index.push_back(std::move(qry));
  }
  return ep;
}

/// Next fake-novel episode over base classes; advances the cursor.
inline Episode sample_training_episode(const FeatureSet& fs, SamplerConfig cfg, EpisodeCursor& cursor) {
  cfg.seed = cursor.seed;
  return sample_episode(fs, Split::base, cfg, cursor.counter++);
}

/// Next test episode over novel classes; advances the cursor.
inline Episode sample_eval_episode(const FeatureSet& fs, SamplerConfig cfg, EpisodeCursor& cursor) {
  cfg.seed = cursor.seed;
  return sample_episode(fs, Split::novel, cfg, cursor.counter++);
}

/// Digest of the sampled indices; equal digests mean identical episodes.
inline std::uint64_t episode_digest(const Episode& ep) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
  mix(static_cast<std::uint64_t>(ep.split));
  for (std::size_t c = 0; c < ep.class_ids.size(); ++c) {
    mix(ep.class_ids[c]);
    for (auto r : ep.support_index[c]) mix(r + 1);
    mix(0xffff);
    for (auto r : ep.query_index[c]) mix(r + 1);
    mix(0xfffe);
  }
  return h;
}

}  // namespace fewshot
