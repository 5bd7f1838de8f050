// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Seeded synthetic few-shot benchmark.
//
// The visual space is cut into one contiguous block per family. Each class
// owns a discriminative subset of its family's block: its mean is
// signal * m_c ⊙ u_c with m_c the 0/1 subset mask and u_c a positive pattern
// drawn from U(0.5, 1.5). Samples add N(0, σ_d) noise on the subset and
// N(0, σ_b) noise everywhere else. The label embedding is s_c = A m_c + ε,
// with A a shared Gaussian map and ε ~ N(0, σ_s), so the semantics say which
// dimensions matter for a class but not where its mean sits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fewshot/datastore/embeddings.hpp"
#include "fewshot/datastore/features.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

struct SyntheticSpec {
  std::size_t visual_dim = 32;
  std::size_t semantic_dim = 16;
  std::size_t base_classes = 20;
  std::size_t val_classes = 5;
  std::size_t novel_classes = 10;
  std::size_t samples_per_class = 60;
  std::size_t subset_size = 4;
  std::size_t families = 4;
  double signal = 1.0;
  double sigma_discriminative = 0.3;
  double sigma_background = 0.8;
  double sigma_semantic = 0.05;
  std::uint64_t seed = 0;

  std::size_t class_count(Split s) const {
    switch (s) {
      case Split::base: return base_classes;
      case Split::val: return val_classes;
      case Split::novel: return novel_classes;
    }
    return 0;
  }

  std::size_t block_begin(std::size_t family) const { return family * visual_dim / families; }
  std::size_t block_end(std::size_t family) const { return (family + 1) * visual_dim / families; }

  void validate() const {
    if (visual_dim == 0 || semantic_dim == 0) fail(ErrorKind::spec, "dimensions must be positive");
    if (subset_size == 0) fail(ErrorKind::spec, "discriminative subset must be nonempty");
    if (subset_size > visual_dim) {
      fail(ErrorKind::spec, "subset size " + std::to_string(subset_size) + " exceeds d_v=" +
                                std::to_string(visual_dim));
    }
    if (families == 0 || families > visual_dim) fail(ErrorKind::spec, "family count must lie in [1, d_v]");
    for (std::size_t f = 0; f < families; ++f) {
      if (block_end(f) - block_begin(f) < subset_size) {
        fail(ErrorKind::spec, "family block of " + std::to_string(block_end(f) - block_begin(f)) +
                                  " dims cannot hold a subset of " + std::to_string(subset_size));
      }
    }
    if (samples_per_class == 0) fail(ErrorKind::spec, "samples per class must be positive");
    if (base_classes == 0) fail(ErrorKind::spec, "need at least one base class");
    if (!(sigma_discriminative >= 0.0) || !(sigma_semantic >= 0.0))
      fail(ErrorKind::spec, "noise levels must be >= 0");
    // Background noisier than the discriminative dims; all-zero noise is the
    // one allowed tie.
    const bool noiseless = sigma_background == 0.0 && sigma_discriminative == 0.0;
    if (!noiseless && !(sigma_background > sigma_discriminative))
      fail(ErrorKind::spec, "background noise must exceed discriminative noise");
    if (!(signal > 0.0)) fail(ErrorKind::spec, "signal magnitude must be > 0");
  }
};

struct SyntheticClass {
  std::string label;
  Split split;
  std::size_t family;
  std::vector<std::size_t> subset;  // discriminative dims, ascending
};

struct SyntheticBenchmark {
  FeatureSet features;
  EmbeddingTable embeddings;
  LabelResolver resolver;
  std::vector<SyntheticClass> classes;  // base, then val, then novel
  Matrix masks;                         // one row per class
  Matrix means;                         // one row per class
  Matrix semantic_map;                  // semantic_dim x visual_dim

  std::vector<std::size_t> families_of(const std::vector<std::string>& labels) const {
    std::vector<std::size_t> out;
    for (const auto& l : labels) {
      auto it = std::find_if(classes.begin(), classes.end(),
                             [&](const SyntheticClass& c) { return c.label == l; });
      if (it == classes.end()) fail(ErrorKind::data, "unknown synthetic label '" + l + "'");
      out.push_back(it->family);
    }
    return out;
  }
};

inline std::string synthetic_label(Split s, std::size_t i) {
  std::string idx = std::to_string(i);
  if (idx.size() < 2) idx.insert(0, 2 - idx.size(), '0');
  return std::string(to_string(s)) + "_" + idx;
}

inline SyntheticBenchmark generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "synthetic");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> pattern(0.5, 1.5);

  const std::size_t dv = spec.visual_dim;
  const std::size_t ds = spec.semantic_dim;
  const std::size_t total = spec.base_classes + spec.val_classes + spec.novel_classes;

  SyntheticBenchmark out{FeatureSet(dv), EmbeddingTable(ds), LabelResolver{}, {},
                         Matrix(total, dv), Matrix(total, dv), Matrix(ds, dv)};

  const double a_scale = 1.0 / std::sqrt(static_cast<double>(spec.subset_size));
  for (double& v : out.semantic_map.data()) v = io::quantize_float(a_scale * gauss(rng));

  std::size_t row = 0;
  for (Split split : kAllSplits) {
    for (std::size_t i = 0; i < spec.class_count(split); ++i, ++row) {
      SyntheticClass cls{synthetic_label(split, i), split, i % spec.families, {}};
      std::vector<std::size_t> block(spec.block_end(cls.family) - spec.block_begin(cls.family));
      std::iota(block.begin(), block.end(), spec.block_begin(cls.family));
      std::shuffle(block.begin(), block.end(), rng);
      cls.subset.assign(block.begin(), block.begin() + static_cast<std::ptrdiff_t>(spec.subset_size));
      std::sort(cls.subset.begin(), cls.subset.end());

      auto mask = out.masks.row(row);
      auto mean = out.means.row(row);
      for (std::size_t d : cls.subset) {
        mask[d] = 1.0;
        mean[d] = io::quantize_float(spec.signal * pattern(rng));
      }

      std::vector<double> sample(dv);
      for (std::size_t n = 0; n < spec.samples_per_class; ++n) {
        for (std::size_t d = 0; d < dv; ++d) {
          const double sigma = mask[d] > 0.0 ? spec.sigma_discriminative : spec.sigma_background;
          const double noise = gauss(rng);
          sample[d] = io::quantize_float(mean[d] + sigma * noise);
        }
        out.features.add_sample(split, cls.label, sample);
      }

      std::vector<double> sem(ds);
      for (std::size_t k = 0; k < ds; ++k) {
        double acc = 0.0;
        for (std::size_t d : cls.subset) acc += out.semantic_map(k, d);
        sem[k] = io::quantize_float(acc + spec.sigma_semantic * gauss(rng));
      }
      out.embeddings.add(cls.label, sem);
      out.resolver.add(cls.label, {cls.label});
      out.classes.push_back(std::move(cls));
    }
  }
  return out;
}

/// `<label>\t<family>` per class, in generation order.
inline std::string format_families(const std::vector<SyntheticClass>& classes) {
  std::string out;
  for (const auto& c : classes) out += c.label + "\t" + std::to_string(c.family) + "\n";
  return out;
}

inline std::vector<std::pair<std::string, std::size_t>> parse_families(
    std::string_view text, const std::filesystem::path& origin) {
  std::vector<std::pair<std::string, std::size_t>> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = io::trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto f = io::split(line, '\t');
    if (f.size() != 2) fail(ErrorKind::parse, io::where(origin, line_no) + ": expected '<label>\\t<family>'");
    std::size_t fam = 0;
    const auto [ptr, ec] = std::from_chars(f[1].data(), f[1].data() + f[1].size(), fam);
    if (ec != std::errc() || ptr != f[1].data() + f[1].size())
      fail(ErrorKind::parse, io::where(origin, line_no) + ": invalid family id");
    out.emplace_back(std::string(f[0]), fam);
  }
  return out;
}

}  // namespace fewshot
