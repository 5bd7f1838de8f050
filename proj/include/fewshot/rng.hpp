// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based stream derivation: the engine for draw `counter` of stream
/// `tag` under `seed` depends on nothing else, so draws can be produced in
/// any order or on any worker.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                    std::uint64_t counter = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a64(tag)) + splitmix64(counter + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::string_view tag, std::uint64_t counter = 0) {
  return Rng(derive_seed(seed, tag, counter));
}

/// Uniform permutation of [0, n) without fixed points, by rejection.
inline std::vector<std::size_t> random_derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) {
    fail(ErrorKind::impossible_derangement,
         "a derangement needs at least 2 elements, got " + std::to_string(n));
  }
  Rng rng = make_rng(seed, "derangement");
  std::vector<std::size_t> perm(n);
  for (;;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n && !fixed; ++i) fixed = perm[i] == i;
    if (!fixed) return perm;
  }
}

}  // namespace fewshot
