// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fewshot {

enum class ErrorKind {
  dimension,
  degenerate_input,
  usage,
  determinism,
  state_corruption,
  parse,
  data,
  disjointness,
  unresolvable_label,
  spec,
  insufficient_samples,
  impossible_derangement,
  insufficient_coverage,
  undefined_correlation,
  degenerate_task,
  input,
  io,
  config,
  version_mismatch,
  shape_mismatch,
  numeric,
  divergence,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::degenerate_input: return "degenerate_input";
    case ErrorKind::usage: return "usage";
    case ErrorKind::determinism: return "determinism";
    case ErrorKind::state_corruption: return "state_corruption";
    case ErrorKind::parse: return "parse";
    case ErrorKind::data: return "data";
    case ErrorKind::disjointness: return "disjointness";
    case ErrorKind::unresolvable_label: return "unresolvable_label";
    case ErrorKind::spec: return "spec";
    case ErrorKind::insufficient_samples: return "insufficient_samples";
    case ErrorKind::impossible_derangement: return "impossible_derangement";
    case ErrorKind::insufficient_coverage: return "insufficient_coverage";
    case ErrorKind::undefined_correlation: return "undefined_correlation";
    case ErrorKind::degenerate_task: return "degenerate_task";
    case ErrorKind::input: return "input";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::divergence: return "divergence";
  }
  return "unknown";
}

/// Process exit status for an error kind: 2 config, 3 data, 4 numeric.
constexpr int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::config:
    case ErrorKind::spec:
      return 2;
    case ErrorKind::numeric:
    case ErrorKind::divergence:
    case ErrorKind::degenerate_input:
    case ErrorKind::determinism:
    case ErrorKind::state_corruption:
      return 4;
    default:
      return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace fewshot
