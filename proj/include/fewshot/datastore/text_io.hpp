// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot::io {

/// Nine significant digits: exact for values representable in 32-bit floats.
inline std::string format_real(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline double quantize_float(double v) { return static_cast<double>(static_cast<float>(v)); }

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string_view> split_whitespace(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    const std::size_t b = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r') ++i;
    if (i > b) out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

/// Parses a finite real or throws a parse error pointing at `path:line`.
inline double parse_real(std::string_view tok, const std::filesystem::path& path,
                         std::size_t line) {
  tok = trim(tok);
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    fail(ErrorKind::parse, where(path, line) + ": invalid real '" + std::string(tok) + "'");
  }
  return v;
}

/// Like parse_real, rounded to 32-bit precision. Feature and embedding files
/// carry float data; rounding on load makes save/load an exact identity.
inline double parse_float32(std::string_view tok, const std::filesystem::path& path, std::size_t line) {
  const double v = quantize_float(parse_real(tok, path, line));
  if (!std::isfinite(v)) {
    fail(ErrorKind::parse, where(path, line) + ": value '" + std::string(trim(tok)) + "' overflows 32-bit range");
  }
  return v;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::string read_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes `contents` to `path`, replacing it. Goes through a sibling temp
/// file so a failed write never leaves a truncated artifact.
inline void write_file(const std::filesystem::path& path, std::string_view contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::io, "write to '" + path.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot move '" + tmp + "' into place: " + ec.message());
}

}  // namespace fewshot::io
