// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pre-extracted visual features grouped by split and class.
//
// Feature TSV: a `#dim=<d>` header, then `<split>\t<label>\t<v1,...,vd>` per
// sample, with split one of base/val/novel. Classes keep the order in which
// they first appear, which fixes the row order of the base weight matrix.

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fewshot/datastore/text_io.hpp"
#include "fewshot/diffmath/matrix.hpp"

namespace fewshot {

enum class Split : std::size_t { base = 0, val = 1, novel = 2 };

inline constexpr std::array<Split, 3> kAllSplits{Split::base, Split::val, Split::novel};

constexpr std::string_view to_string(Split s) {
  switch (s) {
    case Split::base: return "base";
    case Split::val: return "val";
    case Split::novel: return "novel";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  for (Split sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  return std::nullopt;
}

struct ClassSamples {
  std::string label;
  Matrix samples;  // one row per sample
};

class FeatureSet {
 public:
  struct Location {
    Split split;
    std::size_t index;
  };

  explicit FeatureSet(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }

  const std::vector<ClassSamples>& classes(Split s) const {
    return splits_[static_cast<std::size_t>(s)];
  }
  const ClassSamples& at(Split s, std::size_t i) const { return classes(s).at(i); }
  std::size_t class_count(Split s) const { return classes(s).size(); }

  std::vector<std::string> labels(Split s) const {
    std::vector<std::string> out;
    for (const auto& c : classes(s)) out.push_back(c.label);
    return out;
  }

  std::optional<Location> find(std::string_view label) const {
    auto it = index_.find(std::string(label));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Appends one sample, creating the class on first sight.
  void add_sample(Split split, const std::string& label, std::span<const double> values) {
    if (values.size() != dim_) {
      fail(ErrorKind::dimension, "sample for '" + label + "' has " +
                                     std::to_string(values.size()) + " values, expected " +
                                     std::to_string(dim_));
    }
    auto& list = splits_[static_cast<std::size_t>(split)];
    auto it = index_.find(label);
    if (it == index_.end()) {
      index_.emplace(label, Location{split, list.size()});
      list.push_back(ClassSamples{label, Matrix()});
      list.back().samples.append_row(values);
      return;
    }
    if (it->second.split != split) {
      fail(ErrorKind::disjointness, "class '" + label + "' appears in both " +
                                        std::string(to_string(it->second.split)) + " and " +
                                        std::string(to_string(split)) + " splits");
    }
    list[it->second.index].samples.append_row(values);
  }

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& sp : splits_)
      for (const auto& c : sp) n += c.samples.rows();
    return n;
  }

  friend bool operator==(const FeatureSet& a, const FeatureSet& b) {
    if (a.dim_ != b.dim_) return false;
    for (std::size_t s = 0; s < 3; ++s) {
      if (a.splits_[s].size() != b.splits_[s].size()) return false;
      for (std::size_t i = 0; i < a.splits_[s].size(); ++i) {
        if (a.splits_[s][i].label != b.splits_[s][i].label ||
            !(a.splits_[s][i].samples == b.splits_[s][i].samples))
          return false;
      }
    }
    return true;
  }

 private:
  std::size_t dim_;
  std::array<std::vector<ClassSamples>, 3> splits_;
  std::unordered_map<std::string, Location> index_;
};

/// Per-class sample means of one split, one row per class.
inline Matrix class_means(const FeatureSet& fs, Split split) {
  const auto& cls = fs.classes(split);
  Matrix out(cls.size(), fs.dim());
  for (std::size_t c = 0; c < cls.size(); ++c) {
    const Matrix& s = cls[c].samples;
    auto dst = out.row(c);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      auto src = s.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    for (double& v : dst) v /= static_cast<double>(s.rows());
  }
  return out;
}

inline FeatureSet parse_features(std::string_view text, const std::filesystem::path& origin) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = end + 1;
    ++line_no;
    return true;
  };

  std::string_view line;
  if (!next_line(line) || line.substr(0, 5) != "#dim=") {
    fail(ErrorKind::parse, io::where(origin, 1) + ": expected '#dim=<d>' header");
  }
  std::size_t dim = 0;
  {
    const auto tok = io::trim(line.substr(5));
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), dim);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || dim == 0) {
      fail(ErrorKind::parse, io::where(origin, 1) + ": invalid dimension '" + std::string(tok) + "'");
    }
  }

  FeatureSet fs(dim);
  std::unordered_set<std::string> seen;
  std::vector<double> values;
  values.reserve(dim);
  while (next_line(line)) {
    if (io::trim(line).empty()) continue;
    const auto fields = io::split(line, '\t');
    if (fields.size() != 3) {
      fail(ErrorKind::parse, io::where(origin, line_no) + ": expected 3 tab-separated fields, got " +
                                 std::to_string(fields.size()));
    }
    const auto split = parse_split(fields[0]);
    if (!split) {
      fail(ErrorKind::parse, io::where(origin, line_no) + ": unknown split '" +
                                 std::string(fields[0]) + "'");
    }
    const std::string label(fields[1]);
    if (label.empty()) fail(ErrorKind::parse, io::where(origin, line_no) + ": empty class label");
    values.clear();
    for (auto tok : io::split(fields[2], ',')) values.push_back(io::parse_float32(tok, origin, line_no));
    if (values.size() != dim) {
      fail(ErrorKind::parse, io::where(origin, line_no) + ": " + std::to_string(values.size()) +
                                 " values, header declares dim=" + std::to_string(dim));
    }
    std::string key(fields[0]);
    key += '\t';
    key += label;
    key += '\t';
    key.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    if (!seen.insert(std::move(key)).second) {
      fail(ErrorKind::data, io::where(origin, line_no) + ": duplicate record for class '" + label + "'");
    }
    try {
      fs.add_sample(*split, label, values);
    } catch (const Error& e) {
      fail(e.kind(), io::where(origin, line_no) + ": " + e.what());
    }
  }
  return fs;
}

inline FeatureSet load_features(const std::filesystem::path& path) {
  return parse_features(io::read_file(path), path);
}

inline std::string format_features(const FeatureSet& fs) {
  std::string out = "#dim=" + std::to_string(fs.dim()) + "\n";
  for (Split s : kAllSplits) {
    for (const auto& c : fs.classes(s)) {
      for (std::size_t r = 0; r < c.samples.rows(); ++r) {
        out += to_string(s);
        out += '\t';
        out += c.label;
        out += '\t';
        auto row = c.samples.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) {
          if (j) out += ',';
          out += io::format_real(row[j]);
        }
        out += '\n';
      }
    }
  }
  return out;
}

inline void save_features(const FeatureSet& fs, const std::filesystem::path& path) {
  io::write_file(path, format_features(fs));
}

}  // namespace fewshot
