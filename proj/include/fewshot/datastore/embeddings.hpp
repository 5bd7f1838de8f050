// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Label embeddings in GloVe text format plus per-label fallback chains.
//
// A class label resolves to the vector of the first token of its chain that
// the table contains. Chains list the label phrase first (multi-word labels
// joined by underscores) and then successively more general hypernyms.
// Per-word averaging and zero-vector substitution are deliberately absent.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fewshot/datastore/text_io.hpp"
#include "fewshot/diffmath/matrix.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim = 0) : dim_(dim), vectors_(0, dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  std::span<const double> at(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) fail(ErrorKind::data, "token '" + std::string(token) + "' not in table");
    return vectors_.row(it->second);
  }

  void add(const std::string& token, std::span<const double> vec) {
    if (vec.size() != dim_) {
      fail(ErrorKind::dimension, "embedding for '" + token + "' has " +
                                     std::to_string(vec.size()) + " values, expected " +
                                     std::to_string(dim_));
    }
    if (!index_.emplace(token, tokens_.size()).second) {
      fail(ErrorKind::data, "duplicate token '" + token + "'");
    }
    tokens_.push_back(token);
    vectors_.append_row(vec);
  }

  /// Overwrites an existing token's vector.
  void set(std::string_view token, std::span<const double> vec) {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) fail(ErrorKind::data, "token '" + std::string(token) + "' not in table");
    std::copy(vec.begin(), vec.end(), vectors_.row(it->second).begin());
  }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dim_ == b.dim_ && a.tokens_ == b.tokens_ && a.vectors_ == b.vectors_;
  }

 private:
  std::size_t dim_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  Matrix vectors_;
};

inline EmbeddingTable parse_embeddings(std::string_view text, std::size_t expected_dim,
                                       const std::filesystem::path& origin) {
  EmbeddingTable table(expected_dim);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  std::vector<double> vec;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto toks = io::split_whitespace(line);
    if (toks.empty()) continue;
    if (toks.size() - 1 != expected_dim) {
      fail(ErrorKind::parse, io::where(origin, line_no) + ": token '" + std::string(toks[0]) +
                                 "' has " + std::to_string(toks.size() - 1) +
                                 " values, expected " + std::to_string(expected_dim));
    }
    vec.clear();
    for (std::size_t i = 1; i < toks.size(); ++i) vec.push_back(io::parse_float32(toks[i], origin, line_no));
    const std::string token(toks[0]);
    if (table.contains(token)) {
      fail(ErrorKind::data, io::where(origin, line_no) + ": duplicate token '" + token + "'");
    }
    table.add(token, vec);
  }
  return table;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path, std::size_t expected_dim) {
  return parse_embeddings(io::read_file(path), expected_dim, path);
}

/// Width of the first non-empty line of a GloVe-format file.
inline std::size_t sniff_embedding_dim(const std::filesystem::path& path) {
  auto in = io::open_input(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto toks = io::split_whitespace(line);
    if (!toks.empty()) {
      if (toks.size() < 2) fail(ErrorKind::parse, io::where(path, 1) + ": token without values");
      return toks.size() - 1;
    }
  }
  fail(ErrorKind::parse, "embedding file '" + path.string() + "' is empty");
}

inline std::string format_embeddings(const EmbeddingTable& table) {
  std::string out;
  for (const auto& tok : table.tokens()) {
    out += tok;
    for (double v : table.at(tok)) {
      out += ' ';
      out += io::format_real(v);
    }
    out += '\n';
  }
  return out;
}

inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  io::write_file(path, format_embeddings(table));
}

class LabelResolver {
 public:
  void add(const std::string& label, std::vector<std::string> chain) {
    if (chain.empty()) fail(ErrorKind::data, "empty fallback chain for '" + label + "'");
    if (!chains_.emplace(label, std::move(chain)).second) {
      fail(ErrorKind::data, "duplicate resolver entry for '" + label + "'");
    }
    labels_.push_back(label);
  }

  bool contains(std::string_view label) const { return chains_.count(std::string(label)) > 0; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  const std::vector<std::string>& chain(std::string_view label) const {
    auto it = chains_.find(std::string(label));
    if (it == chains_.end()) {
      fail(ErrorKind::unresolvable_label, "label '" + std::string(label) + "' has no resolver entry");
    }
    return it->second;
  }

  friend bool operator==(const LabelResolver& a, const LabelResolver& b) {
    return a.labels_ == b.labels_ && a.chains_ == b.chains_;
  }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::vector<std::string>> chains_;
};

inline LabelResolver parse_resolver(std::string_view text, const std::filesystem::path& origin) {
  LabelResolver r;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (io::trim(line).empty()) continue;
    const auto fields = io::split(line, '\t');
    if (fields.size() != 2 || fields[0].empty()) {
      fail(ErrorKind::parse, io::where(origin, line_no) + ": expected '<label>\\t<token,...>'");
    }
    std::vector<std::string> chain;
    for (auto tok : io::split(fields[1], ',')) {
      tok = io::trim(tok);
      if (tok.empty()) fail(ErrorKind::parse, io::where(origin, line_no) + ": empty token in chain");
      chain.emplace_back(tok);
    }
    try {
      r.add(std::string(fields[0]), std::move(chain));
    } catch (const Error& e) {
      fail(e.kind(), io::where(origin, line_no) + ": " + e.what());
    }
  }
  return r;
}

inline LabelResolver load_resolver(const std::filesystem::path& path) {
  return parse_resolver(io::read_file(path), path);
}

inline std::string format_resolver(const LabelResolver& r) {
  std::string out;
  for (const auto& label : r.labels()) {
    out += label;
    out += '\t';
    const auto& chain = r.chain(label);
    for (std::size_t i = 0; i < chain.size(); ++i) {
      if (i) out += ',';
      out += chain[i];
    }
    out += '\n';
  }
  return out;
}

inline void save_resolver(const LabelResolver& r, const std::filesystem::path& path) {
  io::write_file(path, format_resolver(r));
}

struct Resolution {
  std::string label;
  std::string token;                // chain entry that hit
  std::size_t depth = 0;            // 0 = the label's own token
  std::vector<std::string> missed;  // chain entries tried before the hit
  std::vector<double> vector;
};

inline Resolution resolve_label_embedding(std::string_view label, const LabelResolver& resolver,
                                          const EmbeddingTable& table) {
  const auto& chain = resolver.chain(label);
  Resolution res;
  res.label = std::string(label);
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (table.contains(chain[i])) {
      res.token = chain[i];
      res.depth = i;
      const auto v = table.at(chain[i]);
      res.vector.assign(v.begin(), v.end());
      return res;
    }
    res.missed.push_back(chain[i]);
  }
  std::string tried;
  for (const auto& t : chain) tried += (tried.empty() ? "" : ",") + t;
  fail(ErrorKind::unresolvable_label,
       "label '" + std::string(label) + "' unresolvable; tried [" + tried + "]");
}

/// Resolved semantic vectors for `labels`, one row each, plus the audit trail.
struct SemanticMatrix {
  Matrix vectors;
  std::vector<Resolution> resolutions;
};

inline SemanticMatrix resolve_all(const std::vector<std::string>& labels,
                                  const LabelResolver& resolver, const EmbeddingTable& table) {
  SemanticMatrix out{Matrix(0, table.dim()), {}};
  for (const auto& l : labels) {
    auto r = resolve_label_embedding(l, resolver, table);
    out.vectors.append_row(r.vector);
    out.resolutions.push_back(std::move(r));
  }
  return out;
}

/// Copy of `table` where the vectors of `tokens` are permuted by a derangement.
inline EmbeddingTable shuffle_semantics(const EmbeddingTable& table,
                                        const std::vector<std::string>& tokens, std::uint64_t seed) {
  const auto perm = random_derangement(tokens.size(), seed);
  EmbeddingTable out = table;
  for (std::size_t i = 0; i < tokens.size(); ++i) out.set(tokens[i], table.at(tokens[perm[i]]));
  return out;
}

/// Rows of `m` permuted so that row i receives row perm[i], perm a derangement.
inline Matrix derange_rows(const Matrix& m, std::uint64_t seed) {
  const auto perm = random_derangement(m.rows(), seed);
  return gather_rows(m, perm);
}

}  // namespace fewshot
