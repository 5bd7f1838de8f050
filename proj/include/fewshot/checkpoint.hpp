// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Versioned JSON checkpoints. Each matrix field is stored as
// {"rows": r, "cols": c, "data": [...]} with doubles written at full
// round-trip precision, so load(save(p)) == p bit for bit.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "fewshot/datastore/text_io.hpp"
#include "fewshot/generator.hpp"

namespace fewshot {

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointFormat = "fewshot-checkpoint";

struct Checkpoint {
  SegaParams params;
  std::vector<std::string> base_labels;  // W_base row order
  std::string fingerprint;               // config fingerprint of the producing run
};

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

inline Matrix matrix_from_json(const nlohmann::json& doc, const std::string& field) {
  if (!doc.contains(field)) fail(ErrorKind::parse, "checkpoint: missing field '" + field + "'");
  const auto& j = doc.at(field);
  if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data") ||
      !j.at("data").is_array()) {
    fail(ErrorKind::parse, "checkpoint: field '" + field + "' is not a {rows, cols, data} matrix");
  }
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != rows * cols) {
    fail(ErrorKind::shape_mismatch, "checkpoint: field '" + field + "' declares " + Matrix::shape_string(rows, cols) +
                                        " but holds " + std::to_string(data.size()) + " values");
  }
  return Matrix(rows, cols, std::move(data));
}

}  // namespace detail

inline std::string format_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  nlohmann::json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["fingerprint"] = ck.fingerprint;
  doc["base_labels"] = ck.base_labels;
  doc["w_base"] = detail::matrix_to_json(p.w_base);
  doc["keys"] = detail::matrix_to_json(p.keys);
  doc["phi_q"] = detail::matrix_to_json(p.phi_q);
  doc["mlp_w1"] = detail::matrix_to_json(p.mlp_w1);
  doc["mlp_b1"] = detail::matrix_to_json(p.mlp_b1);
  doc["mlp_w2"] = detail::matrix_to_json(p.mlp_w2);
  doc["mlp_b2"] = detail::matrix_to_json(p.mlp_b2);
  doc["lambda1"] = p.lambda1;
  doc["lambda2"] = p.lambda2;
  doc["gamma"] = p.gamma;
  doc["temp"] = p.temp;
  return doc.dump(1) + "\n";
}

inline Checkpoint parse_checkpoint(std::string_view text, const std::filesystem::path& origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::parse, origin.string() + ": malformed or truncated checkpoint (" + e.what() + ")");
  }
  try {
    if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat) {
      fail(ErrorKind::parse, origin.string() + ": not a checkpoint document");
    }
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion) {
      fail(ErrorKind::version_mismatch, origin.string() + ": checkpoint version " + std::to_string(version) +
                                            ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.fingerprint = doc.at("fingerprint").get<std::string>();
    ck.base_labels = doc.at("base_labels").get<std::vector<std::string>>();
    auto& p = ck.params;
    p.w_base = detail::matrix_from_json(doc, "w_base");
    p.keys = detail::matrix_from_json(doc, "keys");
    p.phi_q = detail::matrix_from_json(doc, "phi_q");
    p.mlp_w1 = detail::matrix_from_json(doc, "mlp_w1");
    p.mlp_b1 = detail::matrix_from_json(doc, "mlp_b1");
    p.mlp_w2 = detail::matrix_from_json(doc, "mlp_w2");
    p.mlp_b2 = detail::matrix_from_json(doc, "mlp_b2");
    p.lambda1 = doc.at("lambda1").get<double>();
    p.lambda2 = doc.at("lambda2").get<double>();
    p.gamma = doc.at("gamma").get<double>();
    p.temp = doc.at("temp").get<double>();
    p.validate();
    if (ck.base_labels.size() != p.base_count()) {
      fail(ErrorKind::shape_mismatch, "checkpoint: base_labels lists " + std::to_string(ck.base_labels.size()) +
                                          " classes, w_base has " + std::to_string(p.base_count()) + " rows");
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, origin.string() + ": invalid checkpoint (" + e.what() + ")");
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, format_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path), path);
}

/// Refuses a checkpoint whose shapes do not fit the current run, naming the
/// first offending field.
inline void require_compatible(const Checkpoint& ck, std::size_t visual_dim, std::size_t semantic_dim,
                               const std::vector<std::string>& base_labels) {
  const auto& p = ck.params;
  if (p.visual_dim() != visual_dim) {
    fail(ErrorKind::shape_mismatch, "checkpoint field 'w_base' is " + p.w_base.shape() + " (d_v=" +
                                        std::to_string(p.visual_dim()) + "), run has d_v=" +
                                        std::to_string(visual_dim));
  }
  if (p.semantic_dim() != semantic_dim) {
    fail(ErrorKind::shape_mismatch, "checkpoint field 'mlp_w1' is " + p.mlp_w1.shape() + " (d_s=" +
                                        std::to_string(p.semantic_dim()) + "), run has d_s=" +
                                        std::to_string(semantic_dim));
  }
  if (ck.base_labels != base_labels) {
    fail(ErrorKind::shape_mismatch, "checkpoint field 'base_labels' does not match the base split of the features");
  }
}

}  // namespace fewshot
