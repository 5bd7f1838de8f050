// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// RunConfig: every tunable of a CLI run in one JSON document. Parsing is
// strict (unknown keys and wrong types are config errors) and every field is
// written back out, so a parsed file re-serializes to one canonical text.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "fewshot/datastore/synthetic.hpp"
#include "fewshot/datastore/text_io.hpp"
#include "fewshot/evaluation.hpp"
#include "fewshot/generator.hpp"
#include "fewshot/training.hpp"

namespace fewshot::cli {

using nlohmann::json;

struct Paths {
  std::string features, embeddings, resolver, checkpoint, base_weights, families, out;
};

struct CcaOptions {
  std::size_t components = 1;
  std::optional<double> epsilon;  // unset: 1e-3 * trace / d per side
  std::string heldout_split = "val";
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string variant = "sega";
  Paths paths;
  SyntheticSpec synthetic;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::size_t> shots{1, 5};
  CcaOptions cca;
  std::size_t cluster_k = 0;  // 0: number of families in --families

  // Configs handed to the library, with the global seed threaded through.
  SyntheticSpec synthetic_spec() const {
    auto s = synthetic;
    s.seed = seed;
    return s;
  }
  TrainConfig train_config() const {
    auto t = train;
    t.seed = seed;
    return t;
  }
  EvalConfig eval_config() const {
    auto e = eval;
    e.seed = seed;
    return e;
  }
};

namespace detail {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seeds are read as size_t");

// Reads fields of one JSON object and rejects whatever was not read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorKind::config, where_ + ": expected a JSON object");
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const char* key, std::size_t& out) {
    if (auto* v = find(key)) {
      if (!v->is_number_unsigned()) bad(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, double& out) {
    if (auto* v = find(key)) {
      if (!v->is_number()) bad(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (auto* v = find(key)) {
      if (!v->is_boolean()) bad(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (auto* v = find(key)) {
      if (!v->is_string()) bad(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::optional<double>& out) {
    if (auto* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_number()) {
        out = v->get<double>();
      } else {
        bad(key, "a number or null");
      }
    }
  }
  void read(const char* key, std::vector<std::size_t>& out) {
    if (auto* v = find(key)) {
      if (!v->is_array()) bad(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) bad(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  template <typename F>
  void object(const char* key, F&& f) {
    if (auto* v = find(key)) {
      ObjectReader sub(*v, where_ + "." + key);
      f(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(ErrorKind::config, where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  [[noreturn]] void bad(const char* key, const char* expected) const {
    fail(ErrorKind::config, where_ + "." + key + ": expected " + expected);
  }

  const json& j_;
  std::string where_;
  std::set<std::string, std::less<>> seen_;
};

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& s = c.synthetic;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& e = c.eval;
  json j;
  j["seed"] = c.seed;
  j["variant"] = c.variant;
  j["paths"] = {{"features", c.paths.features},     {"embeddings", c.paths.embeddings},
                {"resolver", c.paths.resolver},     {"checkpoint", c.paths.checkpoint},
                {"base_weights", c.paths.base_weights}, {"families", c.paths.families},
                {"out", c.paths.out}};
  j["synthetic"] = {{"visual_dim", s.visual_dim},
                    {"semantic_dim", s.semantic_dim},
                    {"base_classes", s.base_classes},
                    {"val_classes", s.val_classes},
                    {"novel_classes", s.novel_classes},
                    {"samples_per_class", s.samples_per_class},
                    {"subset_size", s.subset_size},
                    {"families", s.families},
                    {"signal", s.signal},
                    {"sigma_discriminative", s.sigma_discriminative},
                    {"sigma_background", s.sigma_background},
                    {"sigma_semantic", s.sigma_semantic}};
  j["model"] = {{"attn_hidden_dim", m.attn_hidden_dim}, {"dropout", m.dropout},
                {"gamma_init", m.gamma_init},           {"temp_init", m.temp_init},
                {"lambda1_init", m.lambda1_init},       {"lambda2_init", m.lambda2_init},
                {"key_init_range", m.key_init_range}};
  j["train"] = {{"base_epochs", t.base_epochs},
                {"base_batch_size", t.base_batch_size},
                {"base_lr", t.base_lr},
                {"base_temp", t.base_temp},
                {"epochs", t.epochs},
                {"episodes_per_epoch", t.episodes_per_epoch},
                {"lr", t.lr},
                {"milestones", t.milestones},
                {"decay", t.decay},
                {"n_way", t.n_way},
                {"k_shot", t.k_shot},
                {"queries_per_class", t.queries_per_class},
                {"train_base", t.train_base},
                {"include_base_queries", t.include_base_queries},
                {"divergence_window", t.divergence_window},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay}};
  j["eval"] = {{"n_way", e.n_way},
               {"k_shot", e.k_shot},
               {"queries_per_class", e.queries_per_class},
               {"episodes", e.episodes},
               {"stability_episodes", e.stability_episodes},
               {"threads", e.threads}};
  j["shots"] = c.shots;
  j["cca"] = {{"components", c.cca.components},
              {"epsilon", c.cca.epsilon ? json(*c.cca.epsilon) : json(nullptr)},
              {"heldout_split", c.cca.heldout_split}};
  j["cluster"] = {{"k", c.cluster_k}};
  return j;
}

inline std::string canonical_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline void validate(const RunConfig& c) {
  if (!parse_variant(c.variant)) fail(ErrorKind::config, "unknown variant '" + c.variant + "'");
  if (!parse_split(c.cca.heldout_split)) fail(ErrorKind::config, "unknown cca.heldout_split '" + c.cca.heldout_split + "'");
  if (c.cca.components == 0) fail(ErrorKind::config, "cca.components must be positive");
  if (c.shots.empty()) fail(ErrorKind::config, "shots must list at least one shot count");
  for (auto k : c.shots)
    if (k == 0) fail(ErrorKind::config, "shot counts must be positive");
  if (!(c.model.dropout >= 0.0 && c.model.dropout < 1.0)) fail(ErrorKind::config, "model.dropout must lie in [0,1)");
  if (c.model.attn_hidden_dim == 0) fail(ErrorKind::config, "model.attn_hidden_dim must be positive");
  if (!(c.model.gamma_init > 0.0) || !(c.model.temp_init > 0.0))
    fail(ErrorKind::config, "model.gamma_init and model.temp_init must be > 0");
  c.train_config().validate();
  if (c.eval.n_way == 0 || c.eval.k_shot == 0 || c.eval.queries_per_class == 0)
    fail(ErrorKind::config, "eval n_way, k_shot and queries_per_class must be positive");
  if (c.eval.episodes == 0 || c.eval.stability_episodes == 0) fail(ErrorKind::config, "episode counts must be positive");
}

/// Applies the fields present in `j` on top of `c`.
inline void merge_json(RunConfig& c, const json& j, const std::string& where = "config") {
  detail::ObjectReader r(j, where);
  r.read("seed", c.seed);
  r.read("variant", c.variant);
  r.object("paths", [&](detail::ObjectReader& p) {
    p.read("features", c.paths.features);
    p.read("embeddings", c.paths.embeddings);
    p.read("resolver", c.paths.resolver);
    p.read("checkpoint", c.paths.checkpoint);
    p.read("base_weights", c.paths.base_weights);
    p.read("families", c.paths.families);
    p.read("out", c.paths.out);
  });
  r.object("synthetic", [&](detail::ObjectReader& s) {
    auto& v = c.synthetic;
    s.read("visual_dim", v.visual_dim);
    s.read("semantic_dim", v.semantic_dim);
    s.read("base_classes", v.base_classes);
    s.read("val_classes", v.val_classes);
    s.read("novel_classes", v.novel_classes);
    s.read("samples_per_class", v.samples_per_class);
    s.read("subset_size", v.subset_size);
    s.read("families", v.families);
    s.read("signal", v.signal);
    s.read("sigma_discriminative", v.sigma_discriminative);
    s.read("sigma_background", v.sigma_background);
    s.read("sigma_semantic", v.sigma_semantic);
  });
  r.object("model", [&](detail::ObjectReader& s) {
    auto& v = c.model;
    s.read("attn_hidden_dim", v.attn_hidden_dim);
    s.read("dropout", v.dropout);
    s.read("gamma_init", v.gamma_init);
    s.read("temp_init", v.temp_init);
    s.read("lambda1_init", v.lambda1_init);
    s.read("lambda2_init", v.lambda2_init);
    s.read("key_init_range", v.key_init_range);
  });
  r.object("train", [&](detail::ObjectReader& s) {
    auto& v = c.train;
    s.read("base_epochs", v.base_epochs);
    s.read("base_batch_size", v.base_batch_size);
    s.read("base_lr", v.base_lr);
    s.read("base_temp", v.base_temp);
    s.read("epochs", v.epochs);
    s.read("episodes_per_epoch", v.episodes_per_epoch);
    s.read("lr", v.lr);
    s.read("milestones", v.milestones);
    s.read("decay", v.decay);
    s.read("n_way", v.n_way);
    s.read("k_shot", v.k_shot);
    s.read("queries_per_class", v.queries_per_class);
    s.read("train_base", v.train_base);
    s.read("include_base_queries", v.include_base_queries);
    s.read("divergence_window", v.divergence_window);
    s.read("momentum", v.momentum);
    s.read("weight_decay", v.weight_decay);
  });
  r.object("eval", [&](detail::ObjectReader& s) {
    auto& v = c.eval;
    s.read("n_way", v.n_way);
    s.read("k_shot", v.k_shot);
    s.read("queries_per_class", v.queries_per_class);
    s.read("episodes", v.episodes);
    s.read("stability_episodes", v.stability_episodes);
    s.read("threads", v.threads);
  });
  r.read("shots", c.shots);
  r.object("cca", [&](detail::ObjectReader& s) {
    s.read("components", c.cca.components);
    s.read("epsilon", c.cca.epsilon);
    s.read("heldout_split", c.cca.heldout_split);
  });
  r.object("cluster", [&](detail::ObjectReader& s) { s.read("k", c.cluster_k); });
  r.finish();
}

inline json parse_json_text(std::string_view text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, origin + ": invalid JSON (" + e.what() + ")");
  }
}

inline RunConfig parse_run_config(std::string_view text, const std::string& origin = "config") {
  RunConfig c;
  merge_json(c, parse_json_text(text, origin), origin);
  validate(c);
  return c;
}

/// Reads a RunConfig file. A run.json written by a previous run is accepted
/// too; its "config" member is used.
inline void merge_config_file(RunConfig& c, const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  json j = parse_json_text(text, path.string());
  if (j.is_object() && j.value("format", "") == "fewshot-run") {
    if (!j.contains("config")) fail(ErrorKind::config, path.string() + ": run record has no config");
    j = j.at("config");
  }
  merge_json(c, j, path.string());
}

}  // namespace fewshot::cli
