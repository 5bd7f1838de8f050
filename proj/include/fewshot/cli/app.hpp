// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The `fewshot` command suite. Every command reads its inputs, writes its
// artifacts under --out and finishes with run.json. On failure the artifacts
// written so far are removed and one JSON error line goes to stderr.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fewshot/analysis.hpp"
#include "fewshot/checkpoint.hpp"
#include "fewshot/cli/run_config.hpp"
#include "fewshot/datastore/embeddings.hpp"
#include "fewshot/datastore/features.hpp"
#include "fewshot/datastore/synthetic.hpp"
#include "fewshot/evaluation.hpp"
#include "fewshot/training.hpp"

namespace fewshot::cli {

inline constexpr std::string_view kRunFormat = "fewshot-run";
inline constexpr int kRunVersion = 1;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth-gen", "fit-base", "train",      "eval",        "ablate",
                                              "stability", "shot-sweep", "cca", "cluster-attn"};
  return names;
}

inline std::string error_line(std::string_view command, std::string_view kind, std::string_view message, int code) {
  json j;
  j["error"] = std::string(kind);
  j["message"] = std::string(message);
  j["command"] = std::string(command);
  j["exit_code"] = code;
  return j.dump();
}

/// Artifacts of one run; removed again if the run fails.
class Artifacts {
 public:
  explicit Artifacts(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    if (!std::filesystem::exists(root_, ec)) {
      std::filesystem::create_directories(root_, ec);
      if (ec) fail(ErrorKind::io, "cannot create output directory " + root_.string() + ": " + ec.message());
      created_root_ = true;
    } else if (!std::filesystem::is_directory(root_, ec)) {
      fail(ErrorKind::io, "--out " + root_.string() + " is not a directory");
    }
  }

  void write(const std::string& name, std::string_view contents) {
    const auto p = root_ / name;
    written_.push_back(name);
    io::write_file(p, contents);
  }

  void rollback() noexcept {
    std::error_code ec;
    for (const auto& n : written_) std::filesystem::remove(root_ / n, ec);
    written_.clear();
    if (created_root_ && std::filesystem::is_empty(root_, ec)) std::filesystem::remove(root_, ec);
  }

  const std::vector<std::string>& written() const noexcept { return written_; }
  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> written_;
  bool created_root_ = false;
};

/// State shared by the command implementations.
class Run {
 public:
  Run(std::string command, RunConfig cfg, std::ostream& out) : command_(std::move(command)), cfg_(std::move(cfg)), out_(out) {}

  const RunConfig& cfg() const noexcept { return cfg_; }
  std::ostream& out() { return out_; }

  const std::string& require(const std::string& value, std::string_view flag) const {
    if (value.empty()) fail(ErrorKind::config, "'" + command_ + "' requires " + std::string(flag));
    return value;
  }

  // Inputs are digested as they are loaded, for run.json.
  std::filesystem::path input(const std::string& role, const std::string& value, const char* flag) {
    const std::filesystem::path p = require(value, flag);
    inputs_[role] = {p.string(), hex64(fnv1a64(io::read_file(p)))};
    return p;
  }

  FeatureSet features() { return load_features(input("features", cfg_.paths.features, "--features")); }

  EmbeddingTable embeddings(std::optional<std::size_t> dim = std::nullopt) {
    const auto p = input("embeddings", cfg_.paths.embeddings, "--embeddings");
    return load_embeddings(p, dim ? *dim : sniff_embedding_dim(p));
  }

  LabelResolver resolver() { return load_resolver(input("resolver", cfg_.paths.resolver, "--resolver")); }

  Checkpoint checkpoint() { return load_checkpoint(input("checkpoint", cfg_.paths.checkpoint, "--checkpoint")); }

  /// Config fingerprint: command, canonical config minus the output path, and input digests.
  std::string fingerprint() const {
    RunConfig c = cfg_;
    c.paths.out.clear();
    std::string text = command_ + "\n" + canonical_text(c);
    for (const auto& [role, in] : inputs_) text += role + "=" + in.second + "\n";
    return hex64(fnv1a64(text));
  }

  std::string record(const std::vector<std::string>& outputs) const {
    json j;
    j["format"] = kRunFormat;
    j["version"] = kRunVersion;
    j["command"] = command_;
    j["config"] = to_json(cfg_);
    j["fingerprint"] = fingerprint();
    j["inputs"] = json::object();
    for (const auto& [role, in] : inputs_) j["inputs"][role] = {{"path", in.first}, {"fnv1a64", in.second}};
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
  }

 private:
  std::string command_;
  RunConfig cfg_;
  std::ostream& out_;
  std::map<std::string, std::pair<std::string, std::string>> inputs_;
};

namespace commands {

inline json mean_ci_json(const MeanCi& m) { return {{"mean", m.mean}, {"ci95", m.ci95}, {"text", format_accuracy(m)}}; }

inline json report_json(const EvalReport& r) {
  return {{"variant", to_string(r.variant)},
          {"n_way", r.n_way},
          {"k_shot", r.k_shot},
          {"queries_per_class", r.queries_per_class},
          {"episodes", r.episodes},
          {"seed", r.seed},
          {"mean", r.mean},
          {"ci95", r.ci95},
          {"accuracy", format_accuracy(r.summary())},
          {"fingerprint", r.fingerprint}};
}

// Checkpoint, features and (when needed) novel semantics, checked against each other.
struct EvalInputs {
  Checkpoint ck;
  FeatureSet fs;
  Matrix novel_semantics;
};

inline EvalInputs load_eval_inputs(Run& run, bool need_semantics) {
  const auto& c = run.cfg();
  run.require(c.paths.checkpoint, "--checkpoint");
  run.require(c.paths.features, "--features");
  if (need_semantics) {
    run.require(c.paths.embeddings, "--embeddings");
    run.require(c.paths.resolver, "--resolver");
  }
  EvalInputs in{run.checkpoint(), run.features(), {}};
  const std::size_t ds = in.ck.params.semantic_dim();
  if (need_semantics) {
    const auto table = run.embeddings();
    const auto resolver = run.resolver();
    require_compatible(in.ck, in.fs.dim(), table.dim(), in.fs.labels(Split::base));
    in.novel_semantics = resolve_all(in.fs.labels(Split::novel), resolver, table).vectors;
  } else {
    require_compatible(in.ck, in.fs.dim(), ds, in.fs.labels(Split::base));
    in.novel_semantics = Matrix(in.fs.class_count(Split::novel), ds);
  }
  return in;
}

inline void synth_gen(Run& run, Artifacts& art) {
  const auto spec = run.cfg().synthetic_spec();
  const auto b = generate_synthetic(spec);
  art.write("features.tsv", format_features(b.features));
  art.write("embeddings.txt", format_embeddings(b.embeddings));
  art.write("resolver.tsv", format_resolver(b.resolver));
  art.write("families.tsv", format_families(b.classes));
  run.out() << "synthetic benchmark: " << b.classes.size() << " classes, " << b.features.sample_count()
            << " samples\n";
}

inline void fit_base(Run& run, Artifacts& art) {
  const auto fs = run.features();
  const auto fit = fit_base_weights(fs, run.cfg().train_config());
  art.write("base_weights.tsv", format_labeled_vectors(fit.w_base, fs.labels(Split::base)));
  art.write("base_log.jsonl", format_epoch_log(fit.log));
  json s{{"train_accuracy", fit.train_accuracy}, {"classes", fit.w_base.rows()}, {"visual_dim", fit.w_base.cols()}};
  art.write("fit_base.json", s.dump(2) + "\n");
  run.out() << "base weights: train accuracy " << io::format_real(fit.train_accuracy) << "\n";
}

inline void train(Run& run, Artifacts& art) {
  const auto& c = run.cfg();
  run.require(c.paths.features, "--features");
  run.require(c.paths.embeddings, "--embeddings");
  run.require(c.paths.resolver, "--resolver");
  const auto fs = run.features();
  const auto table = run.embeddings();
  const auto resolver = run.resolver();
  const auto bs = base_semantics(fs, resolver, table);
  const auto tc = c.train_config();

  Matrix w_base;
  json summary;
  if (!c.paths.base_weights.empty()) {
    auto lv = load_labeled_vectors(run.input("base_weights", c.paths.base_weights, "--base-weights"));
    if (lv.labels != fs.labels(Split::base) || lv.vectors.cols() != fs.dim()) {
      fail(ErrorKind::shape_mismatch, "base weights do not match the base split of the features");
    }
    w_base = std::move(lv.vectors);
  } else {
    auto fit = fit_base_weights(fs, tc);
    art.write("base_log.jsonl", format_epoch_log(fit.log));
    summary["base_train_accuracy"] = fit.train_accuracy;
    w_base = std::move(fit.w_base);
  }

  auto p0 = init_params(std::move(w_base), table.dim(), c.model, c.seed);
  auto res = train_stage2(fs, bs.vectors, std::move(p0), c.model, tc,
                          [&](const EpochRecord& r) { run.out() << format_epoch_record(r) << "\n"; });
  const Checkpoint ck{res.params, fs.labels(Split::base), run.fingerprint()};
  art.write("checkpoint.json", format_checkpoint(ck));
  art.write("train_log.jsonl", format_epoch_log(res.log));
  summary["fingerprint"] = ck.fingerprint;
  summary["final_mean_loss"] = res.log.back().mean_loss;
  summary["final_accuracy"] = res.log.back().accuracy;
  summary["lambda1"] = res.params.lambda1;
  summary["lambda2"] = res.params.lambda2;
  summary["gamma"] = res.params.gamma;
  summary["temp"] = res.params.temp;
  art.write("train.json", summary.dump(2) + "\n");
}

inline void eval(Run& run, Artifacts& art) {
  const auto variant = *parse_variant(run.cfg().variant);
  auto in = load_eval_inputs(run, variant != Variant::none);
  const auto rep = evaluate(in.ck.params, in.fs, in.novel_semantics, run.cfg().eval_config(), variant);
  json j = report_json(rep);
  j["checkpoint_fingerprint"] = in.ck.fingerprint;
  art.write("eval.json", j.dump(2) + "\n");
  art.write("episodes.tsv", format_episode_tsv(rep));
  run.out() << to_string(variant) << " " << format_accuracy(rep.summary()) << "\n";
}

inline void ablate(Run& run, Artifacts& art) {
  auto in = load_eval_inputs(run, true);
  const auto t = run_ablation(in.ck.params, in.fs, in.novel_semantics, run.cfg().eval_config());
  json j;
  j["checkpoint_fingerprint"] = in.ck.fingerprint;
  for (const auto& r : t.reports) j["variants"][std::string(to_string(r.variant))] = report_json(r);
  art.write("ablation.json", j.dump(2) + "\n");
  art.write("ablation.txt", format_ablation_table(t));

  std::string tsv = "episode\tdigest";
  for (const auto& r : t.reports) tsv += "\t" + std::string(to_string(r.variant));
  tsv += "\n";
  for (std::size_t i = 0; i < t.reports.front().episodes; ++i) {
    tsv += std::to_string(i) + "\t" + hex64(t.reports.front().episode_digests[i]);
    for (const auto& r : t.reports) tsv += "\t" + io::format_real(r.accuracies[i]);
    tsv += "\n";
  }
  art.write("ablation_episodes.tsv", tsv);
  run.out() << format_ablation_table(t);
}

inline void stability(Run& run, Artifacts& art) {
  auto in = load_eval_inputs(run, true);
  json j;
  j["checkpoint_fingerprint"] = in.ck.fingerprint;
  for (auto v : {Variant::sega, Variant::none, Variant::inverse}) {
    const auto r = prototype_stability(in.ck.params, in.fs, in.novel_semantics, run.cfg().eval_config(), v);
    const std::string name(to_string(v));
    j["variants"][name] = {{"episodes", r.episodes}, {"intra", r.intra}, {"inter", r.inter},
                           {"ratio", r.ratio},       {"degenerate", r.degenerate}};
    art.write("prototypes_" + name + ".tsv", format_labeled_vectors(r.weights, r.labels));
    run.out() << name << " ratio " << io::format_real(r.ratio) << "\n";
  }
  art.write("stability.json", j.dump(2) + "\n");
}

inline void shot_sweep_cmd(Run& run, Artifacts& art) {
  auto in = load_eval_inputs(run, true);
  const auto pts = shot_sweep(in.ck.params, in.fs, in.novel_semantics, run.cfg().eval_config(), run.cfg().shots);
  json j;
  j["checkpoint_fingerprint"] = in.ck.fingerprint;
  j["points"] = json::array();
  for (const auto& p : pts) {
    j["points"].push_back({{"k_shot", p.k_shot},
                           {"sega", mean_ci_json(p.sega)},
                           {"none", mean_ci_json(p.none)},
                           {"gain", {{"mean", p.gain.mean}, {"ci95", p.gain.ci95}}}});
  }
  if (pts.size() >= 2) {
    const auto d = gain_difference(pts.front().gain, pts.back().gain);
    j["gain_difference"] = {{"from_k", pts.front().k_shot}, {"to_k", pts.back().k_shot}, {"mean", d.mean}, {"ci95", d.ci95}};
  }
  art.write("shot_sweep.json", j.dump(2) + "\n");
  art.write("shot_sweep.tsv", format_shot_sweep_tsv(pts));
  run.out() << format_shot_sweep_tsv(pts);
}

inline void cca(Run& run, Artifacts& art) {
  const auto& c = run.cfg();
  run.require(c.paths.features, "--features");
  run.require(c.paths.embeddings, "--embeddings");
  run.require(c.paths.resolver, "--resolver");
  const auto fs = run.features();
  const auto table = run.embeddings();
  const auto resolver = run.resolver();
  const Split held = *parse_split(c.cca.heldout_split);
  if (held == Split::base) fail(ErrorKind::config, "cca.heldout_split must differ from the base split");

  const auto xb = class_means(fs, Split::base);
  const auto yb = resolve_all(fs.labels(Split::base), resolver, table).vectors;
  const auto xh = class_means(fs, held);
  const auto yh = resolve_all(fs.labels(held), resolver, table).vectors;
  const auto model = cca_fit(xb, yb, c.cca.components, c.cca.epsilon);
  const double heldout = cca_correlation(model, xh, yh);
  const double shuffled = cca_correlation(model, xh, derange_rows(yh, derive_seed(c.seed, "cca-shuffle")));

  json j{{"train_classes", xb.rows()},
         {"heldout_split", c.cca.heldout_split},
         {"heldout_classes", xh.rows()},
         {"components", model.components()},
         {"correlations", model.correlations},
         {"spectrum", model.spectrum},
         {"eps_visual", model.eps_x},
         {"eps_semantic", model.eps_y},
         {"heldout_correlation", heldout},
         {"shuffled_control", shuffled}};
  art.write("cca.json", j.dump(2) + "\n");
  run.out() << "first canonical correlation: train " << io::format_real(model.correlations.front()) << ", held-out "
            << io::format_real(heldout) << ", shuffled " << io::format_real(shuffled) << "\n";
}

inline void cluster_attn(Run& run, Artifacts& art) {
  const auto& c = run.cfg();
  run.require(c.paths.checkpoint, "--checkpoint");
  run.require(c.paths.features, "--features");
  run.require(c.paths.embeddings, "--embeddings");
  run.require(c.paths.resolver, "--resolver");
  if (c.cluster_k == 0 && c.paths.families.empty()) {
    fail(ErrorKind::config, "'cluster-attn' needs --families or cluster.k to choose the cut");
  }
  const auto ck = run.checkpoint();
  const auto fs = run.features();
  const auto table = run.embeddings();
  const auto resolver = run.resolver();
  require_compatible(ck, fs.dim(), table.dim(), fs.labels(Split::base));

  std::vector<std::string> labels;
  for (Split s : kAllSplits)
    for (auto& l : fs.labels(s)) labels.push_back(std::move(l));
  const auto sem = resolve_all(labels, resolver, table).vectors;
  const auto attention = semantic_attention(sem, ck.params);
  const auto sim = attention_similarity(attention, labels);
  const auto dendro = hierarchical_cluster(sim, labels);

  std::optional<std::vector<std::size_t>> planted;
  std::size_t k = c.cluster_k;
  if (!c.paths.families.empty()) {
    const auto fam = parse_families(io::read_file(run.input("families", c.paths.families, "--families")),
                                    c.paths.families);
    std::map<std::string, std::size_t> by_label(fam.begin(), fam.end());
    std::vector<std::size_t> p;
    std::set<std::size_t> distinct;
    for (const auto& l : labels) {
      auto it = by_label.find(l);
      if (it == by_label.end()) fail(ErrorKind::data, "families file has no entry for class '" + l + "'");
      p.push_back(it->second);
      distinct.insert(it->second);
    }
    if (k == 0) k = distinct.size();
    planted = std::move(p);
  }
  const auto cut = cut_dendrogram(dendro, k);

  std::string clusters = "label\tcluster\n";
  for (std::size_t i = 0; i < labels.size(); ++i) clusters += labels[i] + "\t" + std::to_string(cut[i]) + "\n";
  json j;
  j["leaves"] = labels.size();
  j["k"] = k;
  j["rand_index"] = planted ? json(rand_index(cut, *planted)) : json(nullptr);
  j["merges"] = json::array();
  for (const auto& m : dendro.merges) j["merges"].push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"size", m.size}});
  j["checkpoint_fingerprint"] = ck.fingerprint;

  art.write("attention.tsv", format_labeled_vectors(attention, labels));
  art.write("similarity.tsv", format_labeled_vectors(sim, labels));
  art.write("dendrogram.nwk", export_newick(dendro) + "\n");
  art.write("clusters.tsv", clusters);
  art.write("cluster.json", j.dump(2) + "\n");
  run.out() << "clusters: " << k;
  if (planted) run.out() << ", rand index " << io::format_real(j["rand_index"].get<double>());
  run.out() << "\n";
}

}  // namespace commands

/// Runs one command with a resolved config; throws on failure after rolling
/// back its artifacts.
inline void execute(const std::string& command, const RunConfig& cfg, std::ostream& out) {
  validate(cfg);
  Run run(command, cfg, out);
  using Fn = void (*)(Run&, Artifacts&);
  static const std::map<std::string, Fn, std::less<>> table{
      {"synth-gen", commands::synth_gen}, {"fit-base", commands::fit_base},
      {"train", commands::train},         {"eval", commands::eval},
      {"ablate", commands::ablate},       {"stability", commands::stability},
      {"shot-sweep", commands::shot_sweep_cmd}, {"cca", commands::cca},
      {"cluster-attn", commands::cluster_attn}};
  const auto it = table.find(command);
  if (it == table.end()) fail(ErrorKind::usage, "unknown command '" + command + "'");
  // Missing required inputs are reported before the output directory is touched.
  if (command == "eval" && *parse_variant(cfg.variant) != Variant::none) {
    run.require(cfg.paths.embeddings, "--embeddings");
    run.require(cfg.paths.resolver, "--resolver (variant '" + cfg.variant + "' needs label semantics)");
  }
  Artifacts art(run.require(cfg.paths.out, "--out"));
  try {
    it->second(run, art);
    auto outputs = art.written();
    art.write("run.json", run.record(outputs));
  } catch (...) {
    art.rollback();
    throw;
  }
}

struct Flags {
  std::optional<std::string> config, features, embeddings, resolver, checkpoint, base_weights, families, out, variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_way, k_shot, episodes;
};

/// Config file first, then flags on top.
inline RunConfig resolve_config(const Flags& f) {
  RunConfig c;
  if (f.config) merge_config_file(c, *f.config);
  auto set = [](std::string& dst, const std::optional<std::string>& v) {
    if (v) dst = *v;
  };
  set(c.paths.features, f.features);
  set(c.paths.embeddings, f.embeddings);
  set(c.paths.resolver, f.resolver);
  set(c.paths.checkpoint, f.checkpoint);
  set(c.paths.base_weights, f.base_weights);
  set(c.paths.families, f.families);
  set(c.paths.out, f.out);
  set(c.variant, f.variant);
  if (f.seed) c.seed = *f.seed;
  if (f.n_way) c.train.n_way = c.eval.n_way = *f.n_way;
  if (f.k_shot) c.train.k_shot = c.eval.k_shot = *f.k_shot;
  if (f.episodes) c.eval.episodes = *f.episodes;
  validate(c);
  return c;
}

/// Whole CLI: parse, run, map failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Few-shot classification weights from visual prototypes and semantic attention", "fewshot"};
  app.require_subcommand(1, 1);
  Flags f;
  const std::vector<std::pair<std::string, std::string>> help{
      {"synth-gen", "write a seeded synthetic benchmark"},
      {"fit-base", "fit cosine-classifier base weights"},
      {"train", "fit base weights, then train the weight generator episodically"},
      {"eval", "evaluate one variant on novel-class episodes"},
      {"ablate", "evaluate sega/none/fake/inverse on a shared episode stream"},
      {"stability", "intra/inter spread of generated weights"},
      {"shot-sweep", "paired sega-vs-none gain across shot counts"},
      {"cca", "visual-semantic CCA with held-out transfer"},
      {"cluster-attn", "cluster attention vectors and export a dendrogram"}};
  for (const auto& [name, desc] : help) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", f.config, "RunConfig JSON (or a previous run.json)");
    sub->add_option("--features", f.features, "feature TSV");
    sub->add_option("--embeddings", f.embeddings, "label embedding file");
    sub->add_option("--resolver", f.resolver, "label resolver chains");
    sub->add_option("--checkpoint", f.checkpoint, "trained checkpoint");
    sub->add_option("--base-weights", f.base_weights, "base weights from fit-base (train)");
    sub->add_option("--families", f.families, "class family assignment (cluster-attn)");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", f.seed, "global seed");
    sub->add_option("--n-way", f.n_way, "classes per episode");
    sub->add_option("--k-shot", f.k_shot, "support samples per class");
    sub->add_option("--episodes", f.episodes, "evaluation episodes");
    sub->add_option("--variant", f.variant, "sega | none | fake | inverse");
  }

  std::string command = "fewshot";
  try {
    app.parse(argc, argv);
    command = app.get_subcommands().front()->get_name();
    execute(command, resolve_config(f), out);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << error_line(command, "usage", e.what(), 2) << "\n";
    return 2;
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    err << error_line(command, to_string(e.kind()), e.what(), code) << "\n";
    return code;
  } catch (const std::exception& e) {
    err << error_line(command, "internal", e.what(), 1) << "\n";
    return 1;
  }
}

}  // namespace fewshot::cli
