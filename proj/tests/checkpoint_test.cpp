// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "fewshot/checkpoint.hpp"
#include "fewshot/evaluation.hpp"
#include "test_util.hpp"

namespace fewshot {
namespace {

using testing::kind_of;
using testing::message_of;
using testing::random_matrix;
using testing::TempDir;

Checkpoint sample_checkpoint(std::size_t m, std::size_t dv, std::size_t ds, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  ModelConfig cfg;
  cfg.attn_hidden_dim = 5;
  Checkpoint ck;
  ck.params = init_params(random_matrix(m, dv, rng), ds, cfg, seed);
  ck.params.mlp_b2 = random_matrix(1, dv, rng);
  // Values that only survive a shortest-round-trip or 17-digit writer.
  ck.params.w_base(0, 0) = 1.0 / 3.0;
  ck.params.keys(0, 0) = 5e-324;
  ck.params.phi_q(0, 0) = -0.0;
  ck.params.lambda1 = 0.1 + 0.2;
  ck.params.lambda2 = -1.2345678901234567e-5;
  ck.params.gamma = std::nextafter(3.0, 4.0);
  ck.params.temp = 17.25;
  for (std::size_t i = 0; i < m; ++i) ck.base_labels.push_back("base_" + std::to_string(i));
  ck.fingerprint = "00ff00ff00ff00ff";
  return ck;
}

void expect_bit_equal(const SegaParams& a, const SegaParams& b) {
  EXPECT_EQ(a.w_base, b.w_base);
  EXPECT_EQ(a.keys, b.keys);
  EXPECT_EQ(a.phi_q, b.phi_q);
  EXPECT_EQ(a.mlp_w1, b.mlp_w1);
  EXPECT_EQ(a.mlp_b1, b.mlp_b1);
  EXPECT_EQ(a.mlp_w2, b.mlp_w2);
  EXPECT_EQ(a.mlp_b2, b.mlp_b2);
  EXPECT_EQ(a.lambda1, b.lambda1);
  EXPECT_EQ(a.lambda2, b.lambda2);
  EXPECT_EQ(a.gamma, b.gamma);
  EXPECT_EQ(a.temp, b.temp);
  EXPECT_EQ(params_digest(a), params_digest(b));
}

TEST(Checkpoint, TextRoundTripIsBitExact) {
  const auto ck = sample_checkpoint(4, 6, 3);
  const auto back = parse_checkpoint(format_checkpoint(ck), "mem");
  expect_bit_equal(ck.params, back.params);
  EXPECT_TRUE(std::signbit(back.params.phi_q(0, 0)));
  EXPECT_EQ(back.base_labels, ck.base_labels);
  EXPECT_EQ(back.fingerprint, ck.fingerprint);
  EXPECT_EQ(format_checkpoint(back), format_checkpoint(ck));
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  TempDir dir;
  const auto ck = sample_checkpoint(3, 5, 4, 9);
  save_checkpoint(ck, dir / "ck.json");
  const auto back = load_checkpoint(dir / "ck.json");
  expect_bit_equal(ck.params, back.params);
}

TEST(Checkpoint, TruncatedFileIsParseError) {
  const std::string text = format_checkpoint(sample_checkpoint(3, 4, 2));
  for (std::size_t cut : {std::size_t{0}, std::size_t{1}, text.size() / 3, text.size() / 2, text.size() - 3}) {
    EXPECT_EQ(kind_of([&] { parse_checkpoint(text.substr(0, cut), "cut"); }), ErrorKind::parse) << "cut at " << cut;
  }
  EXPECT_EQ(kind_of([] { parse_checkpoint("not json at all", "x"); }), ErrorKind::parse);
  EXPECT_EQ(kind_of([] { parse_checkpoint("[1, 2]", "x"); }), ErrorKind::parse);
}

TEST(Checkpoint, VersionMismatchIsRefused) {
  auto doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["version"] = kCheckpointVersion + 1;
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "v2"); }), ErrorKind::version_mismatch);
  EXPECT_NE(message_of([&] { parse_checkpoint(doc.dump(), "v2"); }).find("version 2"), std::string::npos);
}

TEST(Checkpoint, ForeignDocumentIsParseError) {
  auto doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["format"] = "something-else";
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::parse);
}

TEST(Checkpoint, MissingFieldIsParseErrorNamingIt) {
  auto doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc.erase("phi_q");
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::parse);
  EXPECT_NE(message_of([&] { parse_checkpoint(doc.dump(), "x"); }).find("phi_q"), std::string::npos);
  doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["gamma"] = nullptr;
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::parse);
}

TEST(Checkpoint, DataLengthMismatchNamesField) {
  auto doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["keys"]["data"].erase(0);
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::shape_mismatch);
  EXPECT_NE(message_of([&] { parse_checkpoint(doc.dump(), "x"); }).find("'keys'"), std::string::npos);
}

TEST(Checkpoint, InconsistentShapesAreRefused) {
  auto doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["keys"] = {{"rows", 2}, {"cols", 4}, {"data", std::vector<double>(8, 0.1)}};
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::shape_mismatch);
  EXPECT_NE(message_of([&] { parse_checkpoint(doc.dump(), "x"); }).find("keys"), std::string::npos);

  doc = nlohmann::json::parse(format_checkpoint(sample_checkpoint(3, 4, 2)));
  doc["base_labels"] = {"a", "b"};
  EXPECT_EQ(kind_of([&] { parse_checkpoint(doc.dump(), "x"); }), ErrorKind::shape_mismatch);
}

TEST(Checkpoint, CompatibilityNamesTheOffendingField) {
  const auto ck = sample_checkpoint(3, 64, 6);
  const std::vector<std::string> labels = ck.base_labels;
  EXPECT_EQ(kind_of([&] { require_compatible(ck, 32, 6, labels); }), ErrorKind::shape_mismatch);
  const auto msg = message_of([&] { require_compatible(ck, 32, 6, labels); });
  EXPECT_NE(msg.find("'w_base'"), std::string::npos);
  EXPECT_NE(msg.find("64"), std::string::npos);
  EXPECT_NE(message_of([&] { require_compatible(ck, 64, 5, labels); }).find("'mlp_w1'"), std::string::npos);
  EXPECT_NE(message_of([&] { require_compatible(ck, 64, 6, {"x", "y", "z"}); }).find("'base_labels'"),
            std::string::npos);
  EXPECT_NO_THROW(require_compatible(ck, 64, 6, labels));
}

TEST(Checkpoint, MissingFileIsIoError) {
  TempDir dir;
  EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "absent.json"); }), ErrorKind::io);
}

}  // namespace
}  // namespace fewshot
