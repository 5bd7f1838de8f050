// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "fewshot/diffmath/autodiff.hpp"
#include "fewshot/diffmath/gradcheck.hpp"
#include "fewshot/diffmath/optim.hpp"
#include "test_util.hpp"

namespace fewshot {
namespace {

using testing::kind_of;
using testing::random_matrix;

TEST(Matrix, RejectsBadDataLength) {
  EXPECT_EQ(kind_of([] { Matrix(2, 2, std::vector<double>{1, 2, 3}); }), ErrorKind::dimension);
}

TEST(Primitives, CosineOfOrthogonalVectorsIsZero) {
  auto c = ad::cosine_rows(ad::constant({{1, 0}}), ad::constant({{0, 1}}));
  EXPECT_EQ(c->value[0], 0.0);
}

TEST(Primitives, CosineHandArithmetic) {
  auto c = ad::cosine_rows(ad::constant({{3, 4}}), ad::constant({{4, 3}}));
  EXPECT_NEAR(c->value[0], 24.0 / 25.0, 1e-15);
}

TEST(Primitives, SigmoidOfZero) { EXPECT_EQ(ad::sigmoid(ad::constant({{0}}))->value[0], 0.5); }

TEST(Primitives, CrossEntropyOfEqualLogitsIsLogM) {
  for (std::size_t m : {2u, 5u, 64u}) {
    auto loss = ad::softmax_cross_entropy(ad::constant(Matrix(3, m, 1.7)), {0, 1, m - 1});
    EXPECT_NEAR(loss->value[0], std::log(static_cast<double>(m)), 1e-12);
  }
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  try {
    ad::matmul(ad::constant(Matrix(2, 3)), ad::constant(Matrix(2, 3)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
  }
}

TEST(Primitives, ZeroRowsAreDegenerate) {
  EXPECT_EQ(kind_of([] { ad::row_l2_normalize(ad::constant({{0, 0}})); }), ErrorKind::degenerate_input);
  EXPECT_EQ(kind_of([] { ad::cosine_rows(ad::constant({{1, 0}}), ad::constant({{0, 0}})); }),
            ErrorKind::degenerate_input);
}

TEST(Primitives, DropoutRateOutOfRange) {
  EXPECT_EQ(kind_of([] { ad::dropout(ad::constant({{1}}), 1.0, true, 0); }), ErrorKind::usage);
}

TEST(Primitives, SoftmaxRowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix z = random_matrix(4, 7, rng, -30, 30);
    Matrix shifted = z;
    for (double& v : shifted.data()) v += 123.25;
    auto a = ad::row_softmax(ad::constant(z))->value;
    auto b = ad::row_softmax(ad::constant(shifted))->value;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double s = 0;
      for (double v : a.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-9);
  }
}

TEST(Primitives, NormalizeUnitAndIdempotent) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto once = ad::row_l2_normalize(ad::constant(random_matrix(3, 6, rng)))->value;
    auto twice = ad::row_l2_normalize(ad::constant(once))->value;
    for (std::size_t i = 0; i < once.rows(); ++i) EXPECT_NEAR(norm2(once.row(i)), 1.0, 1e-9);
    for (std::size_t k = 0; k < once.size(); ++k) EXPECT_NEAR(once[k], twice[k], 1e-9);
  }
}

TEST(Primitives, DropoutIdentityAtInferenceAndSeeded) {
  std::mt19937_64 rng(7);
  Matrix x = random_matrix(5, 9, rng);
  EXPECT_EQ(ad::dropout(ad::constant(x), 0.5, false, 11)->value, x);
  auto a = ad::dropout(ad::constant(x), 0.5, true, 11)->value;
  auto b = ad::dropout(ad::constant(x), 0.5, true, 11)->value;
  EXPECT_EQ(a, b);
  std::size_t zeros = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k] == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(a[k], 2.0 * x[k]);
  }
  EXPECT_GT(zeros, 0u);
  EXPECT_LT(zeros, a.size());
}

TEST(Primitives, CosineScaleInvariance) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> pos(0.01, 100.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix x = random_matrix(3, 5, rng), y = random_matrix(4, 5, rng);
    const double a = pos(rng), b = pos(rng);
    Matrix xs = x, ys = y;
    for (double& v : xs.data()) v *= a;
    for (double& v : ys.data()) v *= b;
    auto c1 = ad::cosine_rows(ad::constant(x), ad::constant(y))->value;
    auto c2 = ad::cosine_rows(ad::constant(xs), ad::constant(ys))->value;
    for (std::size_t k = 0; k < c1.size(); ++k) EXPECT_NEAR(c1[k], c2[k], 1e-6);
  }
}

TEST(Backward, SumGivesOnes) {
  auto p = ad::parameter(Matrix(2, 3, 0.7));
  ad::backward(ad::sum(p));
  for (double g : p->grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesParam) {
  auto p = ad::parameter({{1.5, -2.0}, {0.25, 3.0}});
  ad::backward(ad::scale(ad::sum(ad::hadamard(p, p)), 0.5));
  for (std::size_t k = 0; k < p->value.size(); ++k) EXPECT_DOUBLE_EQ(p->grad[k], p->value[k]);
}

TEST(Backward, AccumulatesAcrossCalls) {
  auto p = ad::parameter(Matrix(1, 2, 1.0));
  auto loss = ad::sum(p);
  ad::backward(loss);
  ad::backward(loss);
  EXPECT_EQ(p->grad[0], 2.0);
}

TEST(Backward, NonScalarLossIsUsageError) {
  auto p = ad::parameter(Matrix(2, 2, 1.0));
  EXPECT_EQ(kind_of([&] { ad::backward(p); }), ErrorKind::usage);
}

// Central-difference check of every primitive over 20 random shapes and seeds.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, MatchesFiniteDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919 + 1);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  // d >= 2: one-dimensional cosines are constant, so their true gradient is
  // zero and the finite difference is pure roundoff.
  const std::size_t n = dim(rng), d = dim(rng) + 1, m = dim(rng);

  auto x = ad::parameter(random_matrix(n, d, rng));
  auto y = ad::parameter(random_matrix(m, d, rng));
  auto w = ad::parameter(random_matrix(d, m, rng));
  auto b = ad::parameter(random_matrix(1, m, rng));
  auto s = ad::parameter(Matrix(1, 1, 1.3));
  auto probe = ad::constant(random_matrix(n, m, rng));
  std::vector<std::size_t> targets(n);
  for (auto& t : targets) t = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
  const auto drop_seed = static_cast<std::uint64_t>(seed);

  const std::vector<std::pair<const char*, std::function<ad::Var()>>> cases = {
      {"matmul", [&] { return ad::sum(ad::hadamard(ad::matmul(x, w), probe)); }},
      {"matmul_nt", [&] { return ad::sum(ad::hadamard(ad::matmul_nt(x, y), probe)); }},
      {"add_broadcast", [&] { return ad::sum(ad::hadamard(ad::add(ad::matmul(x, w), b), probe)); }},
      {"hadamard_broadcast", [&] { return ad::sum(ad::hadamard(ad::hadamard(ad::matmul(x, w), b), probe)); }},
      {"scale", [&] { return ad::sum(ad::hadamard(ad::scale(ad::matmul(x, w), s), probe)); }},
      {"normalize", [&] { return ad::sum(ad::hadamard(ad::matmul(ad::row_l2_normalize(x), w), probe)); }},
      {"sigmoid", [&] { return ad::sum(ad::hadamard(ad::sigmoid(ad::matmul(x, w)), probe)); }},
      {"relu", [&] { return ad::sum(ad::hadamard(ad::relu(ad::add(ad::matmul(x, w), b)), probe)); }},
      {"dropout", [&] { return ad::sum(ad::hadamard(ad::dropout(ad::matmul(x, w), 0.3, true, drop_seed), probe)); }},
      {"softmax", [&] { return ad::sum(ad::hadamard(ad::row_softmax(ad::matmul(x, w)), probe)); }},
      {"cosine", [&] { return ad::sum(ad::hadamard(ad::cosine_rows(x, y), probe)); }},
      {"cross_entropy", [&] { return ad::softmax_cross_entropy(ad::scale(ad::cosine_rows(x, y), s), targets); }},
  };
  const ParamSet params{{"x", x}, {"y", y}, {"w", w}, {"b", b}, {"s", s}};
  for (const auto& [name, build] : cases) {
    zero_grads(params);
    const auto report = grad_check(build, params, 1e-4, 1e-4);
    EXPECT_TRUE(report.passed()) << name << " seed " << seed << " max rel " << report.max_rel_error();
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range(0, 20));

TEST(GradCheck, LinearIsExact) {
  std::mt19937_64 rng(1);
  auto p = ad::parameter(random_matrix(3, 4, rng));
  auto c = ad::constant(random_matrix(3, 4, rng));
  const auto report = grad_check([&] { return ad::sum(ad::hadamard(p, c)); }, {{"p", p}});
  EXPECT_TRUE(report.passed());
  EXPECT_LT(report.max_rel_error(), 1e-8);
}

TEST(GradCheck, SigmoidMlp) {
  std::mt19937_64 rng(2);
  auto w1 = ad::parameter(random_matrix(4, 6, rng));
  auto b1 = ad::parameter(random_matrix(1, 6, rng));
  auto w2 = ad::parameter(random_matrix(6, 3, rng));
  auto s = ad::constant(random_matrix(5, 4, rng));
  auto probe = ad::constant(random_matrix(5, 3, rng));
  auto build = [&] {
    auto h = ad::sigmoid(ad::add(ad::matmul(s, w1), b1));
    return ad::sum(ad::hadamard(ad::sigmoid(ad::matmul(h, w2)), probe));
  };
  const auto report = grad_check(build, {{"w1", w1}, {"b1", b1}, {"w2", w2}});
  EXPECT_TRUE(report.passed()) << report.max_rel_error();
}

TEST(GradCheck, CorruptedRuleIsFlaggedByName) {
  std::mt19937_64 rng(4);
  auto good = ad::parameter(random_matrix(2, 3, rng));
  auto bad = ad::parameter(random_matrix(2, 3, rng));
  // Square with a backward rule that forgets the factor 2.
  auto broken_square = [](const ad::Var& x) {
    Matrix v = x->value;
    for (double& e : v.data()) e *= e;
    return ad::make_node("broken_square", std::move(v), {x}, [x](const ad::Node& self) {
      for (std::size_t k = 0; k < x->value.size(); ++k) x->grad[k] += self.grad[k] * x->value[k];
    });
  };
  auto build = [&] { return ad::add(ad::sum(ad::hadamard(good, good)), ad::sum(broken_square(bad))); };
  const auto report = grad_check(build, {{"good", good}, {"bad", bad}});
  EXPECT_FALSE(report.passed());
  ASSERT_EQ(report.flagged_names(), std::vector<std::string>{"bad"});
}

TEST(GradCheck, NondeterministicBuilderRejected) {
  auto p = ad::parameter(Matrix(1, 1, 1.0));
  int calls = 0;
  auto build = [&] { return ad::scale(ad::sum(p), 1.0 + (calls++)); };
  EXPECT_EQ(kind_of([&] { grad_check(build, {{"p", p}}); }), ErrorKind::determinism);
}

TEST(Sgd, PlainStep) {
  auto p = ad::parameter(Matrix(1, 1, 1.0));
  p->grad[0] = 1.0;
  OptimState st({{"p", p}}, 0.1, 0.0, 0.0);
  sgd_step({{"p", p}}, st);
  EXPECT_DOUBLE_EQ(p->value[0], 0.9);
  EXPECT_EQ(p->grad[0], 0.0);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  auto p = ad::parameter(Matrix(1, 1, 2.5));
  ParamSet ps{{"p", p}};
  OptimState st(ps, 0.1, 0.9, 0.0);
  sgd_step(ps, st);
  sgd_step(ps, st);
  EXPECT_EQ(p->value[0], 2.5);
  EXPECT_EQ(st.velocity()[0][0], 0.0);
}

TEST(Sgd, MomentumRecurrence) {
  const double lr = 0.05, g = 0.8;
  auto p = ad::parameter(Matrix(1, 1, 3.0));
  ParamSet ps{{"p", p}};
  OptimState st(ps, lr, 0.9, 0.0);
  p->grad[0] = g;
  sgd_step(ps, st);
  EXPECT_NEAR(p->value[0], 3.0 - lr * g, 1e-15);
  p->grad[0] = g;
  sgd_step(ps, st);
  EXPECT_NEAR(p->value[0], 3.0 - lr * g - lr * 1.9 * g, 1e-15);
}

TEST(Sgd, WeightDecayEntersVelocity) {
  auto p = ad::parameter(Matrix(1, 1, 2.0));
  ParamSet ps{{"p", p}};
  OptimState st(ps, 0.5, 0.0, 0.1);
  sgd_step(ps, st);
  EXPECT_DOUBLE_EQ(p->value[0], 2.0 - 0.5 * 0.2);
}

TEST(Sgd, ShapeDriftIsStateCorruption) {
  auto p = ad::parameter(Matrix(1, 2, 1.0));
  ParamSet ps{{"p", p}};
  OptimState st(ps, 0.1, 0.9, 0.0);
  st.velocity()[0] = Matrix(2, 1);
  EXPECT_EQ(kind_of([&] { sgd_step(ps, st); }), ErrorKind::state_corruption);
}

TEST(Sgd, RejectsBadHyperparameters) {
  EXPECT_EQ(kind_of([] { OptimState({}, 0.0, 0.9, 0.0); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { OptimState({}, 0.1, 1.0, 0.0); }), ErrorKind::config);
}

}  // namespace
}  // namespace fewshot
