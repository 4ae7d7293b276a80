#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "f2c/numerics.hpp"
#include "support.hpp"

namespace f2c {
namespace {

TEST(Tensor, RejectsShapeMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, RejectsNonFinite) {
  EXPECT_THROW(Tensor::vector({1.0, NAN}), std::invalid_argument);
  EXPECT_THROW(Tensor::vector({INFINITY}), std::invalid_argument);
}

TEST(Primitives, ForwardExamples) {
  Tape t;
  Var a = t.constant(Tensor::vector({1, 2}));
  Var b = t.constant(Tensor::vector({3, 4}));
  EXPECT_EQ(add(a, b).value().values(), (std::vector<double>{4, 6}));
  EXPECT_DOUBLE_EQ(mean(t.constant(Tensor::vector({2, 4, 6}))).item(), 4.0);
  EXPECT_DOUBLE_EQ(gather(t.constant(Tensor::vector({0.1, 0.2, 0.3})), 2).item(), 0.3);
  EXPECT_THROW(gather(a, 2), std::invalid_argument);
  EXPECT_THROW(add(a, t.constant(Tensor::vector({1, 2, 3}))), std::invalid_argument);
}

TEST(Primitives, MatvecForward) {
  Tape t;
  Var m = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var v = t.constant(Tensor::vector({1, 0, -1}));
  EXPECT_EQ(matvec(m, v).value().values(), (std::vector<double>{-2, -2}));
}

TEST(LogSoftmax, Examples) {
  const auto a = log_softmax_values(std::vector<double>{0, 0});
  EXPECT_NEAR(a[0], std::log(0.5), 1e-15);
  EXPECT_NEAR(a[1], std::log(0.5), 1e-15);
  const auto b = log_softmax_values(std::vector<double>{1000, 0});
  EXPECT_NEAR(b[0], 0.0, 1e-12);
  EXPECT_NEAR(b[1], -1000.0, 1e-9);
  const auto c = log_softmax_values(std::vector<double>{1, 2, 3});
  double s = 0.0;
  for (double x : c) s += std::exp(x);
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(LogSoftmax, RowsAndColumnsNormalize) {
  std::mt19937_64 rng(3);
  Tape t;
  Var m = t.constant(Tensor::matrix(3, 4, testing::uniform_vec(rng, 12, -5, 5)));
  for (std::size_t axis : {0u, 1u}) {
    const auto& v = log_softmax(m, axis).value().values();
    const std::size_t slices = axis == 1 ? 3 : 4, len = axis == 1 ? 4 : 3;
    for (std::size_t s = 0; s < slices; ++s) {
      double acc = 0.0;
      for (std::size_t k = 0; k < len; ++k) acc += std::exp(axis == 1 ? v[s * 4 + k] : v[k * 4 + s]);
      EXPECT_NEAR(acc, 1.0, 1e-12) << "axis " << axis << " slice " << s;
    }
  }
}

TEST(Backward, ProductRule) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0, true));
  Var y = t.leaf(Tensor::scalar(3.0, true));
  auto g = t.backward(mul(x, y));
  EXPECT_DOUBLE_EQ(g[x][0], 3.0);
  EXPECT_DOUBLE_EQ(g[y][0], 2.0);
}

TEST(Backward, MeanIsLinear) {
  Tape t;
  Var x = t.leaf(Tensor::vector({5.0, -1.0}, true));
  auto g = t.backward(mean(x));
  EXPECT_EQ(g[x], (std::vector<double>{0.5, 0.5}));
}

TEST(Backward, RequiresScalarRoot) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}, true));
  EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Backward, ConstantsAndDetachedGetNoGradient) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}, true));
  Var d = detach(x);
  auto g = t.backward(sum(mul(x, d)));
  EXPECT_EQ(g[x], (std::vector<double>{1.0, 2.0}));
  EXPECT_FALSE(g.reached(d));
}

TEST(Backward, ReusedNodeAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0, true));
  auto g = t.backward(add(mul(x, x), x));
  EXPECT_DOUBLE_EQ(g[x][0], 7.0);
}

TEST(Backward, BitIdenticalAcrossSweeps) {
  std::mt19937_64 rng(11);
  Tape t;
  Var w = t.leaf(Tensor::matrix(4, 3, testing::uniform_vec(rng, 12), true));
  Var v = t.constant(Tensor::vector(testing::uniform_vec(rng, 3)));
  Var y = sum(exp(log_softmax(matvec(w, v))));
  Var root = add(y, gather(log_softmax(matvec(w, v)), 1));
  EXPECT_EQ(t.backward(root)[w], t.backward(root)[w]);
}

TEST(Backward, LogOfNonPositiveIsDomainError) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 0.0}, true));
  EXPECT_THROW(log(x), std::domain_error);
}

// Each primitive against central differences on random inputs in [-2, 2].
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  const Tensor x = Tensor::vector(testing::uniform_vec(rng, 6));
  const auto other = testing::uniform_vec(rng, 6);
  const auto mvals = testing::uniform_vec(rng, 18);
  auto f = [&](Tape& t, Var a) -> Var {
    Var b = t.constant(Tensor::vector(other));
    switch (GetParam()) {
      case 0: return sum(mul(add(a, b), a));
      case 1: return sum(mul(sub(a, b), sub(b, a)));
      case 2: return sum(mul(scale(a, -1.7), a));
      case 3: return sum(neg(mul(a, a)));
      case 4: return sum(exp(a));
      case 5: return sum(log(add(exp(a), constant_like(a, 0.5))));
      case 6: return sum(mul(clamp_min(a, -0.3), a));
      case 7: return mean(mul(a, b));
      case 8: return mul(gather(a, 3), gather(a, 5));
      case 9: return gather(log_softmax(a), 2);
      case 10: {
        Var m = t.constant(Tensor::matrix(3, 6, mvals));
        return sum(mul(matvec(m, a), matvec(m, a)));
      }
      default: {
        std::vector<Var> xs{a, mul(a, a), b};
        return sum(add_all(xs));
      }
    }
  };
  auto rep = check_gradients(f, x, 1e-5, 1e-5);
  EXPECT_TRUE(rep.passed) << "case " << GetParam() << " rel err " << rep.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, 12));

TEST(LogSoftmax, MatrixGradientBothAxes) {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::matrix(3, 4, testing::uniform_vec(rng, 12));
  const auto w = testing::uniform_vec(rng, 12);
  for (std::size_t axis : {0u, 1u}) {
    auto f = [&](Tape& t, Var a) { return sum(mul(log_softmax(a, axis), t.constant(Tensor::matrix(3, 4, w)))); };
    auto rep = check_gradients(f, x, 1e-5, 1e-5);
    EXPECT_TRUE(rep.passed) << "axis " << axis << " rel err " << rep.max_rel_error;
  }
}

TEST(GradientCheck, SumOfSquares) {
  auto f = [](Tape&, Var a) { return sum(mul(a, a)); };
  auto rep = check_gradients(f, Tensor::vector({1.0, 2.0}), 1e-5, 1e-7);
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-7);
  EXPECT_NEAR(rep.analytic[0], 2.0, 1e-15);
  EXPECT_NEAR(rep.analytic[1], 4.0, 1e-15);
}

TEST(GradientCheck, ConstantFunction) {
  auto f = [](Tape& t, Var) { return scalar_constant(t, 4.0); };
  auto rep = check_gradients(f, Tensor::vector({1.0, 2.0, 3.0}));
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.analytic, (std::vector<double>(3, 0.0)));
  EXPECT_EQ(rep.numeric, (std::vector<double>(3, 0.0)));
}

TEST(GradientCheck, ReportsNonFiniteProbes) {
  // log(x) at x = 1e-6 is undefined at x - step.
  auto f = [](Tape&, Var a) { return sum(log(a)); };
  auto rep = check_gradients(f, Tensor::vector({1.0, 1e-6}), 1e-5);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.non_finite, (std::vector<std::size_t>{1}));
}

TEST(GradientCheck, DetectsWrongGradient) {
  // sum(a * detach(a)) has true gradient 2a, tape gradient a.
  auto f = [](Tape&, Var a) { return sum(mul(a, detach(a))); };
  auto rep = check_gradients(f, Tensor::vector({1.0, -2.0}));
  EXPECT_FALSE(rep.passed);
  EXPECT_NEAR(rep.max_rel_error, 0.5, 1e-6);
}

TEST(RelativeError, FloorAppliesNearZero) {
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-3);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

}  // namespace
}  // namespace f2c
