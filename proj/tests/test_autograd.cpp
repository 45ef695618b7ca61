#include <gtest/gtest.h>

#include "support.hpp"

using namespace fluid;
using testing_support::rand_param;

TEST(Autograd, QuadraticAtThree) {
  Var x = Var::parameter(Tensor({1}, {3.0}));
  const auto g = backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(g.at(x)[0], 6.0);
  const auto rep = grad_check([&] { return sum(square(x)); }, {{"x", x}}, 1e-5);
  EXPECT_LT(rep.max_abs_error, 1e-6);
}

TEST(Autograd, LinearMapMatchesToMachinePrecision) {
  Rng rng(1);
  Var w = rand_param({3, 2}, rng);
  const Var x = Var::constant(testing_support::rand_tensor({4, 3}, rng));
  const auto rep = grad_check([&] { return sum(matmul(x, w)); }, {{"w", w}}, 1e-5);
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Var x = Var::parameter(Tensor({1}, {2.0}));
  const Var y = add(x, x);          // dy/dx = 2
  const Var z = mul(y, x);          // z = 2x^2, dz/dx = 4x = 8
  const auto g = backward(sum(z));
  EXPECT_DOUBLE_EQ(g.at(x)[0], 8.0);
}

TEST(Autograd, ConstantsAndNoGradBuildNoGraph) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  {
    NoGradGuard ng;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(add(x, x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(add(x, x).requires_grad());
  EXPECT_FALSE(add(Var::constant(Tensor({2})), Var::constant(Tensor({2}))).requires_grad());
}

TEST(Autograd, UnreachableLeafGetsZeros) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  Var unused = Var::parameter(Tensor({3}, 1.0));
  const auto g = backward(sum(x));
  EXPECT_FALSE(g.contains(unused));
  EXPECT_TRUE(g.at(unused) == Tensor({3}));
}

TEST(Autograd, RootMustBeScalar) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  EXPECT_THROW(backward(x), DimensionError);
}

TEST(Autograd, GradientDoesNotAliasSiblingPayloads) {
  // add() hands the same gradient tensor to both parents; accumulating into
  // one must not change the other.
  Var a = Var::parameter(Tensor({1}, 1.0));
  Var b = Var::parameter(Tensor({1}, 1.0));
  const Var s = add(a, b);
  const Var t = add(s, a);
  const auto g = backward(sum(t));
  EXPECT_DOUBLE_EQ(g.at(a)[0], 2.0);
  EXPECT_DOUBLE_EQ(g.at(b)[0], 1.0);
}

TEST(Autograd, AssignReplacesLeafValue) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  x.assign(Tensor({2}, {3.0, 4.0}));
  EXPECT_EQ(x.value()[1], 4.0);
  EXPECT_THROW(x.assign(Tensor({3})), DimensionError);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  Var x = Var::parameter(Tensor({1}, 1.0));
  Var y = x;
  for (int i = 0; i < 20000; ++i) y = add_scalar(y, 1e-6);
  const auto g = backward(sum(y));
  EXPECT_DOUBLE_EQ(g.at(x)[0], 1.0);
}
