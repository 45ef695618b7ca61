#include <gtest/gtest.h>

#include "support.hpp"

using namespace fluid;
using testing_support::check_op;
using testing_support::rand_param;
using Vars = std::vector<Var>;

constexpr double kOpTol = 1e-4;

TEST(Ops, SoftmaxOfOneTwoThree) {
  const Var y = softmax(Var::constant(Tensor({3}, {1, 2, 3})), 0);
  EXPECT_NEAR(y.value()[0], 0.09003, 5e-6);
  EXPECT_NEAR(y.value()[1], 0.24473, 5e-6);
  EXPECT_NEAR(y.value()[2], 0.66524, 5e-6);
}

TEST(Ops, SoftmaxIsShiftInvariantAndHandlesLargeLogits) {
  const Var a = softmax(Var::constant(Tensor({3}, {1000, 1001, 1002})), 0);
  const Var b = softmax(Var::constant(Tensor({3}, {0, 1, 2})), 0);
  EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-15);
  EXPECT_TRUE(a.value().all_finite());
}

TEST(Ops, MaskedSoftmaxZeroesMaskedEntries) {
  const Mask m{1, 0, 1, 0, 0, 0};
  const Var y = softmax(Var::constant(Tensor({2, 3}, {1, 50, 1, 2, 2, 2})), 1, &m);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_EQ(y.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[2], 0.5);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(y.value()[i], 0.0);
}

TEST(Ops, BroadcastingShapes) {
  EXPECT_EQ(detail::broadcast_shapes({2, 1, 3}, {4, 1}), (Shape{2, 4, 3}));
  EXPECT_THROW(detail::broadcast_shapes({2, 3}, {4, 3}), DimensionError);
  const Var y = add(Var::constant(Tensor({2, 1}, {1, 2})), Var::constant(Tensor({3}, {10, 20, 30})));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  EXPECT_EQ(y.value()[5], 32.0);
}

TEST(Ops, MatmulValuesAndBatchBroadcast) {
  const Var a = Var::constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Var b = Var::constant(Tensor({2, 2}, {5, 6, 7, 8}));
  const Tensor c = matmul(a, b).value();
  EXPECT_TRUE(c == Tensor({2, 2}, {19, 22, 43, 50}));
  const Var batched = Var::constant(Tensor({3, 2, 2}, 1.0));
  EXPECT_EQ(matmul(batched, b).shape(), (Shape{3, 2, 2}));
  EXPECT_THROW(matmul(a, Var::constant(Tensor({3, 2}))), DimensionError);
}

TEST(Ops, PermuteSliceConcatValues) {
  const Var x = Var::constant(Tensor({2, 3}, {0, 1, 2, 3, 4, 5}));
  EXPECT_TRUE(transpose(x).value() == Tensor({3, 2}, {0, 3, 1, 4, 2, 5}));
  EXPECT_TRUE(slice(x, 1, 1, 2).value() == Tensor({2, 2}, {1, 2, 4, 5}));
  EXPECT_TRUE(concat({x, x}, 0).value() == Tensor({4, 3}, {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}));
  EXPECT_TRUE(sum_axis(x, 0).value() == Tensor({3}, {3, 5, 7}));
  EXPECT_THROW(slice(x, 1, 2, 2), DimensionError);
}

TEST(Ops, LayerNormRowsHaveZeroMeanUnitVariance) {
  Rng rng(3);
  const Var y = layer_norm(Var::constant(testing_support::rand_tensor({4, 16}, rng, -5, 5)), {}, {}, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.value()[r * 16 + j];
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += std::pow(y.value()[r * 16 + j] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-14);
    EXPECT_NEAR(v / 16, 1.0, 1e-12);
  }
}

TEST(Ops, StableActivationsAtExtremes) {
  const Var x = Var::constant(Tensor({2}, {-800, 800}));
  EXPECT_EQ(sigmoid(x).value()[0], 0.0);
  EXPECT_EQ(sigmoid(x).value()[1], 1.0);
  EXPECT_EQ(softplus(x).value()[1], 800.0);
  EXPECT_TRUE(softplus(x).value().all_finite());
}

// ---- finite-difference checks, one per differentiable op ----

struct OpCase {
  const char* name;
  std::function<Var(const Vars&)> op;
  std::vector<Shape> shapes;
  double lo = -1.0, hi = 1.0;
};

class OpGrad : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGrad, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  Rng rng(17);
  Vars in;
  for (const auto& s : c.shapes) in.push_back(rand_param(s, rng, c.lo, c.hi));
  const auto rep = check_op(c.op, in);
  EXPECT_LT(rep.max_rel_error, kOpTol) << c.name << " worst " << rep.worst;
}

const Mask kMask{1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1};

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGrad,
    ::testing::Values(
        OpCase{"add", [](const Vars& v) { return add(v[0], v[1]); }, {{2, 3}, {3}}},
        OpCase{"sub", [](const Vars& v) { return sub(v[0], v[1]); }, {{2, 1}, {2, 3}}},
        OpCase{"mul", [](const Vars& v) { return mul(v[0], v[1]); }, {{2, 3}, {2, 1}}},
        OpCase{"div", [](const Vars& v) { return div(v[0], v[1]); }, {{2, 3}, {3}}, 0.5, 2.0},
        OpCase{"neg", [](const Vars& v) { return neg(v[0]); }, {{4}}},
        OpCase{"tanh", [](const Vars& v) { return fluid::tanh(v[0]); }, {{5}}},
        OpCase{"sigmoid", [](const Vars& v) { return sigmoid(v[0]); }, {{5}}},
        OpCase{"softplus", [](const Vars& v) { return softplus(v[0]); }, {{5}}},
        OpCase{"exp", [](const Vars& v) { return fluid::exp(v[0]); }, {{5}}},
        OpCase{"log", [](const Vars& v) { return fluid::log(v[0]); }, {{5}}, 0.5, 2.0},
        OpCase{"relu", [](const Vars& v) { return relu(v[0]); }, {{5}}, 0.1, 1.0},
        OpCase{"abs", [](const Vars& v) { return fluid::abs(v[0]); }, {{5}}, 0.1, 1.0},
        OpCase{"square", [](const Vars& v) { return square(v[0]); }, {{5}}},
        OpCase{"add_scalar", [](const Vars& v) { return add_scalar(v[0], 2.5); }, {{3}}},
        OpCase{"mul_scalar", [](const Vars& v) { return mul_scalar(v[0], -1.5); }, {{3}}},
        OpCase{"sum", [](const Vars& v) { return sum(v[0]); }, {{2, 3}}},
        OpCase{"mean", [](const Vars& v) { return mean(v[0]); }, {{2, 3}}},
        OpCase{"sum_axis", [](const Vars& v) { return sum_axis(v[0], 1); }, {{2, 3, 2}}},
        OpCase{"reshape", [](const Vars& v) { return reshape(v[0], {3, 2}); }, {{2, 3}}},
        OpCase{"permute", [](const Vars& v) { return permute(v[0], {2, 0, 1}); }, {{2, 3, 4}}},
        OpCase{"transpose", [](const Vars& v) { return transpose(v[0]); }, {{2, 3}}},
        OpCase{"slice", [](const Vars& v) { return slice(v[0], 1, 1, 2); }, {{2, 4, 2}}},
        OpCase{"concat", [](const Vars& v) { return concat({v[0], v[1]}, 1); }, {{2, 1, 2}, {2, 3, 2}}},
        OpCase{"matmul", [](const Vars& v) { return matmul(v[0], v[1]); }, {{3, 4}, {4, 2}}},
        OpCase{"matmul_batched", [](const Vars& v) { return matmul(v[0], v[1]); }, {{2, 3, 4}, {4, 2}}},
        OpCase{"matmul_both_batched", [](const Vars& v) { return matmul(v[0], v[1]); }, {{2, 3, 4}, {2, 4, 2}}},
        OpCase{"softmax", [](const Vars& v) { return softmax(v[0], 1); }, {{2, 4}}},
        OpCase{"softmax_mid_axis", [](const Vars& v) { return softmax(v[0], 1); }, {{2, 3, 2}}},
        OpCase{"softmax_masked", [](const Vars& v) { return softmax(v[0], 1, &kMask); }, {{3, 4}}},
        OpCase{"log_softmax", [](const Vars& v) { return log_softmax(v[0], 1); }, {{2, 4}}},
        OpCase{"layer_norm", [](const Vars& v) { return layer_norm(v[0]); }, {{3, 5}}},
        OpCase{"layer_norm_affine", [](const Vars& v) { return layer_norm(v[0], v[1], v[2]); },
               {{3, 5}, {5}, {5}}}),
    [](const auto& info) { return std::string(info.param.name); });
