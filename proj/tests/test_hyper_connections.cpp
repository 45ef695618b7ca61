#include <gtest/gtest.h>

#include "support.hpp"

using namespace fluid;
using testing_support::rand_param;
using testing_support::rand_tensor;

TEST(HyperConnections, ExpandReplicatesStreams) {
  const Var x = Var::constant(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  const Tensor h = hc_expand(x, 3).value();
  EXPECT_EQ(h.shape(), (Shape{1, 2, 3, 2}));
  EXPECT_TRUE(h == Tensor({1, 2, 3, 2}, {1, 2, 1, 2, 1, 2, 3, 4, 3, 4, 3, 4}));
}

TEST(HyperConnections, SingleStreamIsPostNormResidual) {
  Rng rng(1);
  const std::size_t d = 6;
  const Linear L = Linear::init(d, d, rng);
  const LayerNorm ln = LayerNorm::init(d);
  const Var x = Var::constant(rand_tensor({2, 3, d}, rng));
  const auto layer = [&](const Var& v) { return L(v); };
  const Tensor plain = ln(add(x, L(x))).value();
  const Tensor hc = ln(reshape(hc_block(HcParams::init_static(1), hc_expand(x, 1), layer), {2, 3, d})).value();
  EXPECT_TRUE(hc == plain);
  const Tensor res = ln(reshape(hc_block(HcParams::residual(), hc_expand(x, 1), layer), {2, 3, d})).value();
  EXPECT_TRUE(res == plain);
}

TEST(HyperConnections, LiquidWithZeroScaleIsStatic) {
  Rng rng(2);
  const std::size_t d = 4, n = 3;
  const Linear L = Linear::init(d, d, rng);
  HcParams liquid = HcParams::init_liquid(n, d, rng, 0.0);
  HcParams fixed = HcParams::init_static(n);
  // non-trivial static part, shared by both
  const Tensor am = rand_tensor({n}, rng), beta = rand_tensor({n}, rng), ar = rand_tensor({n, n}, rng);
  for (HcParams* p : {&liquid, &fixed}) {
    p->a_m.assign(am);
    p->beta.assign(beta);
    p->a_r.assign(ar);
  }
  const Var h = Var::constant(rand_tensor({2, 3, n, d}, rng));
  const auto layer = [&](const Var& v) { return L(v); };
  EXPECT_TRUE(hc_block(liquid, h, layer).value() == hc_block(fixed, h, layer).value());
}

TEST(HyperConnections, LiquidScalesStartSmall) {
  Rng rng(3);
  const HcParams p = HcParams::init_liquid(2, 4, rng);
  EXPECT_EQ(p.liquid->s_a.value()[0], 1e-2);
  EXPECT_EQ(p.liquid->s_b.value()[0], 1e-2);
  EXPECT_EQ(p.parameters().size(), 8u);
  EXPECT_EQ(HcParams::residual().parameters().size(), 0u);
}

TEST(HyperConnections, TwoStreamHandOracle) {
  HcParams p = HcParams::init_static(2);
  p.a_m.assign(Tensor({2}, {0.25, 0.75}));
  p.beta.assign(Tensor({2}, {2.0, -1.0}));
  p.a_r.assign(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  // d = 1, streams h = (1, 2); layer L(x) = 10 x
  const Var h = Var::constant(Tensor({1, 1, 2, 1}, {1.0, 2.0}));
  double seen = 0.0;
  const Tensor out = hc_block(p, h, [&](const Var& x0) {
                       seen = x0.value()[0];
                       return mul_scalar(x0, 10.0);
                     }).value();
  EXPECT_DOUBLE_EQ(seen, 0.25 * 1 + 0.75 * 2);  // x0 = A_m^T H = 1.75
  // H^_j = beta_j * L + sum_i A_r[i][j] h_i
  EXPECT_DOUBLE_EQ(out[0], 2.0 * 17.5 + (1.0 * 1 + 3.0 * 2));
  EXPECT_DOUBLE_EQ(out[1], -1.0 * 17.5 + (2.0 * 1 + 4.0 * 2));
}

TEST(HyperConnections, ConnectionMatrices) {
  HcParams p = HcParams::init_static(2);
  p.a_m.assign(Tensor({2}, {0.25, 0.75}));
  p.beta.assign(Tensor({2}, {2.0, -1.0}));
  p.a_r.assign(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  EXPECT_TRUE(hc_matrix(p) == Tensor({3, 3}, {0, 2, -1, 0.25, 1, 2, 0.75, 3, 4}));
  EXPECT_TRUE(hc_width_connections(p) == Tensor({2, 3}, {0.25, 1, 2, 0.75, 3, 4}));
  EXPECT_TRUE(hc_depth_connections(p) == Tensor({2, 2}, {2, -1, 1, 4}));
}

TEST(HyperConnections, FinalizeSumsStreamsThenNormalizes) {
  Rng rng(4);
  const LayerNorm ln = LayerNorm::init(3);
  const Var h = Var::constant(rand_tensor({1, 2, 2, 3}, rng));
  const Tensor expect = ln(sum_axis(h, 2)).value();
  EXPECT_TRUE(hc_network_finalize(h, ln).value() == expect);
  EXPECT_EQ(expect.shape(), (Shape{1, 2, 3}));
}

TEST(HyperConnections, LiquidGradient) {
  Rng rng(5);
  const std::size_t d = 3, n = 2;
  HcParams p = HcParams::init_liquid(n, d, rng, 0.3);
  Var h = rand_param({1, 2, n, d}, rng);
  Linear L = Linear::init(d, d, rng);
  const Var w = Var::constant(rand_tensor({1, 2, n, d}, rng));
  ParamList params{{"h", h}};
  append(params, "hc.", p.parameters());
  append(params, "L.", L.parameters());
  const auto rep = grad_check([&] { return sum(mul(hc_block(p, h, [&](const Var& x) { return L(x); }), w)); }, params);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(HyperConnections, RejectsBadShapes) {
  EXPECT_THROW(HcParams::init_static(0), std::invalid_argument);
  EXPECT_THROW(hc_expand(Var::constant(Tensor({2, 2})), 2), DimensionError);
  HcParams p = HcParams::init_static(2);
  const Var h = Var::constant(Tensor({1, 1, 2, 3}));
  EXPECT_THROW(hc_combine(hc_static_weights(p), h, Var::constant(Tensor({1, 1, 4}))), DimensionError);
}
