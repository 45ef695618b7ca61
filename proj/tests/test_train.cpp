#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace fluid;
using testing_support::rand_tensor;

TEST(Loss, MseMaeAndMasking) {
  const Var pred = Var::constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Tensor target({2, 2}, {0, 2, 3, 0});
  EXPECT_DOUBLE_EQ(loss(LossKind::mse, pred, target).value().item(), (1.0 + 16.0) / 4.0);
  EXPECT_DOUBLE_EQ(loss(LossKind::mae, pred, target).value().item(), (1.0 + 4.0) / 4.0);
  const Mask per_pos{1, 0};
  EXPECT_DOUBLE_EQ(loss(LossKind::mse, pred, target, &per_pos).value().item(), 0.5);
  const Mask per_elem{0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(loss(LossKind::mae, pred, target, &per_elem).value().item(), 4.0);
  const Mask none{0, 0};
  EXPECT_THROW(loss(LossKind::mse, pred, target, &none), std::invalid_argument);
  EXPECT_THROW(loss(LossKind::mse, pred, Tensor({4})), DimensionError);
}

TEST(Loss, CrossEntropyUniformLogitsIsLogC) {
  const Var logits = Var::constant(Tensor({3, 5}, 0.7));
  const Tensor target({3}, {0, 4, 2});
  EXPECT_NEAR(loss(LossKind::cross_entropy, logits, target).value().item(), std::log(5.0), 1e-14);
  EXPECT_THROW(loss(LossKind::cross_entropy, logits, Tensor({3}, {0, 5, 1})), std::invalid_argument);
  EXPECT_THROW(loss(LossKind::cross_entropy, logits, Tensor({3}, {0, 1.5, 1})), std::invalid_argument);
  EXPECT_EQ(parse_loss("cross_entropy"), LossKind::cross_entropy);
  EXPECT_THROW(parse_loss("huber"), std::invalid_argument);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  Var p = testing_support::rand_param({3, 4}, rng);
  const Tensor t = rand_tensor({3, 4}, rng);
  const Tensor cls({3}, {1, 0, 3});
  for (LossKind k : {LossKind::mse, LossKind::mae}) {
    const auto rep = grad_check([&] { return loss(k, p, t); }, {{"p", p}});
    EXPECT_LT(rep.max_rel_error, 1e-4);
  }
  const auto rep = grad_check([&] { return loss(LossKind::cross_entropy, p, cls); }, {{"p", p}});
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(AdamW, FirstStepMovesByLr) {
  Var p = Var::parameter(Tensor({1}, {1.0}));
  AdamWState st;
  adamw_step({{"p", p}}, {Tensor({1}, {0.5})}, st, 0.1, 0.9, 0.999, 0.0);
  EXPECT_NEAR(p.value()[0], 0.9, 1e-7);
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, DecoupledWeightDecay) {
  Var p = Var::parameter(Tensor({1}, {2.0}));
  AdamWState st;
  adamw_step({{"p", p}}, {Tensor({1}, {0.0})}, st, 0.1, 0.9, 0.999, 0.5);
  EXPECT_DOUBLE_EQ(p.value()[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Clip, ScalesToMaxNorm) {
  std::vector<Tensor> g{Tensor({2}, {3.0, 0.0}), Tensor({1}, {4.0})};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<Tensor> small{Tensor({1}, {0.5})};
  clip_grad_norm(small, 1.0);
  EXPECT_EQ(small[0][0], 0.5);
}

namespace {

struct LinearFit {
  Linear layer;
  Tensor x, y;

  explicit LinearFit(std::uint64_t seed, double target = -1.0) {
    Rng rng(seed);
    layer = Linear::init(3, 1, rng);
    x = rand_tensor({16, 3}, rng);
    y = Tensor({16, 1});
    for (std::size_t i = 0; i < 16; ++i)
      y.mutable_data()[i] = target >= 0 ? target : 2 * x[i * 3] - x[i * 3 + 1] + 0.5;
  }

  Var batch_loss(const std::vector<std::size_t>& idx) const {
    Tensor bx({idx.size(), 3}), by({idx.size(), 1});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < 3; ++c) bx.mutable_data()[r * 3 + c] = x[idx[r] * 3 + c];
      by.mutable_data()[r] = y[idx[r]];
    }
    return loss(LossKind::mse, layer(Var::constant(bx)), by);
  }

  double full_loss() const {
    std::vector<std::size_t> all(16);
    for (std::size_t i = 0; i < 16; ++i) all[i] = i;
    return batch_loss(all).value().item();
  }
};

}  // namespace

TEST(Train, FitsLinearTarget) {
  LinearFit f(2);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 200;
  cfg.batch_size = 4;
  const auto res = train(f.layer.parameters(), 16, cfg, [&](const auto& b) { return f.batch_loss(b); },
                         [&] { return f.full_loss(); });
  EXPECT_EQ(res.history.size(), 200u);
  EXPECT_LT(res.best_metric, 1e-4);
}

TEST(Train, ZeroLrLeavesParametersUnchanged) {
  LinearFit f(3);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.lr = 1e-300;
  cfg.epochs = 2;
  const auto before = snapshot(f.layer.parameters());
  train(f.layer.parameters(), 16, cfg, [&](const auto& b) { return f.batch_loss(b); }, {});
  const auto after = snapshot(f.layer.parameters());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(before[i] == after[i]);
}

TEST(Train, ZeroEpochsGiveEmptyHistory) {
  LinearFit f(4);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto before = snapshot(f.layer.parameters());
  const auto res = train(f.layer.parameters(), 16, cfg, [&](const auto& b) { return f.batch_loss(b); }, {});
  EXPECT_TRUE(res.history.empty());
  EXPECT_TRUE(res.best_params.empty());
  EXPECT_TRUE(snapshot(f.layer.parameters())[0] == before[0]);
}

TEST(Train, ConstantTargetLossNonIncreasingWithSmallLr) {
  LinearFit f(5, 0.3);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.lr = 1e-2;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  const auto res = train(f.layer.parameters(), 16, cfg, [&](const auto& b) { return f.batch_loss(b); },
                         [&] { return f.full_loss(); });
  for (std::size_t e = 1; e < res.history.size(); ++e)
    EXPECT_LE(res.history[e].val_metric, res.history[e - 1].val_metric);
}

TEST(Train, SeededRunsAreBitwiseIdentical) {
  auto run = [] {
    LinearFit f(6);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 3;
    cfg.seed = 9;
    return train(f.layer.parameters(), 16, cfg, [&](const auto& b) { return f.batch_loss(b); },
                 [&] { return f.full_loss(); });
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val_metric, b.history[e].val_metric);
  }
}

TEST(Train, SpiralMicroRunIsDeterministic) {
  SpiralExperiment ex = SpiralExperiment::desk_scale();
  ex.data.n_spirals = 6;
  ex.data.n_points = 30;
  ex.data.n_subsample = 10;
  ex.model.lan.d_model = 4;
  ex.model.lan.heads = 2;
  ex.model.lan.euler_steps = 2;
  ex.model.ffn_dim = 4;
  ex.train.epochs = 2;
  ex.n_val = 1;
  ex.n_test = 1;
  const auto a = run_spiral(ex, 3, GateMode::learned), b = run_spiral(ex, 3, GateMode::learned);
  ASSERT_EQ(a.result.history.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(a.result.history[e].train_loss, b.result.history[e].train_loss);
  EXPECT_EQ(a.test_mae, b.test_mae);
}

TEST(Train, DivergenceIsReportedWithDump) {
  Var p = Var::parameter(Tensor({1}, {1.0}));
  TrainConfig cfg;
  cfg.epochs = 1;
  bool dumped = false;
  try {
    train({{"p", p}}, 2, cfg, [&](const auto&) { return fluid::log(mul_scalar(p, -1.0)); }, {},
          [&](std::size_t, const std::vector<std::size_t>&) {
            dumped = true;
            return std::string("trace");
          });
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("trace"), std::string::npos);
  }
  EXPECT_TRUE(dumped);
}

TEST(Train, HistoryCsvFormat) {
  std::stringstream ss;
  write_history_csv(ss, {{1, 0.5, 0.25}});
  EXPECT_EQ(ss.str(), "epoch,train_loss,val_metric\n1,0.5,0.25\n");
}

TEST(Train, ConfigJsonRoundTrip) {
  TrainConfig c;
  c.lr = 3e-3;
  c.optimizer = OptimizerKind::sgd;
  c.loss = LossKind::mae;
  c.seed = 77;
  EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));
  EXPECT_THROW(train_config_from_json({{"lr", -1.0}}), std::invalid_argument);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  Var x = Var::parameter(Tensor({1}, {1.0}));
  EXPECT_THROW(grad_check([&] { return sum(x); }, {{"x", x}}, 0.0), std::invalid_argument);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // forward x^2, backward claims 3x
  Var x = Var::parameter(Tensor({1}, {2.0}));
  auto bad = [&] {
    return make_result(Tensor({1}, {x.value()[0] * x.value()[0]}), {x},
                       [x](const Tensor& g) { return std::vector<Tensor>{Tensor({1}, {3.0 * x.value()[0] * g[0]})}; });
  };
  EXPECT_GT(grad_check([&] { return sum(bad()); }, {{"x", x}}).max_rel_error, 0.1);
}
