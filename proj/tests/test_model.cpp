#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace fluid;
using testing_support::rand_tensor;

namespace {

FluidConfig tiny_cfg() {
  FluidConfig c;
  c.lan.d_model = 8;
  c.lan.heads = 2;
  c.lan.euler_steps = 3;
  c.in_features = 2;
  c.out_dim = 2;
  c.ffn_dim = 8;
  return c;
}

SeqBatch rand_history(std::size_t B, std::size_t T, std::size_t F, Rng& rng) {
  SeqBatch s;
  s.values = rand_tensor({B, T, F}, rng);
  s.times = Tensor({B, T});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) s.times.mutable_data()[b * T + t] = 0.1 * static_cast<double>(t + 1) + 0.01 * b;
  return s;
}

Tensor query_times(std::size_t B, std::size_t T) {
  Tensor q({B, T});
  for (std::size_t i = 0; i < q.size(); ++i) q.mutable_data()[i] = 0.5 + 0.05 * static_cast<double>(i);
  return q;
}

// ---- independent post-norm transformer built from the reference SDPA ----

Tensor ref_mha(const Tensor& xq, const Tensor& xkv, const MultiHeadLanParams& p, std::size_t heads, bool causal) {
  NoGradGuard ng;
  const Tensor q = p.q_proj(Var::constant(xq)).value();
  const Tensor k = p.k_proj(Var::constant(xkv)).value();
  const Tensor v = p.v_proj(Var::constant(xkv)).value();
  const std::size_t B = xq.dim(0), Tq = xq.dim(1), Tk = xkv.dim(1), d = xq.dim(2), Dh = d / heads;
  Tensor merged({B, Tq, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        reference::Mat keys, vals;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (causal && j > i) break;
          const std::size_t off = (b * Tk + j) * d + h * Dh;
          keys.emplace_back(k.data().begin() + off, k.data().begin() + off + Dh);
          vals.emplace_back(v.data().begin() + off, v.data().begin() + off + Dh);
        }
        const std::size_t qo = (b * Tq + i) * d + h * Dh;
        const reference::Vec qi(q.data().begin() + qo, q.data().begin() + qo + Dh);
        const auto r = reference::sdpa_reference(qi, keys, vals);
        std::copy(r.output.begin(), r.output.end(), merged.mutable_data().begin() + qo);
      }
  return p.out_proj(Var::constant(merged)).value();
}

Tensor ref_transformer(const FluidModel& m, const SeqBatch& hist, const Tensor& qt) {
  NoGradGuard ng;
  const auto& L = [](const LayerNorm& ln, const Tensor& a, const Tensor& b) {
    return ln(add(Var::constant(a), Var::constant(b))).value();
  };
  Tensor z = m.embed_inputs(hist.values, hist.times).value();
  for (const auto& e : m.encoder) {
    z = L(e.c1.ln, z, ref_mha(z, z, e.self_attn, m.cfg.lan.heads, false));
    z = L(e.c2.ln, z, e.ffn(Var::constant(z)).value());
  }
  Tensor y = m.embed_inputs(Tensor({qt.dim(0), qt.dim(1), m.cfg.in_features}), qt).value();
  for (const auto& dl : m.decoder) {
    y = L(dl.c1.ln, y, ref_mha(y, y, dl.self_attn, m.cfg.lan.heads, true));
    y = L(dl.c2.ln, y, ref_mha(y, z, dl.cross_attn, m.cfg.lan.heads, false));
    y = L(dl.c3.ln, y, dl.ffn(Var::constant(y)).value());
  }
  return m.out_head(Var::constant(y)).value();
}

}  // namespace

TEST(PositionalEncoding, SpotValues) {
  const Tensor pe = positional_encoding(3, 4);
  EXPECT_EQ(pe[0], 0.0);
  EXPECT_EQ(pe[1], 1.0);
  EXPECT_EQ(pe[3], 1.0);
  EXPECT_DOUBLE_EQ(pe[4], std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe[5], std::cos(1.0));
  EXPECT_DOUBLE_EQ(pe[2 * 4 + 2], std::sin(2.0 / 100.0));
  EXPECT_DOUBLE_EQ(pe[2 * 4 + 3], std::cos(2.0 / 100.0));
  EXPECT_THROW(positional_encoding(3, 5), std::invalid_argument);
}

TEST(Model, OutputShapeContract) {
  Rng rng(1);
  for (HcMode mode : {HcMode::residual, HcMode::static_hc, HcMode::liquid}) {
    FluidConfig c = tiny_cfg();
    c.hc_mode = mode;
    c.hc_n = 3;
    c.encoder_layers = 2;
    const FluidModel m = FluidModel::init(c, 7);
    const Var y = m.forward(rand_history(2, 5, 2, rng), query_times(2, 3));
    EXPECT_EQ(y.shape(), (Shape{2, 3, 2})) << to_string(mode);
  }
  FluidConfig enc_only = tiny_cfg();
  enc_only.decoder_layers = 0;
  const FluidModel m = FluidModel::init(enc_only, 7);
  EXPECT_EQ(m.forward(rand_history(2, 5, 2, rng), Tensor()).shape(), (Shape{2, 5, 2}));
}

TEST(Model, ZeroWeightsExceptOutputBiasGiveConstant) {
  Rng rng(2);
  FluidModel m = FluidModel::init(tiny_cfg(), 3);
  for (auto& [name, v] : m.state()) {
    Var w = v;
    w.assign(Tensor(v.shape()));
  }
  m.out_head.bias.assign(Tensor({2}, {0.7, -1.3}));
  const Tensor y = m.forward(rand_history(2, 4, 2, rng), query_times(2, 3)).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], i % 2 ? -1.3 : 0.7);
}

TEST(Model, DecoderIsCausal) {
  Rng rng(3);
  FluidConfig c = tiny_cfg();
  c.decoder_layers = 2;
  c.hc_mode = HcMode::liquid;
  c.hc_n = 2;
  const FluidModel m = FluidModel::init(c, 4);
  const SeqBatch hist = rand_history(1, 4, 2, rng);
  const Tensor z = m.encoder_forward(m.embed_inputs(hist.values, hist.times)).value();
  Var y = Var::parameter(rand_tensor({1, 4, 8}, rng));
  // finite differences of output row i w.r.t. input row j
  const double h = 1e-5;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c2 = 0; c2 < 8; ++c2) {
      Tensor plus = y.value().clone(), minus = y.value().clone();
      plus.mutable_data()[j * 8 + c2] += h;
      minus.mutable_data()[j * 8 + c2] -= h;
      const Tensor op = m.decoder_forward(Var::constant(plus), Var::constant(z)).value();
      const Tensor om = m.decoder_forward(Var::constant(minus), Var::constant(z)).value();
      for (std::size_t i = 0; i < j; ++i)
        for (std::size_t o = 0; o < 8; ++o) EXPECT_EQ(op[i * 8 + o], om[i * 8 + o]) << i << " " << j;
    }
}

TEST(Model, SharedEmbeddingCountedOnceAndFeedsBothPaths) {
  Rng rng(4);
  FluidModel m = FluidModel::init(tiny_cfg(), 5);
  std::size_t embed_entries = 0;
  for (const auto& [name, v] : m.parameters()) embed_entries += name.rfind("embed.", 0) == 0;
  EXPECT_EQ(embed_entries, 2u);

  const SeqBatch hist = rand_history(1, 3, 2, rng);
  const Tensor qt = query_times(1, 2);
  const Tensor enc0 = m.embed_inputs(hist.values, hist.times).value();
  const Tensor dec0 = m.embed_inputs(Tensor({1, 2, 2}), qt).value();
  Tensor w = m.embed.weight.value().clone();
  w.mutable_data()[w.size() - 1] += 0.5;  // time row
  m.embed.weight.assign(w);
  EXPECT_FALSE(m.embed_inputs(hist.values, hist.times).value() == enc0);
  EXPECT_FALSE(m.embed_inputs(Tensor({1, 2, 2}), qt).value() == dec0);
}

TEST(Model, ResidualSdpaLimitReproducesPlainTransformer) {
  Rng rng(5);
  FluidConfig c = tiny_cfg();
  c.gate_mode = GateMode::sdpa_limit;
  c.lan.sink_gate = false;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  const FluidModel m = FluidModel::init(c, 6);
  const SeqBatch hist = rand_history(2, 5, 2, rng);
  const Tensor qt = query_times(2, 4);
  const Tensor got = m.forward(hist, qt).value();
  const Tensor want = ref_transformer(m, hist, qt);
  EXPECT_LT(max_abs_diff(got, want), 1e-5);
}

TEST(Model, LearnedGatesDepartFromTransformer) {
  Rng rng(5);
  FluidConfig c = tiny_cfg();
  c.lan.sink_gate = false;
  const FluidModel m = FluidModel::init(c, 6);
  const SeqBatch hist = rand_history(1, 5, 2, rng);
  const Tensor qt = query_times(1, 4);
  EXPECT_GT(max_abs_diff(m.forward(hist, qt).value(), ref_transformer(m, hist, qt)), 1e-3);
}

TEST(Model, EndToEndGradient) {
  Rng rng(6);
  FluidConfig c = tiny_cfg();
  c.hc_mode = HcMode::liquid;
  c.hc_n = 2;
  c.lan.top_k = 3;
  const FluidModel m = FluidModel::init(c, 8);
  // make the sink gate non-trivial
  for (auto& [name, v] : m.parameters())
    if (name.find("sink_proj.weight") != std::string::npos) {
      Var w = v;
      w.assign(rand_tensor(v.shape(), rng, -0.3, 0.3));
    }
  const SeqBatch hist = rand_history(1, 4, 2, rng);
  const Tensor qt = query_times(1, 4);
  const Var target = Var::constant(rand_tensor({1, 4, 2}, rng));
  const auto rep = grad_check([&] { return mean(square(sub(m.forward(hist, qt), target))); }, m.parameters(), 1e-5);
  EXPECT_LT(rep.max_rel_error, 1e-3) << rep.worst;
  EXPECT_GT(rep.checked, 500u);
}

TEST(Model, CheckpointRoundTripIsBitwise) {
  Rng rng(7);
  FluidConfig c = tiny_cfg();
  c.hc_mode = HcMode::liquid;
  c.hc_n = 2;
  c.lan.top_k = 2;
  const FluidModel m = FluidModel::init(c, 9);
  const auto dir = std::filesystem::temp_directory_path() / "fluid_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "model");
  const FluidModel back = load_checkpoint(dir / "model");
  const SeqBatch hist = rand_history(1, 4, 2, rng);
  EXPECT_TRUE(back.forward(hist, query_times(1, 3)).value() == m.forward(hist, query_times(1, 3)).value());
  EXPECT_EQ(back.cfg.lan.top_k, c.lan.top_k);
  const auto a = m.state(), b = back.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].second.value() == b[i].second.value()) << a[i].first;
  EXPECT_THROW(load_checkpoint(dir / "missing"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Model, ConfigJsonRoundTripAndValidation) {
  FluidConfig c = tiny_cfg();
  c.lan.top_k = 4;
  c.hc_mode = HcMode::static_hc;
  c.hc_n = 3;
  c.gate_mode = GateMode::ct_rnn;
  const FluidConfig back = fluid_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(fluid_config_from_json({{"d_modle", 8}}), std::invalid_argument);
  EXPECT_THROW(fluid_config_from_json({{"d_model", 6}, {"heads", 4}}), std::invalid_argument);
  EXPECT_THROW(fluid_config_from_json({{"hc_mode", "wide"}}), std::invalid_argument);
}

TEST(Model, RejectsOverlongSequencesAndBadShapes) {
  Rng rng(8);
  FluidConfig c = tiny_cfg();
  c.max_len = 4;
  const FluidModel m = FluidModel::init(c, 1);
  EXPECT_THROW(m.forward(rand_history(1, 5, 2, rng), query_times(1, 2)), std::invalid_argument);
  EXPECT_THROW(m.forward(rand_history(1, 3, 3, rng), query_times(1, 2)), DimensionError);
  EXPECT_THROW(m.forward(rand_history(1, 3, 2, rng), query_times(2, 2)), DimensionError);
}

TEST(Model, ProbeRecordsEveryAttentionCall) {
  Rng rng(9);
  FluidConfig c = tiny_cfg();
  c.encoder_layers = 2;
  const FluidModel m = FluidModel::init(c, 2);
  ModelProbe probe;
  probe.record_trajectory = true;
  m.forward(rand_history(1, 4, 2, rng), query_times(1, 3), &probe);
  EXPECT_EQ(probe.encoder_self.size(), 2u);
  EXPECT_EQ(probe.decoder_self.size(), 1u);
  ASSERT_EQ(probe.decoder_cross.size(), 1u);
  EXPECT_EQ(probe.decoder_cross[0].weights.shape(), (Shape{1, 2, 3, 4}));
  EXPECT_EQ(probe.decoder_cross[0].trajectory->steps(), 3u);
}

TEST(Model, SeededInitIsDeterministic) {
  const FluidModel a = FluidModel::init(tiny_cfg(), 11), b = FluidModel::init(tiny_cfg(), 11);
  const auto pa = a.state(), pb = b.state();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i].second.value() == pb[i].second.value());
}
