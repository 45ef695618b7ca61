#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/data.hpp"
#include "fluid/model.hpp"
#include "fluid/train.hpp"

namespace fluid {

/// min/max of a, f_tau, f_phi for every recorded attention call.
inline std::string gate_trace_summary(const ModelProbe& probe) {
  std::ostringstream os;
  os.precision(6);
  auto one = [&](const std::string& name, const std::vector<AttentionProbe>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (!list[i].trajectory) continue;
      const auto& tr = *list[i].trajectory;
      auto range = [](const Tensor& t) {
        auto d = t.data();
        double lo = INFINITY, hi = -INFINITY;
        std::size_t bad = 0;
        for (double v : d) {
          if (!std::isfinite(v)) {
            ++bad;
            continue;
          }
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        std::ostringstream r;
        r << "[" << lo << ", " << hi << "] non-finite=" << bad;
        return r.str();
      };
      os << name << "." << i << ": a " << range(tr.a) << "; f_tau " << range(tr.f_tau) << "; f_phi "
         << range(tr.f_phi) << "; dt";
      for (double dt : tr.dt_effective) os << ' ' << dt;
      os << '\n';
    }
  };
  one("encoder_self", probe.encoder_self);
  one("decoder_self", probe.decoder_self);
  one("decoder_cross", probe.decoder_cross);
  return os.str();
}

// ---------------------------------------------------------------------------
// Spiral reconstruction
// ---------------------------------------------------------------------------

struct SpiralExperiment {
  SpiralSpec data;
  FluidConfig model;
  TrainConfig train;
  std::size_t n_val = 4;   // spirals used for checkpoint selection
  std::size_t n_test = 6;  // held-out spirals
  double value_scale = 2.0;
  std::size_t rotate = 0;  // spiral i takes role (i + rotate) mod n; used for folds

  static SpiralExperiment desk_scale() {
    SpiralExperiment e;
    e.data.n_spirals = 30;
    e.data.seed = 2024;
    e.model.lan.d_model = 32;
    e.model.lan.heads = 4;
    e.model.lan.euler_steps = 5;
    e.model.in_features = 2;
    e.model.out_dim = 2;
    e.model.ffn_dim = 64;
    e.train.epochs = 100;
    e.train.batch_size = 4;
    e.train.lr = 3e-3;
    return e;
  }

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
    if (n_val + n_test >= data.n_spirals) throw std::invalid_argument("spiral experiment: no training spirals left");
    if (model.in_features != 2 || model.out_dim != 2)
      throw std::invalid_argument("spiral experiment: model must map 2 features to 2 outputs");
    if (model.decoder_layers == 0) throw std::invalid_argument("spiral experiment: a decoder is required");
  }
};

inline nlohmann::json to_json(const SpiralExperiment& e) {
  return {{"data", to_json(e.data)}, {"model", to_json(e.model)}, {"train", to_json(e.train)},
          {"n_val", e.n_val},       {"n_test", e.n_test},        {"value_scale", e.value_scale}};
}

inline SpiralExperiment spiral_experiment_from_json(const nlohmann::json& j) {
  SpiralExperiment e = SpiralExperiment::desk_scale();
  if (j.contains("data")) e.data = spiral_spec_from_json(j["data"]);
  if (j.contains("model")) e.model = fluid_config_from_json(j["model"]);
  if (j.contains("train")) e.train = train_config_from_json(j["train"]);
  e.n_val = j.value("n_val", e.n_val);
  e.n_test = j.value("n_test", e.n_test);
  e.value_scale = j.value("value_scale", e.value_scale);
  e.validate();
  return e;
}

/// Conditioning points form the encoder history; interpolation and
/// extrapolation points are the decoder queries and regression targets.
/// Times are divided by t_max, values multiplied by value_scale.
struct SpiralBatch {
  SeqBatch history;
  Tensor query_times;  // [B,T_out]
  Tensor targets;      // [B,T_out,2], scaled
  std::vector<std::size_t> query_positions;  // index of each target in the subsampled sequence
};

inline SpiralBatch make_spiral_batch(const std::vector<EventSequence>& data, const std::vector<std::size_t>& idx,
                                     const SpiralSpec& spec, double value_scale) {
  const std::size_t n = data.at(idx.at(0)).length();
  const SpiralSplit split = split_spiral(n, spec);
  std::vector<std::size_t> targets = split.interpolation;
  targets.insert(targets.end(), split.extrapolation.begin(), split.extrapolation.end());
  const std::size_t B = idx.size(), Tc = split.conditioning.size(), To = targets.size();
  SpiralBatch b;
  b.history.values = Tensor({B, Tc, 2});
  b.history.times = Tensor({B, Tc});
  b.history.mask.assign(B * Tc, 1);
  b.history.positions = split.conditioning;
  b.query_positions = targets;
  b.query_times = Tensor({B, To});
  b.targets = Tensor({B, To, 2});
  auto hv = b.history.values.mutable_data();
  auto ht = b.history.times.mutable_data();
  auto qt = b.query_times.mutable_data();
  auto tv = b.targets.mutable_data();
  for (std::size_t s = 0; s < B; ++s) {
    const auto& e = data.at(idx[s]);
    if (e.length() != n) throw DimensionError("spiral batch: sequences differ in length");
    for (std::size_t i = 0; i < Tc; ++i) {
      const std::size_t p = split.conditioning[i];
      ht[s * Tc + i] = e.times[p] / spec.t_max;
      for (std::size_t f = 0; f < 2; ++f) hv[(s * Tc + i) * 2 + f] = e.values[p * 2 + f] * value_scale;
    }
    for (std::size_t i = 0; i < To; ++i) {
      const std::size_t p = targets[i];
      qt[s * To + i] = e.times[p] / spec.t_max;
      for (std::size_t f = 0; f < 2; ++f) tv[(s * To + i) * 2 + f] = e.values[p * 2 + f] * value_scale;
    }
  }
  return b;
}

/// Mean absolute error in data units over the target points of `idx`.
inline double spiral_mae(const FluidModel& m, const std::vector<EventSequence>& data,
                         const std::vector<std::size_t>& idx, const SpiralSpec& spec, double value_scale) {
  NoGradGuard ng;
  const SpiralBatch b = make_spiral_batch(data, idx, spec, value_scale);
  const Var pred = m.forward(b.history, b.query_times, b.query_positions);
  double total = 0.0;
  auto p = pred.value().data();
  auto t = b.targets.data();
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - t[i]);
  return total / static_cast<double>(p.size()) / value_scale;
}

struct SpiralRun {
  double test_mae = 0.0;
  double val_mae = 0.0;
  TrainResult result;
  FluidModel model;
};

/// Trains on the first spirals, selects the checkpoint on the next n_val and
/// reports MAE on the last n_test. `seed` drives initialization and shuffling.
inline SpiralRun run_spiral(const SpiralExperiment& ex, std::uint64_t seed, GateMode mode) {
  ex.validate();
  const auto data = generate_spirals(ex.data);
  const std::size_t n_train = ex.data.n_spirals - ex.n_val - ex.n_test;
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  const std::size_t n = ex.data.n_spirals;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? train_idx : i < n_train + ex.n_val ? val_idx : test_idx).push_back((i + ex.rotate) % n);

  FluidConfig mc = ex.model;
  mc.gate_mode = mode;
  SpiralRun run;
  run.model = FluidModel::init(mc, seed);
  const FluidModel& model = run.model;
  TrainConfig tc = ex.train;
  tc.seed = seed;
  const auto params = model.parameters();

  auto batch_loss = [&](const std::vector<std::size_t>& batch) {
    std::vector<std::size_t> ids;
    for (std::size_t b : batch) ids.push_back(train_idx[b]);
    const SpiralBatch sb = make_spiral_batch(data, ids, ex.data, ex.value_scale);
    return loss(tc.loss, model.forward(sb.history, sb.query_times, sb.query_positions), sb.targets);
  };
  auto metric = [&] { return spiral_mae(model, data, val_idx, ex.data, ex.value_scale); };
  auto dump = [&](std::size_t, const std::vector<std::size_t>& batch) {
    std::vector<std::size_t> ids;
    for (std::size_t b : batch) ids.push_back(train_idx[b]);
    const SpiralBatch sb = make_spiral_batch(data, ids, ex.data, ex.value_scale);
    ModelProbe probe;
    probe.record_trajectory = true;
    NoGradGuard ng;
    model.forward(sb.history, sb.query_times, sb.query_positions, &probe);
    return gate_trace_summary(probe);
  };
  run.result = train(params, n_train, tc, batch_loss, metric, dump);
  if (!run.result.best_params.empty()) restore(params, run.result.best_params);
  run.val_mae = spiral_mae(model, data, val_idx, ex.data, ex.value_scale);
  run.test_mae = spiral_mae(model, data, test_idx, ex.data, ex.value_scale);
  return run;
}

// ---------------------------------------------------------------------------
// Uninformative first token
// ---------------------------------------------------------------------------

/// Sequences whose token 0 is a constant marker carrying no information.
/// Features per token: [value, is_source, is_query, is_first]. Exactly one
/// source token per sequence; query tokens must output the source value and
/// every other token must output 0.
struct SinkExperiment {
  std::size_t n_train = 256;
  std::size_t n_test = 64;
  std::size_t seq_len = 8;
  FluidConfig model;
  TrainConfig train;

  static SinkExperiment desk_scale() {
    SinkExperiment e;
    e.model.lan.d_model = 16;
    e.model.lan.heads = 2;
    e.model.lan.euler_steps = 3;
    e.model.in_features = 4;
    e.model.out_dim = 1;
    e.model.ffn_dim = 32;
    e.model.encoder_layers = 1;
    e.model.decoder_layers = 0;
    e.train.epochs = 30;
    e.train.batch_size = 16;
    e.train.lr = 3e-3;
    return e;
  }
};

struct SinkData {
  SeqBatch inputs;
  Tensor targets;  // [N,T,1]
};

inline SinkData make_sink_data(std::size_t n, std::size_t T, std::uint64_t seed) {
  if (T < 3) throw std::invalid_argument("sink task needs at least 3 tokens");
  Rng rng(seed);
  std::normal_distribution<double> val(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  SinkData d;
  d.inputs.values = Tensor({n, T, 4});
  d.inputs.times = Tensor({n, T});
  d.inputs.mask.assign(n * T, 1);
  d.targets = Tensor({n, T, 1});
  auto v = d.inputs.values.mutable_data();
  auto t = d.inputs.times.mutable_data();
  auto y = d.targets.mutable_data();
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t src = std::uniform_int_distribution<std::size_t>(1, T - 1)(rng);
    double src_val = 0.0;
    std::vector<double> vals(T, 0.0);
    for (std::size_t i = 1; i < T; ++i) vals[i] = val(rng);
    src_val = vals[src];
    for (std::size_t i = 0; i < T; ++i) {
      double* f = v.data() + (s * T + i) * 4;
      t[s * T + i] = static_cast<double>(i) / static_cast<double>(T);
      if (i == 0) {
        f[3] = 1.0;
        continue;
      }
      const bool query = i != src && coin(rng);
      f[0] = vals[i];
      f[1] = i == src ? 1.0 : 0.0;
      f[2] = query ? 1.0 : 0.0;
      y[s * T + i] = query ? src_val : 0.0;
    }
  }
  return d;
}

inline SeqBatch slice_batch(const SeqBatch& all, const std::vector<std::size_t>& idx) {
  const std::size_t T = all.length(), F = all.values.dim(2);
  SeqBatch b;
  b.values = Tensor({idx.size(), T, F});
  b.times = Tensor({idx.size(), T});
  auto v = b.values.mutable_data();
  auto t = b.times.mutable_data();
  for (std::size_t s = 0; s < idx.size(); ++s) {
    std::copy_n(all.values.data().data() + idx[s] * T * F, T * F, v.data() + s * T * F);
    std::copy_n(all.times.data().data() + idx[s] * T, T, t.data() + s * T);
    b.mask.insert(b.mask.end(), all.mask.begin() + static_cast<std::ptrdiff_t>(idx[s] * T),
                  all.mask.begin() + static_cast<std::ptrdiff_t>((idx[s] + 1) * T));
  }
  return b;
}

inline Tensor slice_rows(const Tensor& all, const std::vector<std::size_t>& idx) {
  Shape s = all.shape();
  const std::size_t per = all.size() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(all.data().data() + idx[i] * per, per, o.data() + i * per);
  return out;
}

struct SinkRun {
  double mass_on_first = 0.0;  // encoder self-attention, averaged over heads, queries and test sequences
  double test_mse = 0.0;
};

inline SinkRun run_sink(const SinkExperiment& ex, std::uint64_t seed, bool sink_gate) {
  FluidConfig mc = ex.model;
  mc.lan.sink_gate = sink_gate;
  const FluidModel model = FluidModel::init(mc, seed);
  const SinkData train_data = make_sink_data(ex.n_train, ex.seq_len, seed * 7919 + 1);
  const SinkData test_data = make_sink_data(ex.n_test, ex.seq_len, seed * 7919 + 2);
  TrainConfig tc = ex.train;
  tc.seed = seed;
  const Tensor none({0});
  auto batch_loss = [&](const std::vector<std::size_t>& idx) {
    return loss(LossKind::mse, model.forward(slice_batch(train_data.inputs, idx), none),
                slice_rows(train_data.targets, idx));
  };
  train(model.parameters(), ex.n_train, tc, batch_loss, {});
  SinkRun r;
  NoGradGuard ng;
  ModelProbe probe;
  const Var pred = model.forward(test_data.inputs, none, &probe);
  r.mass_on_first = probe.encoder_self.front().mass_on_key(0);
  r.test_mse = loss(LossKind::mse, pred, test_data.targets).value().item();
  return r;
}

}  // namespace fluid
