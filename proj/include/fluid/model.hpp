#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/hyper_connections.hpp"
#include "fluid/lan.hpp"
#include "fluid/nn.hpp"

namespace fluid {

enum class HcMode { residual, static_hc, liquid };
enum class TaskKind { regression, classification };

inline std::string to_string(HcMode m) {
  switch (m) {
    case HcMode::residual: return "residual";
    case HcMode::static_hc: return "static";
    case HcMode::liquid: return "liquid";
  }
  return "?";
}

inline HcMode parse_hc_mode(const std::string& s) {
  if (s == "residual") return HcMode::residual;
  if (s == "static") return HcMode::static_hc;
  if (s == "liquid") return HcMode::liquid;
  throw std::invalid_argument("unknown hc mode '" + s + "'");
}

inline std::string to_string(GateMode m) {
  switch (m) {
    case GateMode::learned: return "learned";
    case GateMode::sdpa_limit: return "sdpa_limit";
    case GateMode::ct_rnn: return "ct_rnn";
  }
  return "?";
}

inline GateMode parse_gate_mode(const std::string& s) {
  if (s == "learned") return GateMode::learned;
  if (s == "sdpa_limit") return GateMode::sdpa_limit;
  if (s == "ct_rnn") return GateMode::ct_rnn;
  throw std::invalid_argument("unknown gate mode '" + s + "'");
}

struct FluidConfig {
  LanConfig lan;
  std::size_t in_features = 2;  // value features, time excluded
  std::size_t out_dim = 2;
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 1;  // 0 = encoder only, head applied per position
  std::size_t ffn_dim = 64;
  HcMode hc_mode = HcMode::residual;
  std::size_t hc_n = 1;
  GateMode gate_mode = GateMode::learned;
  TaskKind task = TaskKind::regression;
  std::size_t max_len = 4096;
  bool time_feature = true;

  void validate() const {
    lan.validate();
    if (lan.d_model % 2 != 0) throw std::invalid_argument("d_model must be even for sinusoidal encoding");
    if (in_features == 0 || out_dim == 0 || ffn_dim == 0) throw std::invalid_argument("model widths must be positive");
    if (hc_mode != HcMode::residual && hc_n < 1) throw std::invalid_argument("hc_n must be >= 1");
  }
};

inline nlohmann::json to_json(const FluidConfig& c) {
  nlohmann::json j;
  j["d_model"] = c.lan.d_model;
  j["heads"] = c.lan.heads;
  j["euler_steps"] = c.lan.euler_steps;
  j["top_k"] = c.lan.top_k ? nlohmann::json(*c.lan.top_k) : nlohmann::json(nullptr);
  j["epsilon"] = c.lan.epsilon;
  j["sink_gate"] = c.lan.sink_gate;
  j["horizon"] = c.lan.horizon;
  j["in_features"] = c.in_features;
  j["out_dim"] = c.out_dim;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["ffn_dim"] = c.ffn_dim;
  j["hc_mode"] = to_string(c.hc_mode);
  j["hc_n"] = c.hc_n;
  j["gate_mode"] = to_string(c.gate_mode);
  j["task"] = c.task == TaskKind::regression ? "regression" : "classification";
  j["max_len"] = c.max_len;
  j["time_feature"] = c.time_feature;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline FluidConfig fluid_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"d_model", "heads",   "euler_steps", "top_k",    "epsilon",   "sink_gate",
                                "horizon", "in_features", "out_dim", "encoder_layers", "decoder_layers",
                                "ffn_dim", "hc_mode", "hc_n",        "gate_mode", "task",     "max_len",
                                "time_feature"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  FluidConfig c;
  c.lan.d_model = j.value("d_model", c.lan.d_model);
  c.lan.heads = j.value("heads", c.lan.heads);
  c.lan.euler_steps = j.value("euler_steps", c.lan.euler_steps);
  if (j.contains("top_k") && !j["top_k"].is_null()) c.lan.top_k = j["top_k"].get<std::size_t>();
  c.lan.epsilon = j.value("epsilon", c.lan.epsilon);
  c.lan.sink_gate = j.value("sink_gate", c.lan.sink_gate);
  c.lan.horizon = j.value("horizon", c.lan.horizon);
  c.in_features = j.value("in_features", c.in_features);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  if (j.contains("hc_mode")) c.hc_mode = parse_hc_mode(j["hc_mode"].get<std::string>());
  c.hc_n = j.value("hc_n", c.hc_n);
  if (j.contains("gate_mode")) c.gate_mode = parse_gate_mode(j["gate_mode"].get<std::string>());
  if (j.contains("task")) {
    const auto t = j["task"].get<std::string>();
    if (t == "regression") c.task = TaskKind::regression;
    else if (t == "classification") c.task = TaskKind::classification;
    else throw std::invalid_argument("unknown task '" + t + "'");
  }
  c.max_len = j.value("max_len", c.max_len);
  c.time_feature = j.value("time_feature", c.time_feature);
  c.validate();
  return c;
}

/// PE(pos,2i) = sin(pos / 10000^(2i/d)), PE(pos,2i+1) = cos(same).
inline Tensor positional_encoding(std::size_t T, std::size_t d) {
  if (d % 2 != 0) throw std::invalid_argument("positional_encoding requires even d, got " + std::to_string(d));
  Tensor pe({T, d});
  auto p = pe.mutable_data();
  for (std::size_t pos = 0; pos < T; ++pos)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      p[pos * d + 2 * i] = std::sin(angle);
      p[pos * d + 2 * i + 1] = std::cos(angle);
    }
  return pe;
}

struct FeedForward {
  Linear in, out;

  static FeedForward init(std::size_t d, std::size_t hidden, Rng& rng) {
    return {Linear::init(d, hidden, rng), Linear::init(hidden, d, rng)};
  }
  Var operator()(const Var& x) const { return out(relu(in(x))); }
  ParamList parameters() const {
    ParamList p;
    append(p, "in.", in.parameters());
    append(p, "out.", out.parameters());
    return p;
  }
};

/// A sublayer wrapped by its connection and the post-norm.
struct Connection {
  HcParams hc;
  LayerNorm ln;

  static Connection init(const FluidConfig& c, Rng& rng) {
    Connection k;
    const std::size_t d = c.lan.d_model;
    switch (c.hc_mode) {
      case HcMode::residual: k.hc = HcParams::residual(); break;
      case HcMode::static_hc: k.hc = HcParams::init_static(c.hc_n); break;
      case HcMode::liquid: k.hc = HcParams::init_liquid(c.hc_n, d, rng); break;
    }
    k.ln = LayerNorm::init(d);
    return k;
  }

  template <class Sublayer>
  Var operator()(const Var& h, Sublayer&& layer) const {
    return ln(hc_block(hc, h, std::forward<Sublayer>(layer)));
  }

  ParamList parameters() const {
    ParamList p;
    append(p, "hc.", hc.parameters());
    append(p, "ln.", ln.parameters());
    return p;
  }
};

struct EncoderLayer {
  MultiHeadLanParams self_attn;
  Connection c1;
  FeedForward ffn;
  Connection c2;
};

struct DecoderLayer {
  MultiHeadLanParams self_attn;
  Connection c1;
  MultiHeadLanParams cross_attn;
  Connection c2;
  FeedForward ffn;
  Connection c3;
};

/// Per-call capture of attention weights and logit trajectories.
struct ModelProbe {
  bool record_trajectory = false;
  std::vector<AttentionProbe> encoder_self, decoder_self, decoder_cross;
};

/// Batch of event sequences: values [B,T,F], times [B,T], mask [B,T] (1 = real).
struct SeqBatch {
  Tensor values;
  Tensor times;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> positions;  // [T] index fed to the sinusoidal encoding; empty = 0..T-1

  std::size_t batch() const { return values.dim(0); }
  std::size_t length() const { return values.dim(1); }
};

class FluidModel {
 public:
  FluidConfig cfg;
  Linear embed;  // shared by encoder and decoder
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  LayerNorm enc_final, dec_final;
  Linear out_head;

  static FluidModel init(const FluidConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    FluidModel m;
    m.cfg = c;
    const std::size_t d = c.lan.d_model;
    m.embed = Linear::init(c.in_features + (c.time_feature ? 1 : 0), d, rng);
    auto attn = [&] {
      auto p = MultiHeadLanParams::init(c.lan, rng);
      p.gates.mode = c.gate_mode;
      return p;
    };
    for (std::size_t l = 0; l < c.encoder_layers; ++l) {
      EncoderLayer e;
      e.self_attn = attn();
      e.c1 = Connection::init(c, rng);
      e.ffn = FeedForward::init(d, c.ffn_dim, rng);
      e.c2 = Connection::init(c, rng);
      m.encoder.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < c.decoder_layers; ++l) {
      DecoderLayer dl;
      dl.self_attn = attn();
      dl.c1 = Connection::init(c, rng);
      dl.cross_attn = attn();
      dl.c2 = Connection::init(c, rng);
      dl.ffn = FeedForward::init(d, c.ffn_dim, rng);
      dl.c3 = Connection::init(c, rng);
      m.decoder.push_back(std::move(dl));
    }
    m.enc_final = LayerNorm::init(d);
    m.dec_final = LayerNorm::init(d);
    m.out_head = Linear::init(d, c.out_dim, rng);
    return m;
  }

  std::size_t streams() const { return cfg.hc_mode == HcMode::residual ? 1 : cfg.hc_n; }
  bool finalize_streams() const { return cfg.hc_mode != HcMode::residual; }

  /// Trainable parameters in registration order; the embedding appears once.
  ParamList parameters() const { return collect(false); }

  /// Every tensor of the model, including ones the current gate mode ignores.
  ParamList state() const { return collect(true); }

  /// [values ; t] -> d_model, plus positional encoding by index.
  Var embed_inputs(const Tensor& values, const Tensor& times, const std::vector<std::size_t>& positions = {}) const {
    if (values.rank() != 3 || values.dim(2) != cfg.in_features)
      throw DimensionError("values must be [B,T," + std::to_string(cfg.in_features) + "], got " +
                           shape_str(values.shape()));
    const std::size_t B = values.dim(0), T = values.dim(1), F = cfg.in_features;
    if (T > cfg.max_len)
      throw std::invalid_argument("sequence length " + std::to_string(T) + " exceeds configured max " +
                                  std::to_string(cfg.max_len));
    if (!positions.empty() && positions.size() != T)
      throw DimensionError("positions must have one entry per step (" + std::to_string(T) + "), got " +
                           std::to_string(positions.size()));
    const std::size_t span = positions.empty() ? T : *std::max_element(positions.begin(), positions.end()) + 1;
    if (span > cfg.max_len)
      throw std::invalid_argument("position " + std::to_string(span - 1) + " exceeds configured max " +
                                  std::to_string(cfg.max_len));
    Var x;
    if (cfg.time_feature) {
      if (times.shape() != Shape{B, T}) throw DimensionError("times must be [B,T], got " + shape_str(times.shape()));
      Tensor in({B, T, F + 1});
      auto o = in.mutable_data();
      auto v = values.data();
      auto t = times.data();
      for (std::size_t r = 0; r < B * T; ++r) {
        std::copy_n(v.data() + r * F, F, o.data() + r * (F + 1));
        o[r * (F + 1) + F] = t[r];
      }
      x = embed(Var::constant(in));
    } else {
      x = embed(Var::constant(values));
    }
    const std::size_t d = cfg.lan.d_model;
    Tensor pe = positional_encoding(span, d);
    if (!positions.empty()) {
      Tensor picked({T, d});
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(pe.data().begin() + positions[t] * d, d, picked.mutable_data().begin() + t * d);
      pe = picked;
    }
    return add(x, Var::constant(pe));
  }

  Var encoder_forward(const Var& x, const std::vector<std::uint8_t>* key_mask = nullptr,
                      ModelProbe* probe = nullptr) const {
    if (encoder.empty()) return x;
    LanConfig lc = cfg.lan;
    lc.causal = false;
    Var h = hc_expand(x, streams());
    for (const auto& layer : encoder) {
      AttentionProbe* ap = next_probe(probe, probe ? &probe->encoder_self : nullptr);
      h = layer.c1(h, [&](const Var& x0) { return multi_head_lan(x0, x0, x0, layer.self_attn, lc, key_mask, ap); });
      h = layer.c2(h, [&](const Var& x0) { return layer.ffn(x0); });
    }
    return collapse(h, enc_final);
  }

  Var decoder_forward(const Var& y, const Var& z, const std::vector<std::uint8_t>* memory_mask = nullptr,
                      ModelProbe* probe = nullptr) const {
    if (decoder.empty()) return y;
    LanConfig self_cfg = cfg.lan;
    self_cfg.causal = true;
    LanConfig cross_cfg = cfg.lan;
    cross_cfg.causal = false;
    Var h = hc_expand(y, streams());
    for (const auto& layer : decoder) {
      AttentionProbe* sp = next_probe(probe, probe ? &probe->decoder_self : nullptr);
      AttentionProbe* cp = next_probe(probe, probe ? &probe->decoder_cross : nullptr);
      h = layer.c1(h, [&](const Var& x0) { return multi_head_lan(x0, x0, x0, layer.self_attn, self_cfg, nullptr, sp); });
      h = layer.c2(h, [&](const Var& x0) { return multi_head_lan(x0, z, z, layer.cross_attn, cross_cfg, memory_mask, cp); });
      h = layer.c3(h, [&](const Var& x0) { return layer.ffn(x0); });
    }
    return collapse(h, dec_final);
  }

  /// Predictions [B, T_out, out_dim]. With a decoder, T_out is the number of
  /// query times ([B,T_out]); encoder-only models predict at every history
  /// position and ignore `query_times`.
  Var forward(const SeqBatch& history, const Tensor& query_times, ModelProbe* probe = nullptr) const {
    return forward(history, query_times, {}, probe);
  }

  /// As above, with explicit encoding positions for the queries (empty = 0..T_out-1).
  Var forward(const SeqBatch& history, const Tensor& query_times, const std::vector<std::size_t>& query_positions,
              ModelProbe* probe = nullptr) const {
    const std::size_t B = history.batch();
    if (!history.mask.empty() && history.mask.size() != B * history.length())
      throw DimensionError("history mask size does not match [B,T]");
    const std::vector<std::uint8_t>* mask = history.mask.empty() ? nullptr : &history.mask;
    const Var z = encoder_forward(embed_inputs(history.values, history.times, history.positions), mask, probe);
    if (decoder.empty()) return out_head(z);
    if (query_times.rank() != 2 || query_times.dim(0) != B)
      throw DimensionError("query times must be [B,T_out], got " + shape_str(query_times.shape()));
    const Tensor zeros({B, query_times.dim(1), cfg.in_features});
    const Var y = embed_inputs(zeros, query_times, query_positions);
    return out_head(decoder_forward(y, z, mask, probe));
  }

 private:
  static AttentionProbe* next_probe(ModelProbe* probe, std::vector<AttentionProbe>* list) {
    if (!probe) return nullptr;
    list->emplace_back();
    list->back().record_trajectory = probe->record_trajectory;
    return &list->back();
  }

  Var collapse(const Var& h, const LayerNorm& ln) const {
    const auto& s = h.shape();
    if (!finalize_streams()) return reshape(h, {s[0], s[1], s[3]});
    return hc_network_finalize(h, ln);
  }

  ParamList collect(bool everything) const {
    ParamList p;
    const bool sink = cfg.lan.sink_gate;
    auto attn = [&](const MultiHeadLanParams& a) {
      ParamList q = a.parameters(sink || everything);
      if (everything) {
        q.erase(std::remove_if(q.begin(), q.end(), [](const auto& e) { return e.first.rfind("gates.", 0) == 0; }),
                q.end());
        append(q, "gates.", a.gates.all_tensors());
      }
      return q;
    };
    append(p, "embed.", embed.parameters());
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string pre = "encoder." + std::to_string(l) + ".";
      append(p, pre + "self_attn.", attn(encoder[l].self_attn));
      append(p, pre + "c1.", encoder[l].c1.parameters());
      append(p, pre + "ffn.", encoder[l].ffn.parameters());
      append(p, pre + "c2.", encoder[l].c2.parameters());
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string pre = "decoder." + std::to_string(l) + ".";
      append(p, pre + "self_attn.", attn(decoder[l].self_attn));
      append(p, pre + "c1.", decoder[l].c1.parameters());
      append(p, pre + "cross_attn.", attn(decoder[l].cross_attn));
      append(p, pre + "c2.", decoder[l].c2.parameters());
      append(p, pre + "ffn.", decoder[l].ffn.parameters());
      append(p, pre + "c3.", decoder[l].c3.parameters());
    }
    if (finalize_streams()) {
      if (!encoder.empty()) append(p, "enc_final.", enc_final.parameters());
      if (!decoder.empty()) append(p, "dec_final.", dec_final.parameters());
    }
    append(p, "out_head.", out_head.parameters());
    return p;
  }
};

/// Sets every gate core of the model to `mode`.
inline void set_gate_mode(FluidModel& m, GateMode mode) {
  m.cfg.gate_mode = mode;
  for (auto& e : m.encoder) e.self_attn.gates.mode = mode;
  for (auto& d : m.decoder) {
    d.self_attn.gates.mode = mode;
    d.cross_attn.gates.mode = mode;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: <path>.json manifest + <path>.bin tensor blobs
// ---------------------------------------------------------------------------

inline void save_checkpoint(const FluidModel& m, const std::filesystem::path& base) {
  const auto json_path = std::filesystem::path(base.string() + ".json");
  const auto bin_path = std::filesystem::path(base.string() + ".bin");
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + bin_path.string());
  nlohmann::json manifest;
  manifest["format"] = "fluid-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = to_json(m.cfg);
  manifest["blob"] = bin_path.filename().string();
  auto& list = manifest["parameters"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, v] : m.state()) {
    write_tensor(bin, v.value());
    const std::size_t bytes = serialized_size(v.value());
    list.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  if (!bin) throw std::runtime_error("failed writing " + bin_path.string());
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("cannot write " + json_path.string());
  js << manifest.dump(2) << '\n';
}

inline FluidModel load_checkpoint(const std::filesystem::path& base) {
  const auto json_path = std::filesystem::path(base.string() + ".json");
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("cannot read " + json_path.string());
  const auto manifest = nlohmann::json::parse(js);
  if (manifest.value("format", "") != "fluid-checkpoint")
    throw std::runtime_error(json_path.string() + " is not a checkpoint manifest");
  FluidModel m = FluidModel::init(fluid_config_from_json(manifest["config"]), 0);
  const auto bin_path = json_path.parent_path() / manifest["blob"].get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + bin_path.string());
  std::map<std::string, Var> by_name;
  for (auto& [name, v] : m.state()) by_name.emplace(name, v);
  for (const auto& entry : manifest["parameters"]) {
    const auto name = entry["name"].get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint parameter '" + name + "' not in model");
    bin.seekg(static_cast<std::streamoff>(entry["offset"].get<std::size_t>()));
    it->second.assign(read_tensor(bin));
    by_name.erase(it);
  }
  if (!by_name.empty()) throw std::runtime_error("checkpoint is missing parameter '" + by_name.begin()->first + "'");
  return m;
}

}  // namespace fluid
