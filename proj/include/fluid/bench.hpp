#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/model.hpp"

namespace fluid {

struct BenchDims {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t batch = 1;
  std::size_t seq_len = 1024;
};

struct BenchReport {
  std::string label;
  BenchDims dims;
  std::size_t reps = 0;
  double mean_s = 0.0;
  double std_s = 0.0;
  double throughput = 0.0;  // sequences per second
  double peak_mb = 0.0;     // MiB, tracked tensor allocations

  static std::string csv_header() { return "config,run_time_s,throughput_seq_s,peak_memory_mb"; }

  std::string csv_row() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6g,%.6g,%.6g", label.c_str(), mean_s, throughput, peak_mb);
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"config", label},
            {"d_model", dims.d_model},
            {"heads", dims.heads},
            {"batch", dims.batch},
            {"seq_len", dims.seq_len},
            {"reps", reps},
            {"run_time_s", mean_s},
            {"run_time_std_s", std_s},
            {"throughput_seq_s", throughput},
            {"peak_memory_mb", peak_mb}};
  }
};

/// One forward pass; built once per benchmark by a factory.
using ForwardPass = std::function<void()>;
using ModelFactory = std::function<ForwardPass(const BenchDims&)>;

/// Times `reps` forward passes after `warmup` untimed ones. Peak memory is
/// the allocator high-water mark during a pass, including live parameters
/// and inputs; the largest over all timed passes is reported.
inline BenchReport bench(const ModelFactory& factory, const BenchDims& dims, std::size_t reps,
                         std::size_t warmup = 1, std::string label = "fluid") {
  if (reps < 3) throw std::invalid_argument("bench needs at least 3 repetitions");
  const ForwardPass pass = factory(dims);
  for (std::size_t i = 0; i < warmup; ++i) pass();
  std::vector<double> times;
  std::int64_t peak = 0;
  for (std::size_t i = 0; i < reps; ++i) {
    memory::reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    pass();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
    peak = std::max(peak, memory::peak_bytes());
  }
  BenchReport r;
  r.label = std::move(label);
  r.dims = dims;
  r.reps = reps;
  double total = 0.0;
  for (double t : times) total += t;
  r.mean_s = total / static_cast<double>(reps);
  double var = 0.0;
  for (double t : times) var += (t - r.mean_s) * (t - r.mean_s);
  r.std_s = std::sqrt(var / static_cast<double>(reps));
  r.throughput = static_cast<double>(reps * dims.batch) / total;
  r.peak_mb = static_cast<double>(peak) / (1024.0 * 1024.0);
  return r;
}

/// Single FLUID encoder layer (self-LAN + FFN) on random embedded input,
/// evaluated without gradient tracking.
inline ModelFactory fluid_encoder_factory(FluidConfig base, std::uint64_t seed = 0) {
  return [base, seed](const BenchDims& dims) -> ForwardPass {
    FluidConfig c = base;
    c.lan.d_model = dims.d_model;
    c.lan.heads = dims.heads;
    c.encoder_layers = 1;
    c.decoder_layers = 0;
    c.max_len = std::max(c.max_len, dims.seq_len);
    auto model = std::make_shared<FluidModel>(FluidModel::init(c, seed));
    Rng rng(seed + 1);
    auto x = std::make_shared<Var>(Var::constant(uniform_tensor({dims.batch, dims.seq_len, dims.d_model}, 1.0, rng)));
    return [model, x] {
      NoGradGuard ng;
      const Var out = model->encoder_forward(*x);
      if (!out.value().all_finite()) throw std::runtime_error("bench: non-finite output");
    };
  };
}

}  // namespace fluid
