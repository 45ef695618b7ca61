#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fluid/ops.hpp"

namespace fluid {

using Rng = std::mt19937_64;

/// Named parameter list, in a stable registration order.
using ParamList = std::vector<std::pair<std::string, Var>>;

inline void append(ParamList& into, const std::string& prefix, const ParamList& from) {
  for (const auto& [name, v] : from) into.emplace_back(prefix + name, v);
}

inline Tensor uniform_tensor(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
inline Var init_param(const Shape& shape, std::size_t fan_in, Rng& rng) {
  return Var::parameter(uniform_tensor(shape, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
}

inline Var const_param(const Shape& shape, double value) { return Var::parameter(Tensor(shape, value)); }

/// y = x W + b over the last axis.
struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.weight = init_param({in, out}, in, rng);
    l.bias = init_param({out}, in, rng);
    return l;
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Var operator()(const Var& x) const { return add(matmul(x, weight), bias); }

  ParamList parameters() const { return {{"weight", weight}, {"bias", bias}}; }
};

struct LayerNorm {
  Var gain;
  Var bias;
  double eps = 1e-5;

  static LayerNorm init(std::size_t d) { return {const_param({d}, 1.0), const_param({d}, 0.0), 1e-5}; }

  Var operator()(const Var& x) const { return layer_norm(x, gain, bias, eps); }

  ParamList parameters() const { return {{"gain", gain}, {"bias", bias}}; }
};

}  // namespace fluid
