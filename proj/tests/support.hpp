#pragma once

#include <functional>
#include <random>
#include <vector>

#include "fluid/fluid.hpp"

namespace testing_support {

using namespace fluid;

inline Tensor rand_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (double& v : t.mutable_data()) v = d(rng);
  return t;
}

inline Var rand_param(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var::parameter(rand_tensor(s, rng, lo, hi));
}

/// Finite-difference check of an op: the scalar is sum(op(inputs) * W) for a
/// fixed random W, so every output coordinate contributes.
inline GradCheckReport check_op(const std::function<Var(const std::vector<Var>&)>& op, const std::vector<Var>& inputs,
                                std::uint64_t seed = 99) {
  Rng rng(seed);
  const Shape out_shape = op(inputs).shape();
  const Var w = Var::constant(rand_tensor(out_shape, rng));
  ParamList params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("in" + std::to_string(i), inputs[i]);
  return grad_check([&] { return sum(mul(op(inputs), w)); }, params, 1e-5);
}

}  // namespace testing_support
