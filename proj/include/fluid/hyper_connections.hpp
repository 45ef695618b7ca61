#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "fluid/nn.hpp"
#include "fluid/ops.hpp"

// Hyper-connections: the hidden state is widened to n streams H [B,T,n,d]. A
// sublayer L reads x0 = A_m^T H and writes back H^ = B^T L(x0) + A_r^T H.
// The liquid variant perturbs (B, A_m, A_r) per token from Norm(H).

namespace fluid {

struct LiquidHcParams {
  Var w_b;  // [d, 1]
  Var w_m;  // [d, 1]
  Var w_r;  // [d, n]
  Var s_b;  // [1]
  Var s_a;  // [1]
};

struct HcParams {
  std::size_t n = 1;
  Var beta;    // B   [n]
  Var a_m;     // A_m [n]
  Var a_r;     // A_r [n, n]
  std::optional<LiquidHcParams> liquid;

  /// B = 1, A_m = 1/n, A_r = I; liquid scales start at `scale`.
  static HcParams init_static(std::size_t n) {
    if (n < 1) throw std::invalid_argument("hyper-connection expansion rate must be >= 1");
    HcParams p;
    p.n = n;
    p.beta = const_param({n}, 1.0);
    p.a_m = const_param({n}, 1.0 / static_cast<double>(n));
    Tensor eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye.mutable_data()[i * n + i] = 1.0;
    p.a_r = Var::parameter(eye);
    return p;
  }

  static HcParams init_liquid(std::size_t n, std::size_t d, Rng& rng, double scale = 1e-2) {
    HcParams p = init_static(n);
    p.liquid = LiquidHcParams{init_param({d, 1}, d, rng), init_param({d, 1}, d, rng), init_param({d, n}, d, rng),
                              const_param({1}, scale), const_param({1}, scale)};
    return p;
  }

  /// n = 1 with unit weights held constant: the plain residual connection.
  static HcParams residual() {
    HcParams p;
    p.n = 1;
    p.beta = Var::constant(Tensor({1}, 1.0));
    p.a_m = Var::constant(Tensor({1}, 1.0));
    p.a_r = Var::constant(Tensor({1, 1}, 1.0));
    return p;
  }

  ParamList parameters() const {
    ParamList out;
    for (const auto& [name, v] : ParamList{{"beta", beta}, {"a_m", a_m}, {"a_r", a_r}})
      if (v.requires_grad()) out.emplace_back(name, v);
    if (liquid) {
      out.emplace_back("w_b", liquid->w_b);
      out.emplace_back("w_m", liquid->w_m);
      out.emplace_back("w_r", liquid->w_r);
      out.emplace_back("s_b", liquid->s_b);
      out.emplace_back("s_a", liquid->s_a);
    }
    return out;
  }
};

/// Connection weights in effect for one application. Static weights keep
/// their own shapes ([n], [n], [n,n]); liquid ones are per token
/// ([B,T,n], [B,T,n], [B,T,n,n]).
struct HcWeights {
  Var beta, a_m, a_r;
};

/// X^(0): replicate x [B,T,d] into n streams [B,T,n,d].
inline Var hc_expand(const Var& x, std::size_t n) {
  const auto& s = x.shape();
  if (s.size() != 3) throw DimensionError("hc_expand expects [B,T,d], got " + shape_str(s));
  return mul(reshape(x, {s[0], s[1], 1, s[2]}), Var::constant(Tensor({n, 1}, 1.0)));
}

inline HcWeights hc_static_weights(const HcParams& p) { return {p.beta, p.a_m, p.a_r}; }

/// X~ = Norm(X); B' = B + s_b tanh(X~ W_b); A_m' = A_m + s_a tanh(X~ W_m);
/// A_r' = A_r + s_a tanh(X~ W_r), one row per stream.
inline HcWeights hc_liquid_params(const HcParams& p, const Var& h) {
  if (!p.liquid) throw std::invalid_argument("hc_liquid_params: liquid parameters absent");
  const auto& s = h.shape();
  if (s.size() != 4 || s[2] != p.n) throw DimensionError("hyper-hidden state must be [B,T,n,d], got " + shape_str(s));
  const auto& lq = *p.liquid;
  const Var xn = layer_norm(h);
  const Shape per_stream{s[0], s[1], s[2]};
  HcWeights w;
  w.beta = add(p.beta, mul(lq.s_b, reshape(tanh(matmul(xn, lq.w_b)), per_stream)));
  w.a_m = add(p.a_m, mul(lq.s_a, reshape(tanh(matmul(xn, lq.w_m)), per_stream)));
  w.a_r = add(p.a_r, mul(lq.s_a, tanh(matmul(xn, lq.w_r))));
  return w;
}

inline HcWeights hc_weights(const HcParams& p, const Var& h) {
  return p.liquid ? hc_liquid_params(p, h) : hc_static_weights(p);
}

/// x0 = A_m^T H, [B,T,d].
inline Var hc_aggregate(const HcWeights& w, const Var& h) {
  const auto& s = h.shape();
  const std::size_t n = s[2];
  const Var am = w.a_m.shape().size() == 1 ? reshape(w.a_m, {1, n}) : reshape(w.a_m, {s[0], s[1], 1, n});
  return reshape(matmul(am, h), {s[0], s[1], s[3]});
}

/// H^ = B^T L + A_r^T H, [B,T,n,d].
inline Var hc_combine(const HcWeights& w, const Var& h, const Var& layer_out) {
  const auto& s = h.shape();
  const std::size_t n = s[2];
  if (layer_out.shape() != Shape{s[0], s[1], s[3]})
    throw DimensionError("hc_combine: layer output " + shape_str(layer_out.shape()) + " does not match state " +
                         shape_str(s));
  const Var b = w.beta.shape().size() == 1 ? reshape(w.beta, {n, 1}) : reshape(w.beta, {s[0], s[1], n, 1});
  const Var from_layer = matmul(b, reshape(layer_out, {s[0], s[1], 1, s[3]}));
  const Var mixed = matmul(transpose(w.a_r), h);
  return add(from_layer, mixed);
}

/// One hyper-connected sublayer application.
template <class Sublayer>
Var hc_block(const HcParams& p, const Var& h, Sublayer&& layer) {
  const HcWeights w = hc_weights(p, h);
  return hc_combine(w, h, layer(hc_aggregate(w, h)));
}

/// Sum the n streams, then layer-normalize: [B,T,n,d] -> [B,T,d].
inline Var hc_network_finalize(const Var& h, const LayerNorm& ln) { return ln(sum_axis(h, 2)); }

/// The (n+1)x(n+1) matrix [[0, B], [A_m, A_r]] for static weights.
inline Tensor hc_matrix(const HcParams& p) {
  const std::size_t n = p.n;
  Tensor m({n + 1, n + 1});
  auto d = m.mutable_data();
  for (std::size_t j = 0; j < n; ++j) d[j + 1] = p.beta.value()[j];
  for (std::size_t i = 0; i < n; ++i) {
    d[(i + 1) * (n + 1)] = p.a_m.value()[i];
    for (std::size_t j = 0; j < n; ++j) d[(i + 1) * (n + 1) + j + 1] = p.a_r.value()[i * n + j];
  }
  return m;
}

/// Width connections WC = (A_m A_r), n x (n+1).
inline Tensor hc_width_connections(const HcParams& p) {
  const std::size_t n = p.n;
  Tensor wc({n, n + 1});
  auto d = wc.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    d[i * (n + 1)] = p.a_m.value()[i];
    for (std::size_t j = 0; j < n; ++j) d[i * (n + 1) + j + 1] = p.a_r.value()[i * n + j];
  }
  return wc;
}

/// Depth connections DC = (B ; diag(A_r)), 2 x n.
inline Tensor hc_depth_connections(const HcParams& p) {
  const std::size_t n = p.n;
  Tensor dc({2, n});
  auto d = dc.mutable_data();
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = p.beta.value()[j];
    d[n + j] = p.a_r.value()[j * n + j];
  }
  return dc;
}

}  // namespace fluid
