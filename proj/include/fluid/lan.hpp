#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fluid/nn.hpp"
#include "fluid/ops.hpp"
#include "fluid/sparse_curation.hpp"

// Liquid attention: every query-key pair carries a logit a that follows
//   da/dt = -f_tau * a + f_phi
// integrated with explicit Euler over a unit refinement horizon. The gates come
// from a GRU cell unrolled along the Euler steps on input [q ; k ; t_n].

namespace fluid {

enum class GateMode {
  learned,     // recurrent gate core
  sdpa_limit,  // f_tau = rate, f_phi = rate * q.k / sqrt(d)
  ct_rnn,      // f_tau = 1/tau, f_phi = tanh(w.[q;k] + b) / tau, no recurrence
};

struct LanConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t euler_steps = 5;
  std::optional<std::size_t> top_k;  // empty = full pairwise
  double epsilon = 1e-3;
  bool sink_gate = true;
  bool causal = false;
  double horizon = 1.0;  // dt_nominal = horizon / euler_steps
  bool clamp_dt = true;

  std::size_t head_dim() const { return d_model / heads; }
  double dt_nominal() const { return horizon / static_cast<double>(euler_steps); }

  void validate() const {
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                                  std::to_string(heads) + ")");
    if (euler_steps < 1) throw std::invalid_argument("euler_steps must be >= 1");
    if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
    if (!(horizon > 0)) throw std::invalid_argument("horizon must be positive");
    if (top_k && *top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  }
};

/// Gate parameters for H heads stacked on the leading axis. Gate blocks inside
/// the 3*Dh axis are ordered [reset | update | candidate].
struct GateCore {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  double epsilon = 1e-3;

  Var w_in_q;  // [H, Dh, 3Dh]  query half of u
  Var w_in_k;  // [H, Dh, 3Dh]  key half of u
  Var w_in_t;  // [H, 1, 3Dh]   time input
  Var b_in;    // [H, 1, 3Dh]
  Var w_hid;   // [H, Dh, 3Dh]
  Var b_hid;   // [H, 1, 3Dh]
  Var w_phi;   // [H, Dh, 1]
  Var b_phi;   // [H, 1, 1]
  Var w_tau;   // [H, Dh, 1]
  Var b_tau;   // [H, 1, 1]

  GateMode mode = GateMode::learned;
  double sdpa_rate = 1e3;
  double ct_tau = 1.0;
  Var ct_w;  // [H, 1, 2Dh]
  Var ct_b;  // [H, 1, 1]

  static GateCore init(std::size_t heads, std::size_t head_dim, double epsilon, Rng& rng) {
    GateCore g;
    g.heads = heads;
    g.head_dim = head_dim;
    g.epsilon = epsilon;
    const std::size_t G = 3 * head_dim;
    const std::size_t fan_in = 2 * head_dim + 1;
    g.w_in_q = init_param({heads, head_dim, G}, fan_in, rng);
    g.w_in_k = init_param({heads, head_dim, G}, fan_in, rng);
    g.w_in_t = init_param({heads, 1, G}, fan_in, rng);
    g.b_in = init_param({heads, 1, G}, fan_in, rng);
    g.w_hid = init_param({heads, head_dim, G}, head_dim, rng);
    g.b_hid = init_param({heads, 1, G}, head_dim, rng);
    g.w_phi = init_param({heads, head_dim, 1}, head_dim, rng);
    g.b_phi = init_param({heads, 1, 1}, head_dim, rng);
    g.w_tau = init_param({heads, head_dim, 1}, head_dim, rng);
    g.b_tau = init_param({heads, 1, 1}, head_dim, rng);
    g.ct_w = Var::parameter(Tensor({heads, 1, 2 * head_dim}));
    g.ct_b = Var::parameter(Tensor({heads, 1, 1}));
    return g;
  }

  /// Copy of head h as a single-head core (fresh leaves).
  GateCore head(std::size_t h) const {
    GateCore g = *this;
    g.heads = 1;
    auto pick = [h](const Var& v) {
      Shape s = v.shape();
      const std::size_t per = v.value().size() / s[0];
      s[0] = 1;
      auto d = v.value().data();
      return Var::parameter(Tensor(s, d.subspan(h * per, per)));
    };
    g.w_in_q = pick(w_in_q);
    g.w_in_k = pick(w_in_k);
    g.w_in_t = pick(w_in_t);
    g.b_in = pick(b_in);
    g.w_hid = pick(w_hid);
    g.b_hid = pick(b_hid);
    g.w_phi = pick(w_phi);
    g.b_phi = pick(b_phi);
    g.w_tau = pick(w_tau);
    g.b_tau = pick(b_tau);
    g.ct_w = pick(ct_w);
    g.ct_b = pick(ct_b);
    return g;
  }

  /// Parameters the current mode actually reads.
  ParamList parameters() const {
    switch (mode) {
      case GateMode::learned:
        return {{"w_in_q", w_in_q}, {"w_in_k", w_in_k}, {"w_in_t", w_in_t}, {"b_in", b_in},
                {"w_hid", w_hid},   {"b_hid", b_hid},   {"w_phi", w_phi},   {"b_phi", b_phi},
                {"w_tau", w_tau},   {"b_tau", b_tau}};
      case GateMode::ct_rnn:
        return {{"ct_w", ct_w}, {"ct_b", ct_b}};
      case GateMode::sdpa_limit:
        break;
    }
    return {};
  }

  /// Every tensor, regardless of mode (checkpointing).
  ParamList all_tensors() const {
    return {{"w_in_q", w_in_q}, {"w_in_k", w_in_k}, {"w_in_t", w_in_t}, {"b_in", b_in}, {"w_hid", w_hid},
            {"b_hid", b_hid},   {"w_phi", w_phi},   {"b_phi", b_phi},   {"w_tau", w_tau}, {"b_tau", b_tau},
            {"ct_w", ct_w},     {"ct_b", ct_b}};
  }
};

// ---------------------------------------------------------------------------
// Gate evaluation
// ---------------------------------------------------------------------------

struct GateOutput {
  Var f_tau;   // [..., 1]
  Var f_phi;   // [..., 1]
  Var hidden;  // [..., Dh]
};

/// One gate step on materialized pair inputs u [B,H,P,2Dh] with hidden
/// [B,H,P,Dh] (zeros at step 0). Built from generic ops; the attention path
/// uses the fused pair_gru_step kernel, which computes the same values.
inline GateOutput gate_forward(const GateCore& core, const Var& u, double t_n, const Var& hidden) {
  const std::size_t D = core.head_dim;
  if (u.shape().size() != 4 || u.shape()[3] != 2 * D)
    throw DimensionError("gate_forward expects u of shape [B,H,P,2Dh], got " + shape_str(u.shape()));
  const Var uq = slice(u, 3, 0, D);
  const Var uk = slice(u, 3, D, D);
  const Var gi = add(add(add(matmul(uq, core.w_in_q), matmul(uk, core.w_in_k)), mul_scalar(core.w_in_t, t_n)),
                     core.b_in);
  const Var gh = add(matmul(hidden, core.w_hid), core.b_hid);
  const Var r = sigmoid(add(slice(gi, 3, 0, D), slice(gh, 3, 0, D)));
  const Var z = sigmoid(add(slice(gi, 3, D, D), slice(gh, 3, D, D)));
  const Var n = tanh(add(slice(gi, 3, 2 * D, D), mul(r, slice(gh, 3, 2 * D, D))));
  const Var h_next = add(mul(add_scalar(neg(z), 1.0), n), mul(z, hidden));
  GateOutput out;
  out.hidden = h_next;
  out.f_phi = tanh(add(matmul(h_next, core.w_phi), core.b_phi));
  out.f_tau = add_scalar(softplus(add(matmul(h_next, core.w_tau), core.b_tau)), core.epsilon);
  return out;
}

namespace detail {

inline double sigm(double x) { return stable_sigmoid(x); }

}  // namespace detail

/// Fused GRU step over all selected pairs without materializing u.
///   xq [B,H,T_q,3Dh] = q W_in_q,  xk [B,H,T_k,3Dh] = k W_in_k
///   hidden [B,H,T_q,K_eff,Dh] or undefined for the zero state.
/// Invalid (padding) pairs produce a zero hidden state.
inline Var pair_gru_step(const GateCore& core, const Var& xq, const Var& xk, const std::shared_ptr<const PairSelection>& selp,
                         double t_n, const Var& hidden) {
  const PairSelection& sel = *selp;
  const std::size_t D = core.head_dim;
  const std::size_t G = 3 * D;
  const std::size_t B = sel.batch, H = sel.heads, Tq = sel.t_q, Tk = sel.t_k, K = sel.k_eff;
  const Shape hs{B, H, Tq, K, D};
  if (xq.shape() != Shape{B, H, Tq, G} || xk.shape() != Shape{B, H, Tk, G})
    throw DimensionError("pair_gru_step: projected inputs " + shape_str(xq.shape()) + " / " + shape_str(xk.shape()) +
                         " do not match selection " + shape_str(sel.shape()));
  if (hidden.defined() && hidden.shape() != hs)
    throw DimensionError("pair_gru_step: hidden " + shape_str(hidden.shape()) + " expected " + shape_str(hs));

  const std::size_t P = sel.pairs();
  Tensor out(hs);
  const bool keep = grad_enabled();
  auto cache = std::make_shared<Tensor>(keep ? Tensor(Shape{P, 4 * D}) : Tensor());
  {
    auto o = out.mutable_data();
    auto q = xq.value().data();
    auto k = xk.value().data();
    auto wt = core.w_in_t.value().data();
    auto bi = core.b_in.value().data();
    auto wh = core.w_hid.value().data();
    auto bh = core.b_hid.value().data();
    const double* hv = hidden.defined() ? hidden.value().data().data() : nullptr;
    double* cv = keep ? cache->mutable_data().data() : nullptr;
    std::vector<double> gi(G), gh(G);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const std::size_t row = sel.row(b, h, i);
          const double* qrow = q.data() + ((b * H + h) * Tq + i) * G;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t p = row + j;
            if (!sel.valid[p]) continue;
            const double* krow = k.data() + ((b * H + h) * Tk + static_cast<std::size_t>(sel.indices[p])) * G;
            for (std::size_t g = 0; g < G; ++g) gi[g] = ((qrow[g] + krow[g]) + wt[h * G + g] * t_n) + bi[h * G + g];
            std::fill(gh.begin(), gh.end(), 0.0);
            const double* hp = hv ? hv + p * D : nullptr;
            if (hp) {
              const double* w = wh.data() + h * D * G;
              for (std::size_t c = 0; c < D; ++c) {
                const double hc = hp[c];
                for (std::size_t g = 0; g < G; ++g) gh[g] += hc * w[c * G + g];
              }
            }
            for (std::size_t g = 0; g < G; ++g) gh[g] += bh[h * G + g];
            double* op = o.data() + p * D;
            for (std::size_t c = 0; c < D; ++c) {
              const double r = detail::sigm(gi[c] + gh[c]);
              const double z = detail::sigm(gi[D + c] + gh[D + c]);
              const double n = std::tanh(gi[2 * D + c] + r * gh[2 * D + c]);
              const double hprev = hp ? hp[c] : 0.0;
              op[c] = (-z + 1.0) * n + z * hprev;
              if (cv) {
                double* cp = cv + p * 4 * D;
                cp[c] = r;
                cp[D + c] = z;
                cp[2 * D + c] = n;
                cp[3 * D + c] = gh[2 * D + c];
              }
            }
          }
        }
  }

  std::vector<Var> parents{xq, xk, core.w_in_t, core.b_in, core.w_hid, core.b_hid};
  if (hidden.defined()) parents.push_back(hidden);
  const Var w_hid = core.w_hid;
  return make_result(std::move(out), parents, [=, sel = selp](const Tensor& grad) {
    Tensor gq(xq.shape()), gk(xk.shape()), gwt(core.w_in_t.shape()), gbi(core.b_in.shape()),
        gwh(core.w_hid.shape()), gbh(core.b_hid.shape());
    Tensor ghid = hidden.defined() ? Tensor(hs) : Tensor();
    auto dq = gq.mutable_data();
    auto dk = gk.mutable_data();
    auto dwt = gwt.mutable_data();
    auto dbi = gbi.mutable_data();
    auto dwh = gwh.mutable_data();
    auto dbh = gbh.mutable_data();
    auto gs = grad.data();
    auto cv = cache->data();
    auto wh = w_hid.value().data();
    const double* hv = hidden.defined() ? hidden.value().data().data() : nullptr;
    double* dh = hidden.defined() ? ghid.mutable_data().data() : nullptr;
    std::vector<double> dgi(G), dgh(G);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const std::size_t row = sel->row(b, h, i);
          double* dqrow = dq.data() + ((b * H + h) * Tq + i) * G;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t p = row + j;
            if (!sel->valid[p]) continue;
            double* dkrow = dk.data() + ((b * H + h) * Tk + static_cast<std::size_t>(sel->indices[p])) * G;
            const double* cp = cv.data() + p * 4 * D;
            const double* hp = hv ? hv + p * D : nullptr;
            const double* go = gs.data() + p * D;
            for (std::size_t c = 0; c < D; ++c) {
              const double r = cp[c], z = cp[D + c], n = cp[2 * D + c], ghn = cp[3 * D + c];
              const double hprev = hp ? hp[c] : 0.0;
              const double dn = go[c] * (1.0 - z);
              const double dz = go[c] * (hprev - n);
              const double dpre_n = dn * (1.0 - n * n);
              const double dr = dpre_n * ghn;
              const double dpre_r = dr * r * (1.0 - r);
              const double dpre_z = dz * z * (1.0 - z);
              dgi[c] = dpre_r;
              dgi[D + c] = dpre_z;
              dgi[2 * D + c] = dpre_n;
              dgh[c] = dpre_r;
              dgh[D + c] = dpre_z;
              dgh[2 * D + c] = dpre_n * r;
              if (dh) dh[p * D + c] += go[c] * z;
            }
            for (std::size_t g = 0; g < G; ++g) {
              dqrow[g] += dgi[g];
              dkrow[g] += dgi[g];
              dwt[h * G + g] += dgi[g] * t_n;
              dbi[h * G + g] += dgi[g];
              dbh[h * G + g] += dgh[g];
            }
            if (hp) {
              const double* w = wh.data() + h * D * G;
              double* dw = dwh.data() + h * D * G;
              for (std::size_t c = 0; c < D; ++c) {
                double s = 0.0;
                for (std::size_t g = 0; g < G; ++g) {
                  s += dgh[g] * w[c * G + g];
                  dw[c * G + g] += hp[c] * dgh[g];
                }
                dh[p * D + c] += s;
              }
            }
          }
        }
    std::vector<Tensor> res{gq, gk, gwt, gbi, gwh, gbh};
    if (hidden.defined()) res.push_back(ghid);
    return res;
  });
}

/// Raw dot products q_i . k_idx per selected pair, [B,H,T_q,K_eff]; 0 on padding.
inline Var pair_scores(const Var& q, const Var& k, const std::shared_ptr<const PairSelection>& selp) {
  const PairSelection& sel = *selp;
  const std::size_t D = q.shape()[3];
  const std::size_t H = sel.heads, Tq = sel.t_q, Tk = sel.t_k, K = sel.k_eff;
  Tensor out(sel.shape());
  auto o = out.mutable_data();
  auto qd = q.value().data();
  auto kd = k.value().data();
  for (std::size_t b = 0; b < sel.batch; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const std::size_t row = sel.row(b, h, i);
        const double* qi = qd.data() + ((b * H + h) * Tq + i) * D;
        for (std::size_t j = 0; j < K; ++j) {
          if (!sel.valid[row + j]) continue;
          const double* kj = kd.data() + ((b * H + h) * Tk + static_cast<std::size_t>(sel.indices[row + j])) * D;
          double s = 0.0;
          for (std::size_t c = 0; c < D; ++c) s += qi[c] * kj[c];
          o[row + j] = s;
        }
      }
  return make_result(std::move(out), {q, k}, [q, k, sel = selp, D](const Tensor& g) {
    Tensor gq(q.shape()), gk(k.shape());
    auto dq = gq.mutable_data();
    auto dk = gk.mutable_data();
    auto qd = q.value().data();
    auto kd = k.value().data();
    auto gs = g.data();
    const std::size_t H = sel->heads, Tq = sel->t_q, Tk = sel->t_k, K = sel->k_eff;
    for (std::size_t b = 0; b < sel->batch; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const std::size_t row = sel->row(b, h, i);
          const std::size_t qo = ((b * H + h) * Tq + i) * D;
          for (std::size_t j = 0; j < K; ++j) {
            if (!sel->valid[row + j]) continue;
            const std::size_t ko = ((b * H + h) * Tk + static_cast<std::size_t>(sel->indices[row + j])) * D;
            for (std::size_t c = 0; c < D; ++c) {
              dq[qo + c] += gs[row + j] * kd[ko + c];
              dk[ko + c] += gs[row + j] * qd[qo + c];
            }
          }
        }
    return std::vector<Tensor>{gq, gk};
  });
}

/// w . [q_i ; k_idx] + b per selected pair with w [H,1,2Dh], b [H,1,1].
/// Accumulates left to right over the concatenated input, then adds b.
inline Var pair_affine(const Var& q, const Var& k, const std::shared_ptr<const PairSelection>& selp, const Var& w,
                       const Var& bias) {
  const PairSelection& sel = *selp;
  const std::size_t D = q.shape()[3];
  const std::size_t H = sel.heads, Tq = sel.t_q, Tk = sel.t_k, K = sel.k_eff;
  if (w.value().size() != H * 2 * D || bias.value().size() != H)
    throw DimensionError("pair_affine weight/bias sizes do not match heads and head_dim");
  Tensor out(sel.shape());
  auto o = out.mutable_data();
  auto qd = q.value().data();
  auto kd = k.value().data();
  auto wd = w.value().data();
  auto bd = bias.value().data();
  for (std::size_t b = 0; b < sel.batch; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const std::size_t row = sel.row(b, h, i);
        const double* qi = qd.data() + ((b * H + h) * Tq + i) * D;
        const double* wh = wd.data() + h * 2 * D;
        for (std::size_t j = 0; j < K; ++j) {
          if (!sel.valid[row + j]) continue;
          const double* kj = kd.data() + ((b * H + h) * Tk + static_cast<std::size_t>(sel.indices[row + j])) * D;
          double s = 0.0;
          for (std::size_t c = 0; c < D; ++c) s += wh[c] * qi[c];
          for (std::size_t c = 0; c < D; ++c) s += wh[D + c] * kj[c];
          o[row + j] = s + bd[h];
        }
      }
  return make_result(std::move(out), {q, k, w, bias}, [q, k, w, bias, sel = selp, D](const Tensor& g) {
    Tensor gq(q.shape()), gk(k.shape()), gw(w.shape()), gb(bias.shape());
    auto dq = gq.mutable_data();
    auto dk = gk.mutable_data();
    auto dw = gw.mutable_data();
    auto db = gb.mutable_data();
    auto qd = q.value().data();
    auto kd = k.value().data();
    auto wd = w.value().data();
    auto gs = g.data();
    const std::size_t H = sel->heads, Tq = sel->t_q, Tk = sel->t_k, K = sel->k_eff;
    for (std::size_t b = 0; b < sel->batch; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const std::size_t row = sel->row(b, h, i);
          const std::size_t qo = ((b * H + h) * Tq + i) * D;
          for (std::size_t j = 0; j < K; ++j) {
            if (!sel->valid[row + j]) continue;
            const std::size_t ko = ((b * H + h) * Tk + static_cast<std::size_t>(sel->indices[row + j])) * D;
            const double gv = gs[row + j];
            for (std::size_t c = 0; c < D; ++c) {
              dq[qo + c] += gv * wd[h * 2 * D + c];
              dk[ko + c] += gv * wd[h * 2 * D + D + c];
              dw[h * 2 * D + c] += gv * qd[qo + c];
              dw[h * 2 * D + D + c] += gv * kd[ko + c];
            }
            db[h] += gv;
          }
        }
    return std::vector<Tensor>{gq, gk, gw, gb};
  });
}

/// out_i = sum_j alpha_ij v_idx(j) over valid pairs; alpha [B,H,T_q,K_eff],
/// v [B,H,T_k,Dv] -> [B,H,T_q,Dv].
inline Var attend_values(const Var& alpha, const Var& v, const std::shared_ptr<const PairSelection>& selp) {
  const PairSelection& sel = *selp;
  const std::size_t Dv = v.shape()[3];
  const std::size_t H = sel.heads, Tq = sel.t_q, Tk = sel.t_k, K = sel.k_eff;
  Tensor out({sel.batch, H, Tq, Dv});
  auto o = out.mutable_data();
  auto ad = alpha.value().data();
  auto vd = v.value().data();
  for (std::size_t b = 0; b < sel.batch; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const std::size_t row = sel.row(b, h, i);
        double* oi = o.data() + ((b * H + h) * Tq + i) * Dv;
        for (std::size_t j = 0; j < K; ++j) {
          if (!sel.valid[row + j]) continue;
          const double* vj = vd.data() + ((b * H + h) * Tk + static_cast<std::size_t>(sel.indices[row + j])) * Dv;
          const double a = ad[row + j];
          for (std::size_t c = 0; c < Dv; ++c) oi[c] += a * vj[c];
        }
      }
  return make_result(std::move(out), {alpha, v}, [alpha, v, sel = selp, Dv](const Tensor& g) {
    Tensor ga(alpha.shape()), gv(v.shape());
    auto da = ga.mutable_data();
    auto dv = gv.mutable_data();
    auto ad = alpha.value().data();
    auto vd = v.value().data();
    auto gs = g.data();
    const std::size_t H = sel->heads, Tq = sel->t_q, Tk = sel->t_k, K = sel->k_eff;
    for (std::size_t b = 0; b < sel->batch; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const std::size_t row = sel->row(b, h, i);
          const double* gi = gs.data() + ((b * H + h) * Tq + i) * Dv;
          for (std::size_t j = 0; j < K; ++j) {
            if (!sel->valid[row + j]) continue;
            const std::size_t vo = ((b * H + h) * Tk + static_cast<std::size_t>(sel->indices[row + j])) * Dv;
            double s = 0.0;
            for (std::size_t c = 0; c < Dv; ++c) {
              s += gi[c] * vd[vo + c];
              dv[vo + c] += ad[row + j] * gi[c];
            }
            da[row + j] = s;
          }
        }
    return std::vector<Tensor>{ga, gv};
  });
}

// ---------------------------------------------------------------------------
// Euler integration and step-size control
// ---------------------------------------------------------------------------

/// a_{n+1} = a_n + dt * (-f_tau * a_n + f_phi), elementwise.
inline Tensor euler_step(const Tensor& a, const Tensor& f_tau, const Tensor& f_phi, double dt) {
  if (!(dt > 0)) throw std::invalid_argument("euler_step requires dt > 0");
  if (a.shape() != f_tau.shape() || a.shape() != f_phi.shape())
    throw DimensionError("euler_step shape mismatch: " + shape_str(a.shape()) + ", " + shape_str(f_tau.shape()) +
                         ", " + shape_str(f_phi.shape()));
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  auto ft = f_tau.data();
  auto fp = f_phi.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + dt * (-ft[i] * av[i] + fp[i]);
  return out;
}

/// Differentiable Euler step. dt is a constant of the graph.
inline Var euler_step(const Var& a, const Var& f_tau, const Var& f_phi, double dt) {
  Tensor out = euler_step(a.value(), f_tau.value(), f_phi.value(), dt);
  return make_result(std::move(out), {a, f_tau, f_phi}, [a, f_tau, dt](const Tensor& g) {
    Tensor ga(g.shape()), gt(g.shape()), gp(g.shape());
    auto da = ga.mutable_data();
    auto dt_ = gt.mutable_data();
    auto dp = gp.mutable_data();
    auto gs = g.data();
    auto av = a.value().data();
    auto ft = f_tau.value().data();
    for (std::size_t i = 0; i < gs.size(); ++i) {
      da[i] = gs[i] * (1.0 - dt * ft[i]);
      dt_[i] = -gs[i] * dt * av[i];
      dp[i] = gs[i] * dt;
    }
    return std::vector<Tensor>{ga, gt, gp};
  });
}

/// min(dt_nominal, 1 / max f_tau) over the entries selected by `valid`
/// (all entries when null), so that dt * f_tau <= 1 everywhere.
inline double clamp_dt(double dt_nominal, const Tensor& f_tau, const std::vector<std::uint8_t>* valid = nullptr) {
  if (!(dt_nominal > 0)) throw std::invalid_argument("clamp_dt requires dt_nominal > 0");
  if (valid && valid->size() != f_tau.size()) throw DimensionError("clamp_dt mask size mismatch");
  double m = 0.0;
  auto v = f_tau.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (valid && !(*valid)[i]) continue;
    if (!(v[i] > 0))
      throw std::invalid_argument("clamp_dt: f_tau must be positive, found " + std::to_string(v[i]) + " at " +
                                  std::to_string(i));
    m = std::max(m, v[i]);
  }
  if (m == 0.0) return dt_nominal;
  return std::min(dt_nominal, 1.0 / m);
}

// ---------------------------------------------------------------------------
// Attention over one stack of heads
// ---------------------------------------------------------------------------

/// Logit states and gate traces. a is [B,H,T_q,K_eff,N+1]; gates are
/// [B,H,T_q,K_eff,N].
struct LogitTrajectory {
  Tensor a;
  Tensor f_tau;
  Tensor f_phi;
  std::vector<double> dt_effective;
  PairSelection selection;

  std::size_t steps() const { return dt_effective.size(); }

  /// CSV with columns step,pair_id,a,f_tau,f_phi; gate columns are empty on
  /// the final state row. Padding pairs are skipped.
  void write_csv(std::ostream& os) const {
    os << "step,pair_id,a,f_tau,f_phi\n";
    const std::size_t N = steps();
    const std::size_t P = selection.pairs();
    os.precision(17);
    for (std::size_t n = 0; n <= N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        if (!selection.valid[p]) continue;
        os << n << ',' << p << ',' << a[p * (N + 1) + n] << ',';
        if (n < N) os << f_tau[p * N + n] << ',' << f_phi[p * N + n];
        else os << ',';
        os << '\n';
      }
  }
};

struct LanHeadResult {
  Var output;   // [B,H,T_q,Dh]
  Var weights;  // [B,H,T_q,K_eff]
  std::shared_ptr<const PairSelection> selection;
  std::optional<LogitTrajectory> trajectory;
};

namespace detail {

inline Tensor stack_last(const std::vector<Tensor>& steps) {
  Shape s = steps.front().shape();
  const std::size_t n = steps.size();
  const std::size_t m = steps.front().size();
  s.push_back(n);
  Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < n; ++k) {
    auto v = steps[k].data();
    for (std::size_t i = 0; i < m; ++i) o[i * n + k] = v[i];
  }
  return out;
}

}  // namespace detail

/// Runs the logit ODE for every selected pair and aggregates values.
/// q [B,H,T_q,Dh], k and v [B,H,T_k,Dh]. key_mask is [B,T_k] (nonzero = real).
inline LanHeadResult lan_head_forward(const Var& q, const Var& k, const Var& v, const GateCore& core,
                                      const LanConfig& cfg, const std::vector<std::uint8_t>* key_mask = nullptr,
                                      bool record = false) {
  cfg.validate();
  if (q.shape().size() != 4 || k.shape().size() != 4 || v.shape().size() != 4)
    throw DimensionError("lan_head_forward expects [B,H,T,D] inputs");
  if (k.shape() != v.shape()) throw DimensionError("key/value shapes differ");
  if (q.shape()[1] != core.heads || q.shape()[3] != core.head_dim)
    throw DimensionError("gate core (H=" + std::to_string(core.heads) + ", Dh=" + std::to_string(core.head_dim) +
                         ") does not match q " + shape_str(q.shape()));

  auto sel = std::make_shared<const PairSelection>(
      select_pairs(q.value(), k.value(), cfg.top_k, cfg.causal, key_mask));
  const Shape ps = sel->shape();
  const std::size_t B = sel->batch, H = sel->heads, Tq = sel->t_q, K = sel->k_eff, D = core.head_dim;
  const double dt_nom = cfg.dt_nominal();

  std::vector<Tensor> a_steps, tau_steps, phi_steps;
  std::vector<double> dts;
  Var a = Var::constant(Tensor(ps));
  if (record) a_steps.push_back(a.value());

  // Pieces that are constant along the refinement axis.
  Var xq, xk, frozen_tau, frozen_phi;
  switch (core.mode) {
    case GateMode::learned:
      xq = matmul(q, core.w_in_q);
      xk = matmul(k, core.w_in_k);
      break;
    case GateMode::sdpa_limit: {
      const double rate = core.sdpa_rate;
      frozen_tau = Var::constant(Tensor(ps, rate));
      frozen_phi = mul_scalar(pair_scores(q, k, sel), rate / std::sqrt(static_cast<double>(D)));
      break;
    }
    case GateMode::ct_rnn: {
      const double rate = 1.0 / core.ct_tau;
      frozen_tau = Var::constant(Tensor(ps, rate));
      frozen_phi = mul_scalar(tanh(pair_affine(q, k, sel, core.ct_w, core.ct_b)), rate);
      break;
    }
  }

  Var hidden;
  for (std::size_t n = 0; n < cfg.euler_steps; ++n) {
    const double t_n = static_cast<double>(n) * dt_nom;
    Var f_tau, f_phi;
    if (core.mode == GateMode::learned) {
      hidden = pair_gru_step(core, xq, xk, sel, t_n, hidden);
      const Var flat = reshape(hidden, {B, H, Tq * K, D});
      f_phi = reshape(tanh(add(matmul(flat, core.w_phi), core.b_phi)), ps);
      f_tau = reshape(add_scalar(softplus(add(matmul(flat, core.w_tau), core.b_tau)), core.epsilon), ps);
    } else {
      f_tau = frozen_tau;
      f_phi = frozen_phi;
    }
    const double dt = cfg.clamp_dt ? clamp_dt(dt_nom, f_tau.value(), &sel->valid) : dt_nom;
    a = euler_step(a, f_tau, f_phi, dt);
    if (record) {
      a_steps.push_back(a.value());
      tau_steps.push_back(f_tau.value());
      phi_steps.push_back(f_phi.value());
    }
    dts.push_back(dt);
  }

  LanHeadResult res;
  res.weights = softmax(a, 3, &sel->valid);
  res.output = attend_values(res.weights, v, sel);
  res.selection = sel;
  if (record) {
    LogitTrajectory tr;
    tr.a = detail::stack_last(a_steps);
    tr.f_tau = detail::stack_last(tau_steps);
    tr.f_phi = detail::stack_last(phi_steps);
    tr.dt_effective = dts;
    tr.selection = *sel;
    res.trajectory = std::move(tr);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Multi-head assembly and the attention-sink gate
// ---------------------------------------------------------------------------

/// O = sigmoid(x W_s + b_s) * (heads W_g + b_g).
inline Var sink_gate(const Var& x, const Var& heads, const Var& w_g, const Var& b_g, const Var& w_s, const Var& b_s) {
  return mul(sigmoid(add(matmul(x, w_s), b_s)), add(matmul(heads, w_g), b_g));
}

struct MultiHeadLanParams {
  Linear q_proj, k_proj, v_proj;
  GateCore gates;
  Linear out_proj;   // W_g, b_g
  Linear sink_proj;  // W_s, b_s

  static MultiHeadLanParams init(const LanConfig& cfg, Rng& rng) {
    cfg.validate();
    MultiHeadLanParams p;
    p.q_proj = Linear::init(cfg.d_model, cfg.d_model, rng);
    p.k_proj = Linear::init(cfg.d_model, cfg.d_model, rng);
    p.v_proj = Linear::init(cfg.d_model, cfg.d_model, rng);
    p.gates = GateCore::init(cfg.heads, cfg.head_dim(), cfg.epsilon, rng);
    p.out_proj = Linear::init(cfg.d_model, cfg.d_model, rng);
    p.sink_proj = {const_param({cfg.d_model, cfg.d_model}, 0.0), const_param({cfg.d_model}, 0.0)};
    return p;
  }

  ParamList parameters(bool with_sink) const {
    ParamList p;
    append(p, "q_proj.", q_proj.parameters());
    append(p, "k_proj.", k_proj.parameters());
    append(p, "v_proj.", v_proj.parameters());
    append(p, "gates.", gates.parameters());
    append(p, "out_proj.", out_proj.parameters());
    if (with_sink) append(p, "sink_proj.", sink_proj.parameters());
    return p;
  }
};

/// Optional capture of what an attention call did.
struct AttentionProbe {
  Tensor weights;  // [B,H,T_q,K_eff]
  std::shared_ptr<const PairSelection> selection;
  std::optional<LogitTrajectory> trajectory;
  bool record_trajectory = false;

  /// Mean over batch, heads and queries of the weight placed on key `key`.
  double mass_on_key(std::size_t key) const {
    const auto& s = *selection;
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t r = 0; r < s.batch * s.heads * s.t_q; ++r) {
      for (std::size_t j = 0; j < s.k_eff; ++j) {
        const std::size_t p = r * s.k_eff + j;
        if (s.valid[p] && static_cast<std::size_t>(s.indices[p]) == key) total += weights[p];
      }
      ++rows;
    }
    return rows ? total / static_cast<double>(rows) : 0.0;
  }
};

/// [B,T,d_model] -> [B,H,T,Dh]
inline Var split_heads(const Var& x, std::size_t heads) {
  const auto& s = x.shape();
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

/// [B,H,T,Dh] -> [B,T,H*Dh]
inline Var merge_heads(const Var& x) {
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

inline Var multi_head_lan(const Var& x_q, const Var& x_k, const Var& x_v, const MultiHeadLanParams& p,
                          const LanConfig& cfg, const std::vector<std::uint8_t>* key_mask = nullptr,
                          AttentionProbe* probe = nullptr) {
  cfg.validate();
  for (const Var* x : {&x_q, &x_k, &x_v})
    if (x->shape().size() != 3 || x->shape()[2] != cfg.d_model)
      throw DimensionError("multi_head_lan expects [B,T," + std::to_string(cfg.d_model) + "] inputs, got " +
                           shape_str(x->shape()));
  const Var q = split_heads(p.q_proj(x_q), cfg.heads);
  const Var k = split_heads(p.k_proj(x_k), cfg.heads);
  const Var v = split_heads(p.v_proj(x_v), cfg.heads);
  auto res = lan_head_forward(q, k, v, p.gates, cfg, key_mask, probe && probe->record_trajectory);
  if (probe) {
    probe->weights = res.weights.value();
    probe->selection = res.selection;
    probe->trajectory = std::move(res.trajectory);
  }
  const Var heads = merge_heads(res.output);
  if (cfg.sink_gate)
    return sink_gate(x_q, heads, p.out_proj.weight, p.out_proj.bias, p.sink_proj.weight, p.sink_proj.bias);
  return p.out_proj(heads);
}

}  // namespace fluid
