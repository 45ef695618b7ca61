#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

// Plain-vector oracles. Nothing here calls into the tensor, autograd or
// attention code, so these can check that code independently.

namespace fluid::reference {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major list of rows

struct SdpaResult {
  Vec output;
  Vec weights;
};

/// Single-query scaled dot-product attention.
/// a_i = q.k_i / sqrt(d), alpha = softmax(a), output = sum_i alpha_i v_i.
inline SdpaResult sdpa_reference(const Vec& q, const Mat& keys, const Mat& values) {
  if (keys.empty() || keys.size() != values.size())
    throw std::invalid_argument("sdpa_reference: need as many values as keys, and at least one key");
  const std::size_t d = q.size();
  const std::size_t n = keys.size();
  Vec logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (keys[i].size() != d) throw std::invalid_argument("sdpa_reference: key width differs from query width");
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += q[c] * keys[i][c];
    logits[i] = dot / std::sqrt(static_cast<double>(d));
  }
  double mx = logits[0];
  for (double l : logits) mx = l > mx ? l : mx;
  SdpaResult r;
  r.weights.resize(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.weights[i] = std::exp(logits[i] - mx);
    z += r.weights[i];
  }
  for (double& w : r.weights) w /= z;
  const std::size_t dv = values[0].size();
  r.output.assign(dv, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (values[i].size() != dv) throw std::invalid_argument("sdpa_reference: ragged values");
    for (std::size_t c = 0; c < dv; ++c) r.output[c] += r.weights[i] * values[i][c];
  }
  return r;
}

/// tau dh/dt = -h + tanh(W u + b), one unit per row of W.
struct CtRnnCell {
  double tau = 1.0;
  Mat w;  // [units][inputs]
  Vec b;  // [units]

  void validate() const {
    if (!(tau > 0)) throw std::invalid_argument("CtRnnCell: tau must be positive");
    if (w.size() != b.size()) throw std::invalid_argument("CtRnnCell: W rows and b length differ");
  }

  /// Drive term tanh(W u + b): the products are summed in input order, then
  /// b is added.
  Vec drive(const Vec& u) const {
    Vec s(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i].size() != u.size()) throw std::invalid_argument("CtRnnCell: input width mismatch");
      double acc = 0.0;
      for (std::size_t c = 0; c < u.size(); ++c) acc += w[i][c] * u[c];
      s[i] = std::tanh(acc + b[i]);
    }
    return s;
  }
};

/// Explicit Euler for tau dh/dt = -h + tanh(W u_n + b) from h_0 = 0:
///   h_{n+1} = h_n + dt * (-(1/tau) h_n + (1/tau) s_n).
/// u_series holds one input per step; a single entry is held constant.
/// Returns n_steps + 1 states.
inline Mat ct_rnn_integrate(const CtRnnCell& cell, const Mat& u_series, double dt, std::size_t n_steps) {
  cell.validate();
  if (!(dt > 0)) throw std::invalid_argument("ct_rnn_integrate: dt must be positive");
  if (dt > cell.tau)
    throw std::invalid_argument("ct_rnn_integrate: dt (" + std::to_string(dt) + ") exceeds tau (" +
                                std::to_string(cell.tau) + ")");
  if (u_series.empty() || (u_series.size() != 1 && u_series.size() < n_steps))
    throw std::invalid_argument("ct_rnn_integrate: need one input or one per step");
  const double rate = 1.0 / cell.tau;
  Mat traj;
  traj.reserve(n_steps + 1);
  Vec h(cell.w.size(), 0.0);
  traj.push_back(h);
  for (std::size_t n = 0; n < n_steps; ++n) {
    const Vec s = cell.drive(u_series[u_series.size() == 1 ? 0 : n]);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = h[i] + dt * (-rate * h[i] + rate * s[i]);
    traj.push_back(h);
  }
  return traj;
}

/// h(t) = s (1 - exp(-t / tau)) for a constant drive s.
inline double ct_rnn_analytic(double s, double tau, double t) { return s * (1.0 - std::exp(-t / tau)); }

}  // namespace fluid::reference
