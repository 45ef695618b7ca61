#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/baselines.hpp"
#include "fluid/lan.hpp"

namespace fluid {

struct VerifyReport {
  std::string name;
  std::size_t battery_size = 0;
  double max_gap = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  nlohmann::json details = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j{{"suite", name}, {"battery_size", battery_size}, {"max_gap", max_gap},
                     {"tolerance", tolerance}, {"pass", pass}};
    if (!details.empty()) j["details"] = details;
    return j;
  }
};

namespace detail {

inline Tensor uniform(const Shape& s, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (double& v : t.mutable_data()) v = d(rng);
  return t;
}

inline std::size_t pick(std::size_t lo, std::size_t hi, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline reference::Vec row(const Tensor& t, std::size_t offset, std::size_t n) {
  auto d = t.data();
  return {d.begin() + static_cast<std::ptrdiff_t>(offset), d.begin() + static_cast<std::ptrdiff_t>(offset + n)};
}

}  // namespace detail

/// Random bounded gates f_tau in [0.1, 5], f_phi in [-1, 1], fresh at every
/// step, integrated in batches with the global clamp. Each trajectory starts
/// inside [A_min, A_max] = [min f_phi/f_tau, max f_phi/f_tau] over its own
/// gate sequence; any departure beyond 1e-12 counts as an excursion.
inline VerifyReport forward_invariance_suite(std::size_t n_traj = 10000, std::size_t steps = 20,
                                             std::uint64_t seed = 1, std::size_t batch = 100) {
  Rng rng(seed);
  VerifyReport r{"forward_invariance", n_traj, 0.0, 1e-12, false, {}};
  std::size_t excursions = 0;
  double max_alpha = 0.0;
  for (std::size_t start = 0; start < n_traj; start += batch) {
    const std::size_t m = std::min(batch, n_traj - start);
    std::vector<Tensor> tau, phi;
    for (std::size_t n = 0; n < steps; ++n) {
      tau.push_back(detail::uniform({m}, 0.1, 5.0, rng));
      phi.push_back(detail::uniform({m}, -1.0, 1.0, rng));
    }
    std::vector<double> lo(m, INFINITY), hi(m, -INFINITY);
    for (std::size_t n = 0; n < steps; ++n)
      for (std::size_t i = 0; i < m; ++i) {
        const double eq = phi[n][i] / tau[n][i];
        lo[i] = std::min(lo[i], eq);
        hi[i] = std::max(hi[i], eq);
      }
    Tensor a({m});
    {
      auto av = a.mutable_data();
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      for (std::size_t i = 0; i < m; ++i) av[i] = lo[i] + (hi[i] - lo[i]) * u01(rng);
    }
    for (std::size_t n = 0; n < steps; ++n) {
      const double dt = clamp_dt(1.0, tau[n]);
      for (std::size_t i = 0; i < m; ++i) max_alpha = std::max(max_alpha, dt * tau[n][i]);
      a = euler_step(a, tau[n], phi[n], dt);
      for (std::size_t i = 0; i < m; ++i) {
        const double ex = std::max({0.0, a[i] - hi[i], lo[i] - a[i]});
        r.max_gap = std::max(r.max_gap, ex);
        if (ex > r.tolerance) ++excursions;
      }
    }
  }
  r.pass = excursions == 0;
  r.details = {{"steps", steps}, {"excursions", excursions}, {"max_alpha", max_alpha}};
  return r;
}

/// Clamped steps keep alpha_n = dt f_tau in [0, 1]; an unclamped constant
/// alpha = 2.5 from a_0 = 1 must blow up by at least 10x in 50 steps.
inline VerifyReport euler_stability_suite(std::size_t n_traj = 1000, std::uint64_t seed = 2) {
  Rng rng(seed);
  VerifyReport r{"euler_stability", n_traj, 0.0, 0.0, false, {}};
  double min_alpha = INFINITY, max_alpha = -INFINITY;
  for (std::size_t trial = 0; trial < n_traj; ++trial) {
    const std::size_t m = detail::pick(1, 64, rng);
    const Tensor tau = detail::uniform({m}, 1e-3, 50.0, rng);
    const double dt_nom = std::uniform_real_distribution<double>(1e-3, 2.0)(rng);
    const double dt = clamp_dt(dt_nom, tau);
    for (std::size_t i = 0; i < m; ++i) {
      const double alpha = dt * tau[i];
      min_alpha = std::min(min_alpha, alpha);
      max_alpha = std::max(max_alpha, alpha);
      r.max_gap = std::max({r.max_gap, alpha - 1.0, -alpha});
    }
  }
  // Unclamped witness.
  const double f_tau = 1.0;
  const double dt = 2.5 / f_tau;
  Tensor a({1}, 1.0);
  const Tensor ft({1}, f_tau), fp({1}, 0.0);
  for (int n = 0; n < 50; ++n) a = euler_step(a, ft, fp, dt);
  const double growth = std::abs(a[0]);
  r.pass = r.max_gap <= r.tolerance && growth >= 10.0;
  r.details = {{"min_alpha", min_alpha}, {"max_alpha", max_alpha}, {"unclamped_growth", growth},
               {"unclamped_dt_f_tau", dt * f_tau}};
  return r;
}

struct LimitBattery {
  std::size_t battery_size = 100;
  std::uint64_t seed = 3;
  double tolerance = 1e-6;
  GateMode mode = GateMode::sdpa_limit;  // learned gates give the non-vacuity check
};

/// Frozen-gate LAN (N = 1, a_0 = 0, f_phi / f_tau = q.k/sqrt(d), dt = 1/f_tau)
/// against the straight-line SDPA reference on random instances.
inline VerifyReport verify_sdpa_limit(const LimitBattery& spec = {}) {
  Rng rng(spec.seed);
  VerifyReport r{"sdpa_limit", spec.battery_size, 0.0, spec.tolerance, false, {}};
  for (std::size_t inst = 0; inst < spec.battery_size; ++inst) {
    const std::size_t B = detail::pick(1, 2, rng), H = detail::pick(1, 3, rng);
    const std::size_t Tq = detail::pick(1, 8, rng), Tk = detail::pick(1, 8, rng), D = detail::pick(1, 8, rng);
    LanConfig cfg;
    cfg.heads = H;
    cfg.d_model = H * D;
    cfg.euler_steps = 1;
    cfg.sink_gate = false;
    GateCore core = GateCore::init(H, D, cfg.epsilon, rng);
    core.mode = spec.mode;
    const Tensor q = detail::uniform({B, H, Tq, D}, -1.5, 1.5, rng);
    const Tensor k = detail::uniform({B, H, Tk, D}, -1.5, 1.5, rng);
    const Tensor v = detail::uniform({B, H, Tk, D}, -1.0, 1.0, rng);
    NoGradGuard ng;
    const auto res = lan_head_forward(Var::constant(q), Var::constant(k), Var::constant(v), core, cfg);
    const Tensor& out = res.output.value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        reference::Mat keys, vals;
        for (std::size_t j = 0; j < Tk; ++j) {
          keys.push_back(detail::row(k, ((b * H + h) * Tk + j) * D, D));
          vals.push_back(detail::row(v, ((b * H + h) * Tk + j) * D, D));
        }
        for (std::size_t i = 0; i < Tq; ++i) {
          const auto ref = reference::sdpa_reference(detail::row(q, ((b * H + h) * Tq + i) * D, D), keys, vals);
          for (std::size_t c = 0; c < D; ++c)
            r.max_gap = std::max(r.max_gap, std::abs(out[((b * H + h) * Tq + i) * D + c] - ref.output[c]));
        }
      }
  }
  r.pass = r.max_gap <= r.tolerance;
  r.details = {{"gate_mode", spec.mode == GateMode::sdpa_limit ? "sdpa_limit" : "learned"}};
  return r;
}

struct CtRnnBattery {
  std::size_t battery_size = 50;
  std::uint64_t seed = 4;
  std::size_t euler_steps = 10;
  double horizon = 1.0;
};

/// Fixed-tau feedforward-gate LAN logit paths against ct_rnn_integrate on the
/// same pair inputs (exact match required), plus order-1 convergence of both
/// integrators to h(t) = s (1 - e^{-t/tau}) under dt halving.
inline VerifyReport verify_ctrnn_limit(const CtRnnBattery& spec = {}) {
  Rng rng(spec.seed);
  VerifyReport r{"ctrnn_limit", spec.battery_size, 0.0, 0.0, false, {}};
  const double dt = spec.horizon / static_cast<double>(spec.euler_steps);
  std::size_t pairs_checked = 0;
  for (std::size_t inst = 0; inst < spec.battery_size; ++inst) {
    const std::size_t H = detail::pick(1, 2, rng), Tq = detail::pick(1, 5, rng), Tk = detail::pick(1, 5, rng),
                      D = detail::pick(1, 4, rng);
    LanConfig cfg;
    cfg.heads = H;
    cfg.d_model = H * D;
    cfg.euler_steps = spec.euler_steps;
    cfg.horizon = spec.horizon;
    GateCore core = GateCore::init(H, D, cfg.epsilon, rng);
    core.mode = GateMode::ct_rnn;
    // dt strictly below tau so the clamp never fires.
    core.ct_tau = std::uniform_real_distribution<double>(1.5 * dt, 4.0)(rng);
    core.ct_w = Var::parameter(detail::uniform({H, 1, 2 * D}, -1.0, 1.0, rng));
    core.ct_b = Var::parameter(detail::uniform({H, 1, 1}, -0.5, 0.5, rng));
    const Tensor q = detail::uniform({1, H, Tq, D}, -1.0, 1.0, rng);
    const Tensor k = detail::uniform({1, H, Tk, D}, -1.0, 1.0, rng);
    NoGradGuard ng;
    const auto res = lan_head_forward(Var::constant(q), Var::constant(k), Var::constant(k), core, cfg, nullptr, true);
    const auto& tr = *res.trajectory;
    const std::size_t N = spec.euler_steps;
    for (std::size_t h = 0; h < H; ++h) {
      reference::CtRnnCell cell;
      cell.tau = core.ct_tau;
      cell.w = {detail::row(core.ct_w.value(), h * 2 * D, 2 * D)};
      cell.b = {core.ct_b.value()[h]};
      for (std::size_t i = 0; i < Tq; ++i)
        for (std::size_t j = 0; j < Tk; ++j) {
          reference::Vec u = detail::row(q, (h * Tq + i) * D, D);
          const auto kr = detail::row(k, (h * Tk + j) * D, D);
          u.insert(u.end(), kr.begin(), kr.end());
          const auto ref = reference::ct_rnn_integrate(cell, {u}, dt, N);
          const std::size_t p = tr.selection.row(0, h, i) + j;
          for (std::size_t n = 0; n <= N; ++n)
            r.max_gap = std::max(r.max_gap, std::abs(tr.a[p * (N + 1) + n] - ref[n][0]));
          ++pairs_checked;
        }
    }
  }

  // Convergence against the analytic curve for one constant drive.
  const double tau = 1.0, t_end = 5.0, s = std::tanh(0.8);
  reference::CtRnnCell cell{tau, {{0.8}}, {0.0}};
  auto err_at = [&](double step) {
    const auto n = static_cast<std::size_t>(std::llround(t_end / step));
    const auto traj = reference::ct_rnn_integrate(cell, {{1.0}}, step, n);
    return std::abs(traj.back()[0] - reference::ct_rnn_analytic(s, tau, t_end));
  };
  const double coarse = 0.1;
  const double e1 = err_at(coarse), e2 = err_at(coarse / 2);
  const double ratio = e1 / e2;
  // Contractive Euler: global error <= t_end * dt * max|h''| / 2, |h''| <= |s| / tau^2.
  const double bound = t_end * coarse * std::abs(s) / (2.0 * tau * tau);
  const bool converges = ratio >= 1.8 && ratio <= 2.2 && e1 <= bound;
  r.pass = r.max_gap <= r.tolerance && converges;
  r.details = {{"pairs_checked", pairs_checked},
               {"dt", dt},
               {"error_dt", e1},
               {"error_half_dt", e2},
               {"convergence_ratio", ratio},
               {"error_bound_C_dt", bound}};
  return r;
}

/// Named suites: invariance, stability, limits, all.
inline std::vector<VerifyReport> run_verify_suite(const std::string& suite, std::uint64_t seed = 0) {
  std::vector<VerifyReport> out;
  const bool all = suite == "all";
  if (!all && suite != "invariance" && suite != "stability" && suite != "limits")
    throw std::invalid_argument("unknown verify suite '" + suite + "'");
  if (all || suite == "invariance") out.push_back(forward_invariance_suite(10000, 20, seed + 1));
  if (all || suite == "stability") out.push_back(euler_stability_suite(1000, seed + 2));
  if (all || suite == "limits") {
    LimitBattery sb;
    sb.seed = seed + 3;
    out.push_back(verify_sdpa_limit(sb));
    CtRnnBattery cb;
    cb.seed = seed + 4;
    out.push_back(verify_ctrnn_limit(cb));
  }
  return out;
}

}  // namespace fluid
