#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluid/nn.hpp"
#include "fluid/ops.hpp"

namespace fluid {

enum class LossKind { mse, mae, cross_entropy };

inline LossKind parse_loss(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "mae") return LossKind::mae;
  if (s == "cross_entropy") return LossKind::cross_entropy;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

namespace detail {

/// Expands a per-element or per-position mask to a 0/1 weight tensor.
inline Tensor mask_weights(const Shape& s, std::size_t positions, const Mask* mask) {
  const std::size_t n = numel(s);
  Tensor w(s, 1.0);
  if (!mask) return w;
  auto d = w.mutable_data();
  if (mask->size() == n) {
    for (std::size_t i = 0; i < n; ++i) d[i] = (*mask)[i] ? 1.0 : 0.0;
  } else if (mask->size() == positions) {
    const std::size_t per = n / positions;
    for (std::size_t i = 0; i < n; ++i) d[i] = (*mask)[i / per] ? 1.0 : 0.0;
  } else {
    throw DimensionError("loss mask of size " + std::to_string(mask->size()) + " fits neither " + shape_str(s) +
                         " nor its positions");
  }
  return w;
}

}  // namespace detail

/// Mean over unmasked elements. For cross_entropy, pred holds logits [...,C]
/// and target holds class indices [...]; the mask is per position.
inline Var loss(LossKind kind, const Var& pred, const Tensor& target, const Mask* mask = nullptr) {
  const Shape& ps = pred.shape();
  if (kind == LossKind::cross_entropy) {
    if (ps.empty()) throw DimensionError("cross_entropy needs logits with a class axis");
    const std::size_t C = ps.back();
    const std::size_t positions = pred.value().size() / C;
    if (target.size() != positions)
      throw DimensionError("cross_entropy target " + shape_str(target.shape()) + " vs logits " + shape_str(ps));
    Tensor pick(ps);
    auto pd = pick.mutable_data();
    double count = 0.0;
    for (std::size_t i = 0; i < positions; ++i) {
      if (mask && !(*mask)[i]) continue;
      const auto c = static_cast<std::size_t>(target[i]);
      if (c >= C || target[i] != static_cast<double>(c))
        throw std::invalid_argument("cross_entropy target " + std::to_string(target[i]) + " is not a class index");
      pd[i * C + c] = 1.0;
      count += 1.0;
    }
    if (mask && mask->size() != positions) throw DimensionError("cross_entropy mask must be per position");
    if (count == 0.0) throw std::invalid_argument("loss: mask selects no elements");
    return mul_scalar(sum(mul(log_softmax(pred, ps.size() - 1), Var::constant(pick))), -1.0 / count);
  }
  if (target.shape() != ps)
    throw DimensionError("loss: pred " + shape_str(ps) + " vs target " + shape_str(target.shape()));
  const std::size_t positions = ps.empty() ? 1 : pred.value().size() / ps.back();
  const Tensor w = detail::mask_weights(ps, positions, mask);
  double count = 0.0;
  for (double v : w.data()) count += v;
  if (count == 0.0) throw std::invalid_argument("loss: mask selects no elements");
  const Var diff = sub(pred, Var::constant(target));
  const Var per = kind == LossKind::mse ? square(diff) : abs(diff);
  return mul_scalar(sum(mul(per, Var::constant(w))), 1.0 / count);
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::mse;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw std::invalid_argument("betas must lie in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"optimizer", c.optimizer == OptimizerKind::adamw ? "adamw" : "sgd"},
          {"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"loss", c.loss == LossKind::mse ? "mse" : c.loss == LossKind::mae ? "mae" : "cross_entropy"},
          {"seed", c.seed},
          {"clip_norm", c.clip_norm}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("optimizer")) {
    const auto o = j["optimizer"].get<std::string>();
    if (o == "adamw") c.optimizer = OptimizerKind::adamw;
    else if (o == "sgd") c.optimizer = OptimizerKind::sgd;
    else throw std::invalid_argument("unknown optimizer '" + o + "'");
  }
  c.lr = j.value("lr", c.lr);
  if (j.contains("betas")) {
    c.beta1 = j["betas"].at(0).get<double>();
    c.beta2 = j["betas"].at(1).get<double>();
  }
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("loss")) c.loss = parse_loss(j["loss"].get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.validate();
  return c;
}

struct AdamWState {
  std::vector<Tensor> m, v;
  std::size_t t = 0;
};

/// p <- p - lr * (m_hat / (sqrt(v_hat) + 1e-8) + wd * p)
inline void adamw_step(const ParamList& params, const std::vector<Tensor>& grads, AdamWState& st, double lr,
                       double beta1, double beta2, double weight_decay) {
  if (grads.size() != params.size()) throw DimensionError("adamw_step: one gradient per parameter required");
  if (st.m.empty()) {
    for (const auto& [_, p] : params) {
      st.m.emplace_back(p.shape());
      st.v.emplace_back(p.shape());
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i].second;
    const auto g = grads[i].data();
    Tensor m(p.shape()), v(p.shape()), next(p.shape());
    auto md = m.mutable_data();
    auto vd = v.mutable_data();
    auto nd = next.mutable_data();
    const auto pm = st.m[i].data();
    const auto pv = st.v[i].data();
    const auto pd = p.value().data();
    for (std::size_t k = 0; k < nd.size(); ++k) {
      md[k] = beta1 * pm[k] + (1.0 - beta1) * g[k];
      vd[k] = beta2 * pv[k] + (1.0 - beta2) * g[k] * g[k];
      const double mh = md[k] / bc1;
      const double vh = vd[k] / bc2;
      nd[k] = pd[k] - lr * (mh / (std::sqrt(vh) + 1e-8) + weight_decay * pd[k]);
    }
    st.m[i] = std::move(m);
    st.v[i] = std::move(v);
    p.assign(std::move(next));
  }
}

inline void sgd_step(const ParamList& params, const std::vector<Tensor>& grads, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i].second;
    Tensor next(p.shape());
    auto nd = next.mutable_data();
    const auto pd = p.value().data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < nd.size(); ++k) nd[k] = pd[k] - lr * g[k];
    p.assign(std::move(next));
  }
}

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before scaling.
inline double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      Tensor scaled(g.shape());
      auto d = scaled.mutable_data();
      const auto src = g.data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = src[k] * s;
      g = std::move(scaled);
    }
  }
  return norm;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, ParamList params) : cfg_(cfg), params_(std::move(params)) {}

  void step(std::vector<Tensor> grads) {
    if (cfg_.clip_norm > 0) clip_grad_norm(grads, cfg_.clip_norm);
    if (cfg_.optimizer == OptimizerKind::adamw)
      adamw_step(params_, grads, state_, cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.weight_decay);
    else
      sgd_step(params_, grads, cfg_.lr);
  }

  const ParamList& params() const { return params_; }

 private:
  TrainConfig cfg_;
  ParamList params_;
  AdamWState state_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& h) {
  os << "epoch,train_loss,val_metric\n";
  os.precision(17);
  for (const auto& r : h) os << r.epoch << ',' << r.train_loss << ',' << r.val_metric << '\n';
}

inline std::vector<Tensor> snapshot(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& [_, p] : params) out.push_back(p.value().clone());
  return out;
}

inline void restore(const ParamList& params, const std::vector<Tensor>& values) {
  if (values.size() != params.size()) throw DimensionError("restore: snapshot size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i].second;
    p.assign(values[i].clone());
  }
}

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<Tensor> best_params;  // empty if no epoch ran
  double best_metric = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using BatchLossFn = std::function<Var(const std::vector<std::size_t>& batch)>;
using MetricFn = std::function<double()>;
/// Called with (epoch, batch) when a loss is not finite; returns a diagnostic.
using DivergenceDump = std::function<std::string(std::size_t, const std::vector<std::size_t>&)>;

/// Mini-batch training over examples 0..n_train-1, reshuffled each epoch from
/// cfg.seed. After every epoch the metric is evaluated (lower is better) and
/// the best parameters are snapshotted.
inline TrainResult train(const ParamList& params, std::size_t n_train, const TrainConfig& cfg,
                         const BatchLossFn& batch_loss, const MetricFn& val_metric,
                         const DivergenceDump& dump = {}) {
  cfg.validate();
  if (n_train == 0) throw std::invalid_argument("train: dataset is empty");
  Optimizer opt(cfg, params);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
  TrainResult res;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = n_train; i > 1; --i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(order[i - 1], order[j]);
    }
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, n_train)));
      const Var l = batch_loss(batch);
      const double lv = l.value().item();
      if (!std::isfinite(lv)) {
        std::string msg = "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches);
        if (dump) msg += "\n" + dump(epoch, batch);
        throw TrainingDiverged(msg);
      }
      const GradMap g = backward(l);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const auto& [_, p] : params) grads.push_back(g.at(p));
      opt.step(std::move(grads));
      total += lv;
      ++batches;
    }
    EpochRecord rec{epoch, total / static_cast<double>(batches), val_metric ? val_metric() : 0.0};
    res.history.push_back(rec);
    if (res.best_params.empty() || rec.val_metric < res.best_metric) {
      res.best_metric = rec.val_metric;
      res.best_epoch = epoch;
      res.best_params = snapshot(params);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "<param>[index]"
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor) per coordinate, with n the central
/// difference (f(x+h) - f(x-h)) / 2h. `stride` > 1 checks every stride-th
/// element of each parameter.
inline GradCheckReport grad_check(const std::function<Var()>& f, const ParamList& params, double h = 1e-5,
                                  std::size_t stride = 1, double floor = 1e-6) {
  if (!(h > 0)) throw std::invalid_argument("grad_check: h must be positive");
  const GradMap g = backward(f());
  GradCheckReport rep;
  NoGradGuard ng;
  for (const auto& [name, p0] : params) {
    Var p = p0;
    const Tensor original = p.value();
    const Tensor analytic = g.at(p);
    for (std::size_t i = 0; i < original.size(); i += std::max<std::size_t>(stride, 1)) {
      auto eval = [&](double delta) {
        Tensor t = original.clone();
        t.mutable_data()[i] += delta;
        p.assign(std::move(t));
        return f().value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      p.assign(original);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error || rep.checked == 0) {
        rep.max_rel_error = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace fluid
