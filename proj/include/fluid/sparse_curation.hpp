#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fluid/tensor.hpp"

// Construction of the query-key pair set that feeds the LAN gates: either every
// key per query, or the Top-K keys ranked by the raw dot product q.k.

namespace fluid {

/// Which keys each query is paired with. Indices/valid are [B,H,T_q,K_eff].
struct PairSelection {
  std::size_t batch = 0, heads = 0, t_q = 0, t_k = 0, k_eff = 0;
  std::vector<std::int32_t> indices;
  std::vector<std::uint8_t> valid;

  Shape shape() const { return {batch, heads, t_q, k_eff}; }
  std::size_t pairs() const { return indices.size(); }
  std::size_t row(std::size_t b, std::size_t h, std::size_t i) const { return ((b * heads + h) * t_q + i) * k_eff; }
};

/// u = [q ; k_selected] per pair, [B,H,T_q,K_eff,2D]. Padding pairs are zero.
struct PairBatch {
  Tensor u;
  PairSelection selection;

  std::size_t payload_bytes() const { return u.size() * sizeof(double); }
};

namespace detail {

inline void check_qk(const Tensor& q, const Tensor& k) {
  if (q.rank() != 4 || k.rank() != 4)
    throw DimensionError("q and k must be [B,H,T,D], got " + shape_str(q.shape()) + " and " + shape_str(k.shape()));
  if (q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1))
    throw DimensionError("q and k batch/head dimensions differ: " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
  if (q.dim(3) != k.dim(3))
    throw DimensionError("q and k feature dimensions differ: " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
}

// key_mask is [B,T_k], nonzero = real key.
inline bool key_allowed(std::size_t b, std::size_t i, std::size_t j, std::size_t t_k, bool causal,
                        const std::vector<std::uint8_t>* key_mask) {
  if (causal && j > i) return false;
  if (key_mask && !(*key_mask)[b * t_k + j]) return false;
  return true;
}

}  // namespace detail

/// Pair every query with every key (K_eff = T_k), in key order.
inline PairSelection select_all_pairs(const Tensor& q, const Tensor& k, bool causal = false,
                                      const std::vector<std::uint8_t>* key_mask = nullptr) {
  detail::check_qk(q, k);
  PairSelection s{q.dim(0), q.dim(1), q.dim(2), k.dim(2), k.dim(2), {}, {}};
  s.indices.resize(s.batch * s.heads * s.t_q * s.k_eff);
  s.valid.resize(s.indices.size());
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.t_q; ++i) {
        const std::size_t r = s.row(b, h, i);
        for (std::size_t j = 0; j < s.k_eff; ++j) {
          s.indices[r + j] = static_cast<std::int32_t>(j);
          s.valid[r + j] = detail::key_allowed(b, i, j, s.t_k, causal, key_mask);
        }
      }
  return s;
}

/// Top-K selection by raw score q.k (no 1/sqrt(d) scaling). Disallowed keys
/// never enter the set; ties go to the lower key index. The chosen keys are
/// stored in ascending key order, followed by invalid padding slots when fewer
/// than K_eff keys are allowed.
inline PairSelection select_topk_pairs(const Tensor& q, const Tensor& k, std::size_t top_k, bool causal = false,
                                       const std::vector<std::uint8_t>* key_mask = nullptr) {
  if (top_k < 1) throw std::invalid_argument("top-k must be at least 1");
  detail::check_qk(q, k);
  const std::size_t D = q.dim(3);
  PairSelection s{q.dim(0), q.dim(1), q.dim(2), k.dim(2), std::min(top_k, k.dim(2)), {}, {}};
  s.indices.assign(s.batch * s.heads * s.t_q * s.k_eff, 0);
  s.valid.assign(s.indices.size(), 0);
  auto qd = q.data();
  auto kd = k.data();
  std::vector<std::pair<double, std::int32_t>> cand;
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.t_q; ++i) {
        cand.clear();
        const double* qi = qd.data() + ((b * s.heads + h) * s.t_q + i) * D;
        for (std::size_t j = 0; j < s.t_k; ++j) {
          if (!detail::key_allowed(b, i, j, s.t_k, causal, key_mask)) continue;
          const double* kj = kd.data() + ((b * s.heads + h) * s.t_k + j) * D;
          double score = 0.0;
          for (std::size_t c = 0; c < D; ++c) score += qi[c] * kj[c];
          cand.emplace_back(score, static_cast<std::int32_t>(j));
        }
        const std::size_t take = std::min(s.k_eff, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                          [](const auto& x, const auto& y) {
                            return x.first > y.first || (x.first == y.first && x.second < y.second);
                          });
        std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take),
                  [](const auto& x, const auto& y) { return x.second < y.second; });
        const std::size_t r = s.row(b, h, i);
        for (std::size_t j = 0; j < take; ++j) {
          s.indices[r + j] = cand[j].second;
          s.valid[r + j] = 1;
        }
      }
  return s;
}

/// Writes [q_i ; k_idx] for every valid pair (tile the query, gather the key).
inline Tensor materialize_pairs(const Tensor& q, const Tensor& k, const PairSelection& s) {
  const std::size_t D = q.dim(3);
  Tensor u({s.batch, s.heads, s.t_q, s.k_eff, 2 * D});
  auto ud = u.mutable_data();
  auto qd = q.data();
  auto kd = k.data();
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.t_q; ++i) {
        const std::size_t r = s.row(b, h, i);
        const double* qi = qd.data() + ((b * s.heads + h) * s.t_q + i) * D;
        for (std::size_t j = 0; j < s.k_eff; ++j) {
          if (!s.valid[r + j]) continue;
          const double* kj =
              kd.data() + ((b * s.heads + h) * s.t_k + static_cast<std::size_t>(s.indices[r + j])) * D;
          double* dst = ud.data() + (r + j) * 2 * D;
          std::copy_n(qi, D, dst);
          std::copy_n(kj, D, dst + D);
        }
      }
  return u;
}

inline PairBatch full_pairwise_concat(const Tensor& q, const Tensor& k, bool causal = false,
                                      const std::vector<std::uint8_t>* key_mask = nullptr) {
  auto sel = select_all_pairs(q, k, causal, key_mask);
  auto u = materialize_pairs(q, k, sel);
  return {std::move(u), std::move(sel)};
}

inline PairBatch topk_concat(const Tensor& q, const Tensor& k, std::size_t top_k, bool causal = false,
                             const std::vector<std::uint8_t>* key_mask = nullptr) {
  auto sel = select_topk_pairs(q, k, top_k, causal, key_mask);
  auto u = materialize_pairs(q, k, sel);
  return {std::move(u), std::move(sel)};
}

/// Full pairs when top_k is empty, Top-K otherwise.
inline PairSelection select_pairs(const Tensor& q, const Tensor& k, std::optional<std::size_t> top_k, bool causal,
                                  const std::vector<std::uint8_t>* key_mask = nullptr) {
  return top_k ? select_topk_pairs(q, k, *top_k, causal, key_mask) : select_all_pairs(q, k, causal, key_mask);
}

}  // namespace fluid
