#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fluid/autograd.hpp"
#include "fluid/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly and registers a backward rule through make_result().

namespace fluid {

using Mask = std::vector<std::uint8_t>;

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` viewed inside `out` (0 on broadcast dimensions).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t o = k + (out.size() - in.size());
    st[o] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  return st;
}

/// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t inner = out[r - 1];
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(i + j, oa + j * sa[r - 1], ob + j * sb[r - 1]);
    // advance all but the innermost dimension
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < out[k]) break;
      oa -= sa[k] * out[k];
      ob -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

/// Sums a gradient of the broadcast shape back down to `target`.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  auto dst = out.mutable_data();
  auto src = g.data();
  const auto st = broadcast_strides(target, g.shape());
  const std::vector<std::size_t> zero(g.rank(), 0);
  for_each_broadcast(g.shape(), st, zero,
                     [&](std::size_t o, std::size_t t, std::size_t) { dst[t] += src[o]; });
  return out;
}

template <class F>
Tensor map(const Tensor& x, F&& f) {
  Tensor out(x.shape());
  auto d = out.mutable_data();
  auto s = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = f(s[i]);
  return out;
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy broadcasting
// ---------------------------------------------------------------------------

enum class BinaryKind { add, sub, mul, div };

inline Var binary(const Var& a, const Var& b, BinaryKind kind) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const Shape out_shape =
      av.shape() == bv.shape() ? av.shape() : detail::broadcast_shapes(av.shape(), bv.shape());
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto x = av.data();
  auto y = bv.data();
  auto apply = [kind](double p, double q) {
    switch (kind) {
      case BinaryKind::add: return p + q;
      case BinaryKind::sub: return p - q;
      case BinaryKind::mul: return p * q;
      case BinaryKind::div: return p / q;
    }
    return 0.0;
  };
  if (av.shape() == bv.shape()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(x[i], y[i]);
  } else {
    const auto sa = detail::broadcast_strides(av.shape(), out_shape);
    const auto sb = detail::broadcast_strides(bv.shape(), out_shape);
    detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      o[i] = apply(x[ia], y[ib]);
    });
  }

  return make_result(std::move(out), {a, b}, [a, b, kind, out_shape](const Tensor& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor ga, gb;
    if (kind == BinaryKind::add || kind == BinaryKind::sub) {
      if (a.requires_grad()) ga = detail::reduce_to(g, av.shape());
      if (b.requires_grad()) {
        gb = detail::reduce_to(g, bv.shape());
        if (kind == BinaryKind::sub) gb = detail::map(gb, [](double v) { return -v; });
      }
      return std::vector<Tensor>{ga, gb};
    }
    Tensor full_a(out_shape), full_b(out_shape);
    auto da = full_a.mutable_data();
    auto db = full_b.mutable_data();
    auto gs = g.data();
    auto x = av.data();
    auto y = bv.data();
    const auto sa = detail::broadcast_strides(av.shape(), out_shape);
    const auto sb = detail::broadcast_strides(bv.shape(), out_shape);
    detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (kind == BinaryKind::mul) {
        da[i] = gs[i] * y[ib];
        db[i] = gs[i] * x[ia];
      } else {
        da[i] = gs[i] / y[ib];
        db[i] = -gs[i] * x[ia] / (y[ib] * y[ib]);
      }
    });
    if (a.requires_grad()) ga = detail::reduce_to(full_a, av.shape());
    if (b.requires_grad()) gb = detail::reduce_to(full_b, bv.shape());
    return std::vector<Tensor>{ga, gb};
  });
}

inline Var add(const Var& a, const Var& b) { return binary(a, b, BinaryKind::add); }
inline Var sub(const Var& a, const Var& b) { return binary(a, b, BinaryKind::sub); }
inline Var mul(const Var& a, const Var& b) { return binary(a, b, BinaryKind::mul); }
inline Var div(const Var& a, const Var& b) { return binary(a, b, BinaryKind::div); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

/// y = f(x); backward multiplies by df(x, y).
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out = detail::map(x.value(), f);
  Tensor y = out;
  return make_result(std::move(out), {x}, [x, y, df](const Tensor& g) {
    Tensor gx(g.shape());
    auto d = gx.mutable_data();
    auto gs = g.data();
    auto xs = x.value().data();
    auto ys = y.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = gs[i] * df(xs[i], ys[i]);
    return std::vector<Tensor>{gx};
  });
}

inline Var neg(const Var& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(const Var& x) {
  return unary(x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}
inline Var softplus(const Var& x) {
  return unary(x, detail::stable_softplus, [](double v, double) { return detail::stable_sigmoid(v); });
}
inline Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Var log(const Var& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Var abs(const Var& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}
inline Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Var add_scalar(const Var& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Var mul_scalar(const Var& x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Shape in = x.shape();
  return make_result(Tensor::scalar(s), {x}, [in](const Tensor& g) {
    return std::vector<Tensor>{Tensor(in, g.item())};
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return mul_scalar(sum(x), 1.0 / n);
}

/// Sum over one axis; the axis is removed from the shape.
inline Var sum_axis(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("sum_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  auto d = out.mutable_data();
  auto v = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) d[o * inner + i] += v[(o * len + k) * inner + i];
  return make_result(std::move(out), {x}, [s, outer, inner, len](const Tensor& g) {
    Tensor gx(s);
    auto d = gx.mutable_data();
    auto gs = g.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) d[(o * len + k) * inner + i] = gs[o * inner + i];
    return std::vector<Tensor>{gx};
  });
}

inline Var reshape(const Var& x, Shape s) {
  const Shape in = x.shape();
  Tensor out = x.value().reshaped(std::move(s));
  return make_result(std::move(out), {x}, [in](const Tensor& g) { return std::vector<Tensor>{g.reshaped(in)}; });
}

namespace detail {

inline Tensor permute_tensor(const Tensor& t, const std::vector<std::size_t>& perm) {
  const Shape& s = t.shape();
  const std::size_t r = s.size();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_strides[perm[i]];
  Tensor out(os);
  auto d = out.mutable_data();
  auto v = t.data();
  const std::vector<std::size_t> zero(r, 0);
  for_each_broadcast(os, st, zero, [&](std::size_t o, std::size_t i, std::size_t) { d[o] = v[i]; });
  return out;
}

}  // namespace detail

inline Var permute(const Var& x, std::vector<std::size_t> perm) {
  if (perm.size() != x.shape().size()) throw DimensionError("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  Tensor out = detail::permute_tensor(x.value(), perm);
  return make_result(std::move(out), {x}, [inv](const Tensor& g) {
    return std::vector<Tensor>{detail::permute_tensor(g, inv)};
  });
}

inline Var transpose(const Var& x) {
  const auto r = x.shape().size();
  if (r < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

/// x[..., start:start+len, ...] along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape s = x.shape();
  if (axis >= s.size() || start + len > s[axis])
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = len;
  Tensor out(os);
  auto d = out.mutable_data();
  auto v = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((o * s[axis] + start) * inner), len * inner,
                d.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return make_result(std::move(out), {x}, [s, axis, start, len, outer, inner](const Tensor& g) {
    Tensor gx(s);
    auto d = gx.mutable_data();
    auto gs = g.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(gs.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  d.begin() + static_cast<std::ptrdiff_t>((o * s[axis] + start) * inner));
    return std::vector<Tensor>{gx};
  });
}

inline Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat of nothing");
  Shape os = xs[0].shape();
  if (axis >= os.size()) throw DimensionError("concat axis out of range for " + shape_str(os));
  os[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != os.size()) throw DimensionError("concat rank mismatch: " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != xs[0].shape()[i])
        throw DimensionError("concat shape mismatch: " + shape_str(xs[0].shape()) + " vs " + shape_str(s));
    lens.push_back(s[axis]);
    os[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
  Tensor out(os);
  auto d = out.mutable_data();
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto v = xs[k].value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  d.begin() + static_cast<std::ptrdiff_t>((o * os[axis] + off) * inner));
    off += lens[k];
  }
  std::vector<Shape> shapes;
  for (const auto& x : xs) shapes.push_back(x.shape());
  return make_result(std::move(out), xs, [shapes, lens, os, axis, outer, inner](const Tensor& g) {
    std::vector<Tensor> gs;
    auto src = g.data();
    std::size_t off = 0;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      Tensor gx(shapes[k]);
      auto d = gx.mutable_data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * os[axis] + off) * inner), lens[k] * inner,
                    d.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner));
      off += lens[k];
      gs.push_back(std::move(gx));
    }
    return gs;
  });
}

// ---------------------------------------------------------------------------
// Matrix product with broadcast batch dimensions
// ---------------------------------------------------------------------------

namespace detail {

// c[MxN] += a[MxK] * b[KxN]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* ci = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[i * K + k];
      const double* bk = b + k * N;
      for (std::size_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
    }
  }
}

// a[MxK] += c[MxN] * b[KxN]^T
inline void gemm_nt(const double* c, const double* b, double* a, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* ci = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double* bk = b + k * N;
      double s = 0.0;
      for (std::size_t j = 0; j < N; ++j) s += ci[j] * bk[j];
      a[i * K + k] += s;
    }
  }
}

// b[KxN] += a[MxK]^T * c[MxN]
inline void gemm_tn(const double* a, const double* c, double* b, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* ci = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[i * K + k];
      double* bk = b + k * N;
      for (std::size_t j = 0; j < N; ++j) bk[j] += aik * ci[j];
    }
  }
}

struct MatmulPlan {
  Shape batch;
  std::vector<std::size_t> a_off, b_off;  // per flattened batch index
  std::size_t M, K, N;
};

inline MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(as) + " and " + shape_str(bs));
  MatmulPlan p;
  p.M = as[as.size() - 2];
  p.K = as[as.size() - 1];
  p.N = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != p.K)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs));
  const Shape ab(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
  try {
    p.batch = broadcast_shapes(ab, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch dimensions not broadcastable: " + shape_str(as) + " x " + shape_str(bs));
  }
  const auto sa = broadcast_strides(ab, p.batch);
  const auto sb = broadcast_strides(bb, p.batch);
  const std::size_t nb = numel(p.batch);
  p.a_off.resize(nb);
  p.b_off.resize(nb);
  for_each_broadcast(p.batch, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    p.a_off[i] = ia * p.M * p.K;
    p.b_off[i] = ib * p.K * p.N;
  });
  return p;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  auto plan = std::make_shared<detail::MatmulPlan>(detail::plan_matmul(a.shape(), b.shape()));
  Shape os = plan->batch;
  os.push_back(plan->M);
  os.push_back(plan->N);
  Tensor out(os);
  {
    auto c = out.mutable_data();
    auto av = a.value().data();
    auto bv = b.value().data();
    const std::size_t MN = plan->M * plan->N;
    for (std::size_t i = 0; i < plan->a_off.size(); ++i)
      detail::gemm_nn(av.data() + plan->a_off[i], bv.data() + plan->b_off[i], c.data() + i * MN, plan->M,
                      plan->K, plan->N);
  }
  return make_result(std::move(out), {a, b}, [a, b, plan](const Tensor& g) {
    Tensor ga, gb;
    const std::size_t MN = plan->M * plan->N;
    auto gs = g.data();
    if (a.requires_grad()) {
      ga = Tensor(a.shape());
      auto d = ga.mutable_data();
      auto bv = b.value().data();
      for (std::size_t i = 0; i < plan->a_off.size(); ++i)
        detail::gemm_nt(gs.data() + i * MN, bv.data() + plan->b_off[i], d.data() + plan->a_off[i], plan->M,
                        plan->K, plan->N);
    }
    if (b.requires_grad()) {
      gb = Tensor(b.shape());
      auto d = gb.mutable_data();
      auto av = a.value().data();
      for (std::size_t i = 0; i < plan->a_off.size(); ++i)
        detail::gemm_tn(av.data() + plan->a_off[i], gs.data() + i * MN, d.data() + plan->b_off[i], plan->M,
                        plan->K, plan->N);
    }
    return std::vector<Tensor>{ga, gb};
  });
}

// ---------------------------------------------------------------------------
// Softmax family and layer normalization
// ---------------------------------------------------------------------------

namespace detail {

struct AxisView {
  std::size_t outer, len, inner;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace detail

/// Softmax along `axis`, computed with max subtraction. With a mask (same
/// element count as x, nonzero = valid), masked entries get exactly 0 and a
/// fully masked slice is all zeros.
inline Var softmax(const Var& x, std::size_t axis, const Mask* mask = nullptr) {
  const auto av = detail::axis_view(x.shape(), axis);
  if (mask && mask->size() != x.value().size())
    throw DimensionError("softmax mask size does not match " + shape_str(x.shape()));
  Tensor out(x.shape());
  auto d = out.mutable_data();
  auto v = x.value().data();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      const std::size_t base = o * av.len * av.inner + i;
      auto valid = [&](std::size_t k) { return !mask || (*mask)[base + k * av.inner]; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < av.len; ++k)
        if (valid(k)) m = std::max(m, v[base + k * av.inner]);
      if (m == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (std::size_t k = 0; k < av.len; ++k) {
        const std::size_t j = base + k * av.inner;
        d[j] = valid(k) ? std::exp(v[j] - m) : 0.0;
        z += d[j];
      }
      for (std::size_t k = 0; k < av.len; ++k) d[base + k * av.inner] /= z;
    }
  Tensor y = out;
  return make_result(std::move(out), {x}, [y, av](const Tensor& g) {
    Tensor gx(y.shape());
    auto d = gx.mutable_data();
    auto ys = y.data();
    auto gs = g.data();
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t base = o * av.len * av.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < av.len; ++k) dot += gs[base + k * av.inner] * ys[base + k * av.inner];
        for (std::size_t k = 0; k < av.len; ++k) {
          const std::size_t j = base + k * av.inner;
          d[j] = ys[j] * (gs[j] - dot);
        }
      }
    return std::vector<Tensor>{gx};
  });
}

inline Var log_softmax(const Var& x, std::size_t axis) {
  const auto av = detail::axis_view(x.shape(), axis);
  Tensor out(x.shape());
  auto d = out.mutable_data();
  auto v = x.value().data();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      const std::size_t base = o * av.len * av.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < av.len; ++k) m = std::max(m, v[base + k * av.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < av.len; ++k) z += std::exp(v[base + k * av.inner] - m);
      const double lz = m + std::log(z);
      for (std::size_t k = 0; k < av.len; ++k) d[base + k * av.inner] = v[base + k * av.inner] - lz;
    }
  Tensor y = out;
  return make_result(std::move(out), {x}, [y, av](const Tensor& g) {
    Tensor gx(y.shape());
    auto d = gx.mutable_data();
    auto ys = y.data();
    auto gs = g.data();
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t base = o * av.len * av.inner + i;
        double gsum = 0.0;
        for (std::size_t k = 0; k < av.len; ++k) gsum += gs[base + k * av.inner];
        for (std::size_t k = 0; k < av.len; ++k) {
          const std::size_t j = base + k * av.inner;
          d[j] = gs[j] - std::exp(ys[j]) * gsum;
        }
      }
    return std::vector<Tensor>{gx};
  });
}

/// Normalizes over the last axis. `gain` and `bias` (shape [D]) are optional.
inline Var layer_norm(const Var& x, const Var& gain = {}, const Var& bias = {}, double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm on a scalar");
  const std::size_t D = s.back();
  const std::size_t rows = x.value().size() / D;
  if (gain.defined() && gain.value().size() != D) throw DimensionError("layer_norm gain has wrong size");
  if (bias.defined() && bias.value().size() != D) throw DimensionError("layer_norm bias has wrong size");
  Tensor out(s), xhat(s), inv_std(Shape{rows});
  {
    auto d = out.mutable_data();
    auto xh = xhat.mutable_data();
    auto is = inv_std.mutable_data();
    auto v = x.value().data();
    const double* gv = gain.defined() ? gain.value().data().data() : nullptr;
    const double* bv = bias.defined() ? bias.value().data().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = v.data() + r * D;
      double m = 0.0;
      for (std::size_t j = 0; j < D; ++j) m += row[j];
      m /= static_cast<double>(D);
      double var = 0.0;
      for (std::size_t j = 0; j < D; ++j) var += (row[j] - m) * (row[j] - m);
      var /= static_cast<double>(D);
      const double inv = 1.0 / std::sqrt(var + eps);
      is[r] = inv;
      for (std::size_t j = 0; j < D; ++j) {
        const double h = (row[j] - m) * inv;
        xh[r * D + j] = h;
        double y = gv ? h * gv[j] : h;
        if (bv) y += bv[j];
        d[r * D + j] = y;
      }
    }
  }
  std::vector<Var> parents{x};
  if (gain.defined()) parents.push_back(gain);
  if (bias.defined()) parents.push_back(bias);
  return make_result(std::move(out), parents, [x, gain, bias, xhat, inv_std, D, rows](const Tensor& g) {
    Tensor gx(x.shape());
    Tensor gg = gain.defined() ? Tensor(gain.shape()) : Tensor();
    Tensor gb = bias.defined() ? Tensor(bias.shape()) : Tensor();
    auto dx = gx.mutable_data();
    auto gs = g.data();
    auto xh = xhat.data();
    auto is = inv_std.data();
    const double* gv = gain.defined() ? gain.value().data().data() : nullptr;
    std::vector<double> dxh(D);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const std::size_t k = r * D + j;
        dxh[j] = gv ? gs[k] * gv[j] : gs[k];
        s1 += dxh[j];
        s2 += dxh[j] * xh[k];
        if (gain.defined()) gg.mutable_data()[j] += gs[k] * xh[k];
        if (bias.defined()) gb.mutable_data()[j] += gs[k];
      }
      const double n = static_cast<double>(D);
      for (std::size_t j = 0; j < D; ++j) {
        const std::size_t k = r * D + j;
        dx[k] = is[r] / n * (n * dxh[j] - s1 - xh[k] * s2);
      }
    }
    std::vector<Tensor> res{gx};
    if (gain.defined()) res.push_back(gg);
    if (bias.defined()) res.push_back(gb);
    return res;
  });
}

}  // namespace fluid
