#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>

#include "uae/accum.hpp"
#include "uae/rng.hpp"
#include "uae/tensor.hpp"

namespace uae {

namespace detail {

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p->needs_grad) needs = true;
  }
  if (needs) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

// NumPy-style broadcast of two shapes; strides are aligned to the output
// rank with 0 where a dimension is broadcast.
struct BCastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;
};

inline BCastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  BCastPlan p;
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  // Trailing strides of each input.
  std::vector<int64_t> stra(a.size()), strb(b.size());
  int64_t acc = 1;
  for (size_t i = a.size(); i-- > 0;) {
    stra[i] = acc;
    acc *= a[i];
  }
  acc = 1;
  for (size_t i = b.size(); i-- > 0;) {
    strb[i] = acc;
    acc *= b[i];
  }
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    p.out[i] = std::max(da, db);
    if (da != 1) p.sa[i] = stra[i - (r - a.size())];
    if (db != 1) p.sb[i] = strb[i - (r - b.size())];
  }
  return p;
}

// Odometer walk over the broadcast output; f(ia, ib) per element in
// row-major output order.
template <class F>
void for_each_broadcast(const BCastPlan& p, F&& f) {
  size_t r = p.out.size();
  if (r == 0) {
    f(size_t(0), size_t(0));
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  int64_t total = numel(p.out);
  for (int64_t lin = 0; lin < total; ++lin) {
    f(static_cast<size_t>(ia), static_cast<size_t>(ib));
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

inline void check_axis(const char* op, int64_t axis, size_t rank) {
  if (axis < 0 || axis >= static_cast<int64_t>(rank))
    throw ValueError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  int64_t outer, n, inner;
};
inline AxisSplit axis_split(const Shape& s, int64_t axis) {
  AxisSplit a{1, s[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) a.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class T, class FwdA, class FwdB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, FwdA&& fwd,
                    FwdB&& bwd) {
  BCastPlan p = broadcast_plan(op, a.shape(), b.shape());
  std::vector<T> out(static_cast<size_t>(numel(p.out)));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    size_t o = 0;
    for_each_broadcast(p, [&](size_t ia, size_t ib) { out[o++] = fwd(av[ia], bv[ib]); });
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(
      p.out, std::move(out), {an, bn}, [an, bn, p, bwd](Node<T>& n) {
        bool ga = an->needs_grad, gb = bn->needs_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        const T* av = an->value.data();
        const T* bv = bn->value.data();
        size_t o = 0;
        for_each_broadcast(p, [&](size_t ia, size_t ib) {
          T g = n.grad[o++];
          T da, db;
          bwd(g, av[ia], bv[ib], da, db);
          if (ga) an->grad[ia] += da;
          if (gb) bn->grad[ib] += db;
        });
      });
}

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const char* /*op*/, const Tensor<T>& x, Fwd&& fwd, Bwd&& bwd) {
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  auto outv = std::make_shared<std::vector<T>>(out);  // captured for value-dependent backwards
  return make_op<T>(x.shape(), std::move(out), {xn}, [xn, bwd, outv](Node<T>& n) {
    xn->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      xn->grad[i] += bwd(n.grad[i], xn->value[i], (*outv)[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast primitives

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T& da, T& db) { da = g; db = g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T& da, T& db) { da = g; db = -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T& da, T& db) { da = g * y; db = g * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  T cc = static_cast<T>(c);
  return detail::unary_op<T>(
      "scale", x, [cc](T v) { return cc * v; }, [cc](T g, T, T) { return cc * g; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  // Subgradient at 0 is 0.
  return detail::unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "neg", x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T g, T, T y) { return y > T(0) ? g / (T(2) * y) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "square", x, [](T v) { return v * v; }, [](T g, T v, T) { return T(2) * v * g; });
}

// ---------------------------------------------------------------------------
// matmul

// 2-D matrix product. When `invariant_accum` is set, each output row is
// accumulated over the inner axis in a canonical order (sorted by the A
// coefficient, ties broken by B-row content), which makes the result
// invariant under a simultaneous permutation of A columns and B rows.
// Attention uses this for its value mixing, where the inner axis is the
// point axis.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool invariant_accum = false) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  if (!invariant_accum) {
    for (int64_t i = 0; i < m; ++i) {
      T* orow = out.data() + i * n;
      const T* arow = av + i * k;
      for (int64_t p = 0; p < k; ++p) {
        T s = arow[p];
        if (s == T(0)) continue;
        const T* brow = bv + p * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += s * brow[j];
      }
    }
  } else {
    std::vector<int64_t> ord(static_cast<size_t>(k));
    std::vector<double> acc(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
      const T* arow = av + i * k;
      std::iota(ord.begin(), ord.end(), 0);
      std::sort(ord.begin(), ord.end(), [&](int64_t x, int64_t y) {
        if (arow[x] != arow[y]) return arow[x] < arow[y];
        const T* rx = bv + x * n;
        const T* ry = bv + y * n;
        return std::lexicographical_compare(rx, rx + n, ry, ry + n);
      });
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int64_t p : ord) {
        double s = static_cast<double>(arow[p]);
        const T* brow = bv + p * n;
        for (int64_t j = 0; j < n; ++j) acc[j] += s * static_cast<double>(brow[j]);
      }
      T* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& nd) {
    const T* g = nd.grad.data();
    if (an->needs_grad) {
      an->ensure_grad();
      const T* bv = bn->value.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          T s = T(0);
          const T* grow = g + i * n;
          const T* brow = bv + p * n;
          for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          an->grad[i * k + p] += s;
        }
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      const T* av = an->value.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          T s = av[i * k + p];
          if (s == T(0)) continue;
          const T* grow = g + i * n;
          T* brow = bn->grad.data() + p * n;
          for (int64_t j = 0; j < n; ++j) brow[j] += s * grow[j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xn = x.node();
  return detail::make_op<T>(std::move(shape), x.data(), {xn}, [xn](Node<T>& n) {
    xn->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  const T* xv = x.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  auto xn = x.node();
  return detail::make_op<T>({n, m}, std::move(out), {xn}, [xn, m, n](Node<T>& nd) {
    xn->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) xn->grad[i * n + j] += nd.grad[j * m + i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::check_axis("concat", axis, s0.size());
  Shape out_shape = s0;
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int64_t>(s0.size()))
      throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
    for (size_t d = 0; d < s0.size(); ++d)
      if (static_cast<int64_t>(d) != axis && p.shape()[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;
  auto sp = detail::axis_split(out_shape, axis);
  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t na = p.dim(axis);
    const T* pv = p.data().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      std::memcpy(out.data() + (o * sp.n + off) * sp.inner, pv + o * na * sp.inner,
                  static_cast<size_t>(na * sp.inner) * sizeof(T));
    off += na;
  }
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    sizes.push_back(p.dim(axis));
  }
  return detail::make_op<T>(out_shape, std::move(out), parents, [parents, sizes, sp](Node<T>& nd) {
    int64_t off = 0;
    for (size_t pi = 0; pi < parents.size(); ++pi) {
      auto& pn = parents[pi];
      int64_t na = sizes[pi];
      if (pn->needs_grad) {
        pn->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const T* g = nd.grad.data() + (o * sp.n + off) * sp.inner;
          T* pg = pn->grad.data() + o * na * sp.inner;
          for (int64_t t = 0; t < na * sp.inner; ++t) pg[t] += g[t];
        }
      }
      off += na;
    }
  });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int64_t>& indices) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(x.shape()));
  const int64_t r = x.dim(0), c = x.dim(1);
  for (int64_t i : indices)
    if (i < 0 || i >= r)
      throw ValueError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(r) + ")");
  std::vector<T> out(indices.size() * static_cast<size_t>(c));
  const T* xv = x.data().data();
  for (size_t i = 0; i < indices.size(); ++i)
    std::memcpy(out.data() + i * c, xv + indices[i] * c, static_cast<size_t>(c) * sizeof(T));
  auto xn = x.node();
  auto idx = std::make_shared<std::vector<int64_t>>(indices);
  return detail::make_op<T>({static_cast<int64_t>(indices.size()), c}, std::move(out), {xn},
                            [xn, idx, c](Node<T>& nd) {
                              xn->ensure_grad();
                              for (size_t i = 0; i < idx->size(); ++i) {
                                const T* g = nd.grad.data() + i * c;
                                T* xg = xn->grad.data() + (*idx)[i] * c;
                                for (int64_t j = 0; j < c; ++j) xg[j] += g[j];
                              }
                            });
}

// Repeats each row of a 2-D tensor `times` times (contiguous copies).
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& x, int64_t times) {
  if (times < 1) throw ValueError("repeat_rows: times must be >= 1");
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(x.dim(0) * times));
  for (int64_t i = 0; i < x.dim(0); ++i)
    for (int64_t t = 0; t < times; ++t) idx.push_back(i);
  return gather_rows(x, idx);
}

// ---------------------------------------------------------------------------
// Reductions

// Max-reduce over `axis`; ties break to the lowest index and the gradient
// routes entirely to that index. Argmax (index within the reduced axis)
// is written to *argmax_out when provided.
template <class T>
Tensor<T> reduce_max(const Tensor<T>& x, int64_t axis, std::vector<int64_t>* argmax_out = nullptr) {
  detail::check_axis("reduce_max", axis, x.shape().size());
  auto sp = detail::axis_split(x.shape(), axis);
  Shape out_shape;
  for (size_t d = 0; d < x.shape().size(); ++d)
    if (static_cast<int64_t>(d) != axis) out_shape.push_back(x.shape()[d]);
  std::vector<T> out(static_cast<size_t>(sp.outer * sp.inner));
  auto arg = std::make_shared<std::vector<int64_t>>(out.size());
  const T* xv = x.data().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      T best = xv[o * sp.n * sp.inner + in];
      int64_t bi = 0;
      for (int64_t j = 1; j < sp.n; ++j) {
        T v = xv[(o * sp.n + j) * sp.inner + in];
        if (v > best) {
          best = v;
          bi = j;
        }
      }
      out[o * sp.inner + in] = best;
      (*arg)[o * sp.inner + in] = bi;
    }
  if (argmax_out) *argmax_out = *arg;
  auto xn = x.node();
  return detail::make_op<T>(out_shape, std::move(out), {xn}, [xn, arg, sp](Node<T>& nd) {
    xn->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        int64_t j = (*arg)[o * sp.inner + in];
        xn->grad[(o * sp.n + j) * sp.inner + in] += nd.grad[o * sp.inner + in];
      }
  });
}

namespace detail {

// Sum over one axis (or all elements when axis is nullopt) using
// order-invariant accumulation.
template <class T>
Tensor<T> reduce_sum_impl(const char* op, const Tensor<T>& x, std::optional<int64_t> axis,
                          double denom) {
  const T* xv = x.data().data();
  auto xn = x.node();
  T scale_back = static_cast<T>(1.0 / denom);
  if (!axis) {
    std::vector<double> scratch(x.data().begin(), x.data().end());
    T total = static_cast<T>(sorted_sum(scratch) / denom);
    return make_op<T>({}, {total}, {xn}, [xn, scale_back](Node<T>& nd) {
      xn->ensure_grad();
      T g = nd.grad[0] * scale_back;
      for (auto& v : xn->grad) v += g;
    });
  }
  check_axis(op, *axis, x.shape().size());
  auto sp = axis_split(x.shape(), *axis);
  Shape out_shape;
  for (size_t d = 0; d < x.shape().size(); ++d)
    if (static_cast<int64_t>(d) != *axis) out_shape.push_back(x.shape()[d]);
  std::vector<T> out(static_cast<size_t>(sp.outer * sp.inner));
  std::vector<double> scratch(static_cast<size_t>(sp.n));
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      for (int64_t j = 0; j < sp.n; ++j)
        scratch[static_cast<size_t>(j)] = static_cast<double>(xv[(o * sp.n + j) * sp.inner + in]);
      out[o * sp.inner + in] = static_cast<T>(sorted_sum(scratch) / denom);
    }
  return make_op<T>(out_shape, std::move(out), {xn}, [xn, sp, scale_back](Node<T>& nd) {
    xn->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        T g = nd.grad[o * sp.inner + in] * scale_back;
        for (int64_t j = 0; j < sp.n; ++j) xn->grad[(o * sp.n + j) * sp.inner + in] += g;
      }
  });
}

}  // namespace detail

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::optional<int64_t> axis = std::nullopt) {
  return detail::reduce_sum_impl("reduce_sum", x, axis, 1.0);
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::optional<int64_t> axis = std::nullopt) {
  double n = axis ? static_cast<double>(x.shape()[static_cast<size_t>(*axis)])
                  : static_cast<double>(x.size());
  return detail::reduce_sum_impl("reduce_mean", x, axis, n);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis) {
  detail::check_axis("softmax", axis, x.shape().size());
  auto sp = detail::axis_split(x.shape(), axis);
  const T* xv = x.data().data();
  std::vector<T> out(x.data().size());
  std::vector<double> scratch(static_cast<size_t>(sp.n));
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      T mx = xv[o * sp.n * sp.inner + in];
      for (int64_t j = 1; j < sp.n; ++j) mx = std::max(mx, xv[(o * sp.n + j) * sp.inner + in]);
      for (int64_t j = 0; j < sp.n; ++j)
        scratch[static_cast<size_t>(j)] =
            std::exp(static_cast<double>(xv[(o * sp.n + j) * sp.inner + in] - mx));
      std::vector<double> terms = scratch;
      double denom = sorted_sum(terms);
      for (int64_t j = 0; j < sp.n; ++j)
        out[(o * sp.n + j) * sp.inner + in] = static_cast<T>(scratch[static_cast<size_t>(j)] / denom);
    }
  auto xn = x.node();
  auto yv = std::make_shared<std::vector<T>>(out);
  return detail::make_op<T>(x.shape(), std::move(out), {xn}, [xn, yv, sp](Node<T>& nd) {
    xn->ensure_grad();
    const std::vector<T>& y = *yv;
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        T dot = T(0);
        for (int64_t j = 0; j < sp.n; ++j) {
          size_t ix = static_cast<size_t>((o * sp.n + j) * sp.inner + in);
          dot += nd.grad[ix] * y[ix];
        }
        for (int64_t j = 0; j < sp.n; ++j) {
          size_t ix = static_cast<size_t>((o * sp.n + j) * sp.inner + in);
          xn->grad[ix] += y[ix] * (nd.grad[ix] - dot);
        }
      }
  });
}

// y = x / (eps + sum |x|) along `axis`.
template <class T>
Tensor<T> l1_normalize(const Tensor<T>& x, int64_t axis, double eps = 1e-12) {
  detail::check_axis("l1_normalize", axis, x.shape().size());
  auto sp = detail::axis_split(x.shape(), axis);
  const T* xv = x.data().data();
  std::vector<T> out(x.data().size());
  auto sums = std::make_shared<std::vector<double>>(static_cast<size_t>(sp.outer * sp.inner));
  std::vector<double> scratch(static_cast<size_t>(sp.n));
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      for (int64_t j = 0; j < sp.n; ++j)
        scratch[static_cast<size_t>(j)] =
            std::abs(static_cast<double>(xv[(o * sp.n + j) * sp.inner + in]));
      double s = sorted_sum(scratch) + eps;
      (*sums)[o * sp.inner + in] = s;
      for (int64_t j = 0; j < sp.n; ++j) {
        size_t ix = static_cast<size_t>((o * sp.n + j) * sp.inner + in);
        out[ix] = static_cast<T>(static_cast<double>(xv[ix]) / s);
      }
    }
  auto xn = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), {xn}, [xn, sums, sp](Node<T>& nd) {
    xn->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        double s = (*sums)[o * sp.inner + in];
        double dot = 0.0;
        for (int64_t j = 0; j < sp.n; ++j) {
          size_t ix = static_cast<size_t>((o * sp.n + j) * sp.inner + in);
          dot += static_cast<double>(nd.grad[ix]) * static_cast<double>(xn->value[ix]);
        }
        for (int64_t j = 0; j < sp.n; ++j) {
          size_t ix = static_cast<size_t>((o * sp.n + j) * sp.inner + in);
          double xi = static_cast<double>(xn->value[ix]);
          double sgn = xi > 0 ? 1.0 : (xi < 0 ? -1.0 : 0.0);
          xn->grad[ix] += static_cast<T>(static_cast<double>(nd.grad[ix]) / s - dot / (s * s) * sgn);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Batch norm and dropout

template <class T>
struct BNState {
  std::vector<T> running_mean, running_var;
  void init(int64_t channels) {
    running_mean.assign(static_cast<size_t>(channels), T(0));
    running_var.assign(static_cast<size_t>(channels), T(1));
  }
};

// Batch norm over the row axis of an R x C tensor. Train mode uses batch
// statistics (order-invariant sums) and updates the running stats as
// running <- momentum * running + (1 - momentum) * batch.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BNState<T>& state, bool train, double momentum = 0.9, double eps = 1e-5) {
  if (x.rank() != 2) throw ShapeError("batch_norm: expected rank-2 input, got " + shape_str(x.shape()));
  const int64_t r = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c)
    throw ShapeError("batch_norm: gamma/beta width mismatch for " + shape_str(x.shape()));
  if (static_cast<int64_t>(state.running_mean.size()) != c) state.init(c);

  const T* xv = x.data().data();
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  auto ivar = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  std::vector<double> var(static_cast<size_t>(c));
  std::vector<double> scratch(static_cast<size_t>(r));
  if (train) {
    for (int64_t j = 0; j < c; ++j) {
      for (int64_t i = 0; i < r; ++i) scratch[static_cast<size_t>(i)] = static_cast<double>(xv[i * c + j]);
      std::vector<double> tmp = scratch;
      double m = sorted_sum(tmp) / static_cast<double>(r);
      for (int64_t i = 0; i < r; ++i) {
        double d = static_cast<double>(xv[i * c + j]) - m;
        scratch[static_cast<size_t>(i)] = d * d;
      }
      double v = sorted_sum(scratch) / static_cast<double>(r);
      (*mean)[j] = m;
      var[static_cast<size_t>(j)] = v;
      (*ivar)[j] = 1.0 / std::sqrt(v + eps);
      state.running_mean[j] = static_cast<T>(momentum * static_cast<double>(state.running_mean[j]) +
                                             (1.0 - momentum) * m);
      state.running_var[j] = static_cast<T>(momentum * static_cast<double>(state.running_var[j]) +
                                            (1.0 - momentum) * v);
    }
  } else {
    for (int64_t j = 0; j < c; ++j) {
      (*mean)[j] = static_cast<double>(state.running_mean[j]);
      (*ivar)[j] = 1.0 / std::sqrt(static_cast<double>(state.running_var[j]) + eps);
    }
  }
  std::vector<T> out(static_cast<size_t>(r * c));
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double xhat = (static_cast<double>(xv[i * c + j]) - (*mean)[j]) * (*ivar)[j];
      out[i * c + j] = static_cast<T>(static_cast<double>(gv[j]) * xhat + static_cast<double>(bv[j]));
    }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_op<T>(
      {r, c}, std::move(out), {xn, gn, bn}, [xn, gn, bn, mean, ivar, r, c, train](Node<T>& nd) {
        const T* xv = xn->value.data();
        const T* gv = gn->value.data();
        if (gn->needs_grad) gn->ensure_grad();
        if (bn->needs_grad) bn->ensure_grad();
        if (gn->needs_grad || bn->needs_grad) {
          for (int64_t j = 0; j < c; ++j) {
            double dg = 0.0, db = 0.0;
            for (int64_t i = 0; i < r; ++i) {
              double xhat = (static_cast<double>(xv[i * c + j]) - (*mean)[j]) * (*ivar)[j];
              dg += static_cast<double>(nd.grad[i * c + j]) * xhat;
              db += static_cast<double>(nd.grad[i * c + j]);
            }
            if (gn->needs_grad) gn->grad[j] += static_cast<T>(dg);
            if (bn->needs_grad) bn->grad[j] += static_cast<T>(db);
          }
        }
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        if (!train) {
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              xn->grad[i * c + j] += static_cast<T>(static_cast<double>(nd.grad[i * c + j]) *
                                                    static_cast<double>(gv[j]) * (*ivar)[j]);
          return;
        }
        // Full train-mode backward including the mean/var dependence.
        for (int64_t j = 0; j < c; ++j) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int64_t i = 0; i < r; ++i) {
            double dxhat = static_cast<double>(nd.grad[i * c + j]) * static_cast<double>(gv[j]);
            double xhat = (static_cast<double>(xv[i * c + j]) - (*mean)[j]) * (*ivar)[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          double rn = static_cast<double>(r);
          for (int64_t i = 0; i < r; ++i) {
            double dxhat = static_cast<double>(nd.grad[i * c + j]) * static_cast<double>(gv[j]);
            double xhat = (static_cast<double>(xv[i * c + j]) - (*mean)[j]) * (*ivar)[j];
            double dx = (*ivar)[j] * (dxhat - sum_dxhat / rn - xhat * sum_dxhat_xhat / rn);
            xn->grad[i * c + j] += static_cast<T>(dx);
          }
        }
      });
}

// Inverted dropout; the mask is drawn once from the supplied RNG and
// recorded so backward matches forward and replay is bit-exact.
template <class T>
Tensor<T> dropout_with_mask(const Tensor<T>& x, double rate, std::shared_ptr<std::vector<uint8_t>> mask) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("dropout: rate must be in [0,1)");
  T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = (*mask)[i] ? xv[i] * inv_keep : T(0);
  auto xn = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), {xn}, [xn, mask, inv_keep](Node<T>& nd) {
    xn->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i)
      if ((*mask)[i]) xn->grad[i] += nd.grad[i] * inv_keep;
  });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, Rng& rng,
                  std::shared_ptr<std::vector<uint8_t>>* mask_out = nullptr) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<uint8_t>>(x.data().size());
  for (auto& m : *mask) m = rng.uniform() >= rate ? 1 : 0;
  if (mask_out) *mask_out = mask;
  return dropout_with_mask(x, rate, mask);
}

}  // namespace uae
