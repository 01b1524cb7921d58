#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "hdp/error.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/tensor.hpp"

// Primitive differentiable ops. Every op computes its value eagerly and
// records a closure that maps the upstream gradient onto its inputs.

namespace hdp::nc {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

struct AxisView {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

inline AxisView axis_view(const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("axis out of range");
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  v.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

inline int norm_axis(int axis, int rank) { return axis < 0 ? axis + rank : axis; }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go) {
    for (int id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      auto& gr = g.grad(id);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i];
    }
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go) {
    if (g.requires_grad(ia)) {
      auto& gr = g.grad(ia);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      auto& gr = g.grad(ib);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] -= go[i];
    }
  }, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    if (g.requires_grad(ia)) {
      auto& gr = g.grad(ia);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      auto& gr = g.grad(ib);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i] * av[i];
    }
  }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, s](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += s * go[i];
  }, "scale");
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(ia);
    auto& gr = g.grad(ia);
    for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += T{2} * av[i] * go[i];
  }, "square");
}

/// Gaussian error linear unit, exact (erf) form.
template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  for (auto& v : out.data()) v = T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2));
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<T>& g, const Tensor<T>& go) {
    constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
    const auto& av = g.value(ia);
    auto& gr = g.grad(ia);
    for (std::int64_t i = 0; i < gr.size(); ++i) {
      const T x = av[i];
      const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * x * x);
      gr[i] += go[i] * (cdf + x * pdf);
    }
  }, "gelu");
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (T v : a.value().data()) acc += v;
  const int ia = a.id();
  return a.graph().record(Tensor<T>::scalar(acc), {ia}, [ia](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    const T s = go[0];
    for (auto& v : gr.data()) v += s;
  }, "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  return mean(square(sub(a, b)));
}

/// Maximum along one axis (the axis is removed). Gradient flows to the first
/// maximal element.
template <typename T>
Var<T> max_axis(Var<T> a, int axis) {
  const auto& av = a.value();
  const auto v = detail::axis_view(av.shape(), axis);
  if (v.n == 0) throw ShapeError("max over empty axis");
  Shape os = av.shape();
  os.erase(os.begin() + detail::norm_axis(axis, av.rank()));
  Tensor<T> out(os);
  std::vector<std::int64_t> arg(static_cast<std::size_t>(v.outer * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      std::int64_t best = 0;
      T bv = av[o * v.n * v.inner + in];
      for (std::int64_t k = 1; k < v.n; ++k) {
        const T x = av[(o * v.n + k) * v.inner + in];
        if (x > bv) {
          bv = x;
          best = k;
        }
      }
      out[o * v.inner + in] = bv;
      arg[static_cast<std::size_t>(o * v.inner + in)] = best;
    }
  }
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, v, arg = std::move(arg)](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        const auto k = arg[static_cast<std::size_t>(o * v.inner + in)];
        gr[(o * v.n + k) * v.inner + in] += go[o * v.inner + in];
      }
    }
  }, "max_axis");
}

// ------------------------------------------------------------ shape handling

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i];
  }, "reshape");
}

/// Swaps the last two axes: [..., A, B] -> [..., B, A].
template <typename T>
Var<T> transpose_last2(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  const std::int64_t rows = av.dim(-2), cols = av.dim(-1);
  const std::int64_t batch = av.size() / std::max<std::int64_t>(1, rows * cols);
  Shape os = av.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor<T> out(os);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < rows; ++i) {
      for (std::int64_t j = 0; j < cols; ++j) {
        out[(b * cols + j) * rows + i] = av[(b * rows + i) * cols + j];
      }
    }
  }
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, batch, rows, cols](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) {
          gr[(b * rows + i) * cols + j] += go[(b * cols + j) * rows + i];
        }
      }
    }
  }, "transpose");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int rank = parts[0].value().rank();
  axis = detail::norm_axis(axis, rank);
  Shape os = parts[0].shape();
  std::int64_t total = 0;
  std::vector<detail::AxisView> views;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[static_cast<std::size_t>(d)] != os[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat extent mismatch " + to_string(s) + " vs " + to_string(os));
      }
    }
    views.push_back(detail::axis_view(s, axis));
    total += s[static_cast<std::size_t>(axis)];
  }
  os[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out(os);
  const auto ov = detail::axis_view(os, axis);
  std::vector<int> ids;
  std::vector<std::int64_t> starts;
  std::int64_t start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].value();
    const auto& v = views[p];
    for (std::int64_t o = 0; o < v.outer; ++o) {
      std::copy_n(pv.ptr() + o * v.n * v.inner, v.n * v.inner,
                  out.ptr() + (o * ov.n + start) * ov.inner);
    }
    ids.push_back(parts[p].id());
    starts.push_back(start);
    start += v.n;
  }
  return parts[0].graph().record(std::move(out), ids,
      [ids, starts, views, ov](Graph<T>& g, const Tensor<T>& go) {
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!g.requires_grad(ids[p])) continue;
          auto& gr = g.grad(ids[p]);
          const auto& v = views[p];
          for (std::int64_t o = 0; o < v.outer; ++o) {
            const T* src = go.ptr() + (o * ov.n + starts[p]) * ov.inner;
            T* dst = gr.ptr() + o * v.n * v.inner;
            for (std::int64_t i = 0; i < v.n * v.inner; ++i) dst[i] += src[i];
          }
        }
      }, "concat");
}

/// Nearest-neighbour upsampling along the last axis.
template <typename T>
Var<T> upsample_nearest(Var<T> a, int factor) {
  const auto& av = a.value();
  const std::int64_t len = av.dim(-1);
  const std::int64_t rows = av.size() / std::max<std::int64_t>(1, len);
  Shape os = av.shape();
  os.back() *= factor;
  Tensor<T> out(os);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t t = 0; t < len * factor; ++t) out[r * len * factor + t] = av[r * len + t / factor];
  }
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, rows, len, factor](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(ia);
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t t = 0; t < len * factor; ++t) gr[r * len + t / factor] += go[r * len * factor + t];
    }
  }, "upsample");
}

/// Row lookup: out[i] = table[indices[i]]. Backward scatters into the table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::int64_t> indices) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows expects a 2-D table");
  const std::int64_t width = tv.dim(1);
  Tensor<T> out(Shape{static_cast<std::int64_t>(indices.size()), width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.dim(0)) throw ArgumentError("gather index out of range");
    std::copy_n(tv.ptr() + indices[i] * width, width, out.ptr() + static_cast<std::int64_t>(i) * width);
  }
  const int it = table.id();
  return table.graph().record(std::move(out), {it}, [it, width, indices = std::move(indices)](Graph<T>& g, const Tensor<T>& go) {
    auto& gr = g.grad(it);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (std::int64_t j = 0; j < width; ++j) gr[indices[i] * width + j] += go[static_cast<std::int64_t>(i) * width + j];
    }
  }, "gather_rows");
}

/// Per-row selection: row b of the result is `fallback` where mask[b] is set,
/// otherwise row b of x. x is [B, F], fallback is [F].
template <typename T>
Var<T> select_rows(Var<T> x, Var<T> fallback, std::vector<bool> mask) {
  const auto& xv = x.value();
  const auto& fv = fallback.value();
  if (xv.rank() != 2 || fv.size() != xv.dim(1) || static_cast<std::int64_t>(mask.size()) != xv.dim(0)) {
    throw ShapeError("select_rows shape mismatch");
  }
  const std::int64_t width = xv.dim(1);
  Tensor<T> out = xv;
  for (std::size_t b = 0; b < mask.size(); ++b) {
    if (mask[b]) std::copy_n(fv.ptr(), width, out.ptr() + static_cast<std::int64_t>(b) * width);
  }
  const int ix = x.id(), iff = fallback.id();
  return x.graph().record(std::move(out), {ix, iff}, [ix, iff, width, mask = std::move(mask)](Graph<T>& g, const Tensor<T>& go) {
    for (std::size_t b = 0; b < mask.size(); ++b) {
      const int target = mask[b] ? iff : ix;
      if (!g.requires_grad(target)) continue;
      auto& gr = g.grad(target);
      const std::int64_t off = mask[b] ? 0 : static_cast<std::int64_t>(b) * width;
      for (std::int64_t j = 0; j < width; ++j) gr[off + j] += go[static_cast<std::int64_t>(b) * width + j];
    }
  }, "select_rows");
}

// ------------------------------------------------------------ linear algebra

/// a [M, K] times b [K, N], or b [N, K] transposed when transpose_b is set.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) throw ShapeError("matmul expects 2-D operands");
  const std::int64_t m = av.dim(0), k = av.dim(1);
  const std::int64_t n = transpose_b ? bv.dim(0) : bv.dim(1);
  if ((transpose_b ? bv.dim(1) : bv.dim(0)) != k) {
    throw ShapeError("matmul inner mismatch " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Tensor<T> out(Shape{m, n});
  ConstMatMap<T> A(av.ptr(), m, k);
  MatMap<T> C(out.ptr(), m, n);
  if (transpose_b) {
    ConstMatMap<T> B(bv.ptr(), n, k);
    C.noalias() = A * B.transpose();
  } else {
    ConstMatMap<T> B(bv.ptr(), k, n);
    C.noalias() = A * B;
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, m, n, k, transpose_b](Graph<T>& g, const Tensor<T>& go) {
    ConstMatMap<T> G(go.ptr(), m, n);
    if (g.requires_grad(ia)) {
      MatMap<T> GA(g.grad(ia).ptr(), m, k);
      if (transpose_b) {
        GA.noalias() += G * ConstMatMap<T>(g.value(ib).ptr(), n, k);
      } else {
        GA.noalias() += G * ConstMatMap<T>(g.value(ib).ptr(), k, n).transpose();
      }
    }
    if (g.requires_grad(ib)) {
      ConstMatMap<T> A(g.value(ia).ptr(), m, k);
      if (transpose_b) {
        MatMap<T> GB(g.grad(ib).ptr(), n, k);
        GB.noalias() += G.transpose() * A;
      } else {
        MatMap<T> GB(g.grad(ib).ptr(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  }, "matmul");
}

/// Adds b (length = extent of `axis`) broadcast over every other axis.
template <typename T>
Var<T> bias_add(Var<T> x, Var<T> b, int axis) {
  const auto& xv = x.value();
  const auto v = detail::axis_view(xv.shape(), axis);
  if (b.value().size() != v.n) throw ShapeError("bias_add: bias length mismatch");
  Tensor<T> out = xv;
  const auto& bv = b.value();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t c = 0; c < v.n; ++c) {
      T* row = out.ptr() + (o * v.n + c) * v.inner;
      for (std::int64_t i = 0; i < v.inner; ++i) row[i] += bv[c];
    }
  }
  const int ix = x.id(), ib = b.id();
  return x.graph().record(std::move(out), {ix, ib}, [ix, ib, v](Graph<T>& g, const Tensor<T>& go) {
    if (g.requires_grad(ix)) {
      auto& gr = g.grad(ix);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      auto& gb = g.grad(ib);
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t c = 0; c < v.n; ++c) {
          const T* row = go.ptr() + (o * v.n + c) * v.inner;
          T acc{0};
          for (std::int64_t i = 0; i < v.inner; ++i) acc += row[i];
          gb[c] += acc;
        }
      }
    }
  }, "bias_add");
}

/// x + y where y's shape is a leading prefix of x's shape; y is broadcast over
/// the trailing axes (e.g. [B, C, T] + [B, C]).
template <typename T>
Var<T> add_prefix(Var<T> x, Var<T> y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.begin())) {
    throw ShapeError("add_prefix: " + to_string(ys) + " is not a prefix of " + to_string(xs));
  }
  const std::int64_t outer = y.value().size();
  const std::int64_t inner = x.value().size() / std::max<std::int64_t>(1, outer);
  Tensor<T> out = x.value();
  const auto& yv = y.value();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += yv[o];
  }
  const int ix = x.id(), iy = y.id();
  return x.graph().record(std::move(out), {ix, iy}, [ix, iy, outer, inner](Graph<T>& g, const Tensor<T>& go) {
    if (g.requires_grad(ix)) {
      auto& gr = g.grad(ix);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += go[i];
    }
    if (g.requires_grad(iy)) {
      auto& gy = g.grad(iy);
      for (std::int64_t o = 0; o < outer; ++o) {
        T acc{0};
        for (std::int64_t i = 0; i < inner; ++i) acc += go[o * inner + i];
        gy[o] += acc;
      }
    }
  }, "add_prefix");
}

/// x @ W^T + b for x [B, in], W [out, in], b [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return bias_add(matmul(x, w, true), b, -1);
}

/// 1-D cross-correlation. x [B, Cin, L], w [Cout, Cin, K], zero padding.
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, int stride = 1, int padding = 0) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 3) throw ShapeError("conv1d expects [B,C,L] input and [O,C,K] weight");
  const std::int64_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const std::int64_t cout = wv.dim(0), ksize = wv.dim(2);
  if (wv.dim(1) != cin) throw ShapeError("conv1d channel mismatch");
  const std::int64_t lout = (len + 2 * padding - ksize) / stride + 1;
  if (lout <= 0) throw ShapeError("conv1d output length non-positive");
  const std::int64_t rows = cin * ksize, cols = batch * lout;

  // im2col: col[(c,k), (b,t)] = x[b, c, t*stride + k - padding]
  auto build_col = [=](const Tensor<T>& xin) {
    Tensor<T> col(Shape{rows, cols});
    for (std::int64_t c = 0; c < cin; ++c) {
      for (std::int64_t k = 0; k < ksize; ++k) {
        T* dst = col.ptr() + (c * ksize + k) * cols;
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* src = xin.ptr() + (b * cin + c) * len;
          for (std::int64_t t = 0; t < lout; ++t) {
            const std::int64_t s = t * stride + k - padding;
            dst[b * lout + t] = (s >= 0 && s < len) ? src[s] : T{0};
          }
        }
      }
    }
    return col;
  };
  Tensor<T> col = build_col(xv);
  RowMat<T> prod = ConstMatMap<T>(wv.ptr(), cout, rows) * ConstMatMap<T>(col.ptr(), rows, cols);
  Tensor<T> out(Shape{batch, cout, lout});
  for (std::int64_t o = 0; o < cout; ++o) {
    for (std::int64_t b = 0; b < batch; ++b) {
      std::copy_n(prod.data() + o * cols + b * lout, lout, out.ptr() + (b * cout + o) * lout);
    }
  }
  const int ix = x.id(), iw = w.id();
  return x.graph().record(std::move(out), {ix, iw},
      [=, col = std::move(col)](Graph<T>& g, const Tensor<T>& go) {
        RowMat<T> gmat(cout, cols);
        for (std::int64_t o = 0; o < cout; ++o) {
          for (std::int64_t b = 0; b < batch; ++b) {
            std::copy_n(go.ptr() + (b * cout + o) * lout, lout, gmat.data() + o * cols + b * lout);
          }
        }
        if (g.requires_grad(iw)) {
          MatMap<T> GW(g.grad(iw).ptr(), cout, rows);
          GW.noalias() += gmat * ConstMatMap<T>(col.ptr(), rows, cols).transpose();
        }
        if (g.requires_grad(ix)) {
          RowMat<T> gcol = ConstMatMap<T>(g.value(iw).ptr(), cout, rows).transpose() * gmat;
          auto& gx = g.grad(ix);
          for (std::int64_t c = 0; c < cin; ++c) {
            for (std::int64_t k = 0; k < ksize; ++k) {
              const T* src = gcol.data() + (c * ksize + k) * cols;
              for (std::int64_t b = 0; b < batch; ++b) {
                T* dst = gx.ptr() + (b * cin + c) * len;
                for (std::int64_t t = 0; t < lout; ++t) {
                  const std::int64_t s = t * stride + k - padding;
                  if (s >= 0 && s < len) dst[s] += src[b * lout + t];
                }
              }
            }
          }
        }
      }, "conv1d");
}

/// Group normalization over [B, C, L] with per-channel affine parameters.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T{1e-5}) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("group_norm expects [B,C,L]");
  const std::int64_t batch = xv.dim(0), ch = xv.dim(1), len = xv.dim(2);
  if (ch % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.value().size() != ch || beta.value().size() != ch) throw ShapeError("group_norm affine size");
  const std::int64_t cpg = ch / groups, count = cpg * len;
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(batch * groups));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t off = (b * ch + gi * cpg) * len;
      T mu{0};
      for (std::int64_t i = 0; i < count; ++i) mu += xv[off + i];
      mu /= static_cast<T>(count);
      T var{0};
      for (std::int64_t i = 0; i < count; ++i) var += (xv[off + i] - mu) * (xv[off + i] - mu);
      var /= static_cast<T>(count);
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(b * groups + gi)] = is;
      for (std::int64_t i = 0; i < count; ++i) xhat[off + i] = (xv[off + i] - mu) * is;
    }
  }
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const std::int64_t off = (b * ch + c) * len;
      for (std::int64_t t = 0; t < len; ++t) out[off + t] = gv[c] * xhat[off + t] + bv[c];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g, const Tensor<T>& go) {
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
          for (std::int64_t c = 0; c < ch; ++c) {
            T sg{0}, sb{0};
            for (std::int64_t b = 0; b < batch; ++b) {
              const std::int64_t off = (b * ch + c) * len;
              for (std::int64_t t = 0; t < len; ++t) {
                sg += go[off + t] * xhat[off + t];
                sb += go[off + t];
              }
            }
            if (g.requires_grad(ig)) g.grad(ig)[c] += sg;
            if (g.requires_grad(ib)) g.grad(ib)[c] += sb;
          }
        }
        if (!g.requires_grad(ix)) return;
        const auto& gv = g.value(ig);
        auto& gx = g.grad(ix);
        std::vector<T> dxhat(static_cast<std::size_t>(count));
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t gi = 0; gi < groups; ++gi) {
            const std::int64_t off = (b * ch + gi * cpg) * len;
            T s1{0}, s2{0};
            for (std::int64_t i = 0; i < count; ++i) {
              const std::int64_t c = gi * cpg + i / len;
              const T d = go[off + i] * gv[c];
              dxhat[static_cast<std::size_t>(i)] = d;
              s1 += d;
              s2 += d * xhat[off + i];
            }
            const T is = inv_std[static_cast<std::size_t>(b * groups + gi)];
            const T n = static_cast<T>(count);
            for (std::int64_t i = 0; i < count; ++i) {
              gx[off + i] += is / n * (n * dxhat[static_cast<std::size_t>(i)] - s1 - xhat[off + i] * s2);
            }
          }
        }
      }, "group_norm");
}

// --------------------------------------------------------------------- losses

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::int64_t> targets) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || static_cast<std::int64_t>(targets.size()) != lv.dim(0)) {
    throw ShapeError("softmax_cross_entropy expects [B,K] logits and B targets");
  }
  const std::int64_t rows = lv.dim(0), k = lv.dim(1);
  Tensor<T> probs(lv.shape());
  T loss{0};
  for (std::int64_t r = 0; r < rows; ++r) {
    if (targets[static_cast<std::size_t>(r)] < 0 || targets[static_cast<std::size_t>(r)] >= k) {
      throw ArgumentError("cross-entropy target out of range");
    }
    const T* row = lv.ptr() + r * k;
    const T mx = *std::max_element(row, row + k);
    T z{0};
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T lz = std::log(z) + mx;
    for (std::int64_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lz);
    loss += lz - row[targets[static_cast<std::size_t>(r)]];
  }
  loss /= static_cast<T>(rows);
  const int il = logits.id();
  return logits.graph().record(Tensor<T>::scalar(loss), {il},
      [il, rows, k, probs = std::move(probs), targets = std::move(targets)](Graph<T>& g, const Tensor<T>& go) {
        auto& gr = g.grad(il);
        const T s = go[0] / static_cast<T>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < k; ++j) gr[r * k + j] += s * probs[r * k + j];
          gr[r * k + targets[static_cast<std::size_t>(r)]] -= s;
        }
      }, "softmax_cross_entropy");
}

}  // namespace hdp::nc
