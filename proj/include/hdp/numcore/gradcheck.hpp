#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::nc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  /// First index whose error exceeds the tolerance, -1 when all pass.
  std::int64_t failing_index = -1;
  double tolerance = 0.0;
  std::int64_t checked = 0;
  bool passed() const { return failing_index < 0; }
};

/// Scalar function built on a fresh graph from a leaf holding the input.
template <typename T>
using ScalarFn = std::function<Var<T>(Graph<T>&, Var<T>)>;

/// Compares the reverse-mode gradient of f at x against central differences.
///
/// Per element the error is |ad - fd| / max(|ad|, |fd|, floor), where floor is
/// 1e-3 of the largest finite-difference magnitude (plus 1e-10) so that
/// components that are tiny relative to the gradient's scale are judged on an
/// absolute basis. `probe` restricts the check to a subset of indices.
template <typename T>
GradCheckReport finite_diff_check(const ScalarFn<T>& f, const Tensor<T>& x, double h = 1e-3,
                                  double tolerance = 1e-4,
                                  std::optional<std::vector<std::int64_t>> probe = std::nullopt) {
  Tensor<T> analytic;
  {
    Graph<T> g;
    Var<T> xv = g.leaf(x);
    Var<T> out = f(g, xv);
    auto grads = g.backward(out);
    analytic = std::move(grads.at(xv.id()));
  }
  auto eval = [&](const Tensor<T>& pt) {
    Graph<T> g(false);
    Var<T> xv = g.constant(pt);
    return static_cast<double>(f(g, xv).value().item());
  };
  std::vector<std::int64_t> idx;
  if (probe) {
    idx = *probe;
  } else {
    idx.resize(static_cast<std::size_t>(x.size()));
    for (std::int64_t i = 0; i < x.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  }
  std::vector<double> numeric(idx.size());
  Tensor<T> pt = x;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto i = idx[n];
    const T orig = pt[i];
    pt[i] = static_cast<T>(orig + h);
    const double fp = eval(pt);
    pt[i] = static_cast<T>(orig - h);
    const double fm = eval(pt);
    pt[i] = orig;
    numeric[n] = (fp - fm) / (2.0 * h);
  }
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  const double floor = 1e-3 * scale + 1e-10;

  GradCheckReport rep;
  rep.tolerance = tolerance;
  rep.checked = static_cast<std::int64_t>(idx.size());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const double a = static_cast<double>(analytic[idx[n]]);
    const double d = numeric[n];
    const double rel = std::abs(a - d) / std::max({std::abs(a), std::abs(d), floor});
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = idx[n];
    }
    if (rel > tolerance && rep.failing_index < 0) rep.failing_index = idx[n];
  }
  return rep;
}

}  // namespace hdp::nc
