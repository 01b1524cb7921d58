#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hdp/error.hpp"
#include "hdp/numcore/params.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::nc {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Moment accumulators for decoupled-weight-decay Adam.
template <typename T>
struct OptState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  static OptState for_params(const ParamStore<T>& params, AdamWConfig cfg = {}) {
    OptState s;
    s.config = cfg;
    for (const auto& p : params) {
      s.m.emplace_back(p.value.shape(), T{0});
      s.v.emplace_back(p.value.shape(), T{0});
    }
    return s;
  }
};

/// One AdamW update in place. `lr_scale` multiplies the configured rate
/// (used by learning-rate schedules).
template <typename T>
void adamw_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, OptState<T>& state,
                double lr_scale = 1.0) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adamw_step: parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i].value.shape(), grads[i].shape(), "adamw_step");
    require_same_shape(params[i].value.shape(), state.m[i].shape(), "adamw_step state");
  }
  const auto& c = state.config;
  state.step += 1;
  const double lr = c.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T decay = static_cast<T>(1.0 - lr * c.weight_decay);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::int64_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      p[j] *= decay;
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

/// Rescales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads) {
      for (auto& x : g.data()) x *= s;
    }
  }
  return norm;
}

}  // namespace hdp::nc
