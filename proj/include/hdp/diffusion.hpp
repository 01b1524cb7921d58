#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/error.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::diff {

using nc::Tensor;
using nc::TensorF;

enum class ScheduleKind { Cosine, Linear, Explicit };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Explicit: return "explicit";
  }
  return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "explicit") return ScheduleKind::Explicit;
  throw FormatError("unknown schedule kind '" + s + "'");
}

struct ScheduleParams {
  double cosine_offset = 0.008;  // s in the squared-cosine alpha-bar curve
  double max_beta = 0.999;
  double beta_start = 1e-4;      // linear schedule
  double beta_end = 0.02;
  std::vector<double> betas;     // explicit schedule
};

/// Variance schedule. Arrays are indexed by k - 1 for diffusion step k.
struct DiffusionSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::Cosine;
  ScheduleParams params;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  double beta_at(int k) const { return beta[static_cast<std::size_t>(k - 1)]; }
  /// alpha_bar at step k, with alpha_bar(0) = 1.
  double alpha_bar_at(int k) const { return k == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(k - 1)]; }
  /// Posterior variance of q(x^{k-1} | x^k, x^0).
  double posterior_variance(int k) const {
    return (1.0 - alpha_bar_at(k - 1)) / (1.0 - alpha_bar_at(k)) * beta_at(k);
  }
};

inline constexpr double kTerminalAlphaBarBound = 1e-3;

inline DiffusionSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::Cosine, ScheduleParams params = {}) {
  if (steps < 1) throw ArgumentError("schedule needs at least one step");
  DiffusionSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.beta.resize(static_cast<std::size_t>(steps));
  switch (kind) {
    case ScheduleKind::Cosine: {
      auto f = [&](double t) {
        const double c = std::cos((t / steps + params.cosine_offset) / (1.0 + params.cosine_offset) * std::numbers::pi / 2);
        return c * c;
      };
      for (int k = 1; k <= steps; ++k) {
        const double b = 1.0 - f(k) / f(k - 1);
        s.beta[static_cast<std::size_t>(k - 1)] = std::min(b, params.max_beta);
      }
      break;
    }
    case ScheduleKind::Linear:
      for (int k = 1; k <= steps; ++k) {
        const double t = steps == 1 ? 0.0 : static_cast<double>(k - 1) / (steps - 1);
        s.beta[static_cast<std::size_t>(k - 1)] = params.beta_start + t * (params.beta_end - params.beta_start);
      }
      break;
    case ScheduleKind::Explicit:
      if (static_cast<int>(params.betas.size()) != steps) throw ArgumentError("explicit betas length != steps");
      s.beta = params.betas;
      break;
  }
  s.alpha_bar.resize(s.beta.size());
  double acc = 1.0;
  for (std::size_t i = 0; i < s.beta.size(); ++i) {
    if (!(s.beta[i] > 0.0 && s.beta[i] < 1.0)) throw ArgumentError("beta values must lie in (0, 1)");
    acc *= 1.0 - s.beta[i];
    s.alpha_bar[i] = acc;
  }
  if (!(s.alpha_bar.back() < kTerminalAlphaBarBound)) {
    throw ArgumentError("schedule leaves alpha_bar[K] = " + std::to_string(s.alpha_bar.back()) +
                        " >= 1e-3; the terminal distribution would not be near N(0, I)");
  }
  s.params = std::move(params);
  return s;
}

inline nlohmann::json schedule_to_json(const DiffusionSchedule& s) {
  nlohmann::json j{{"steps", s.steps}, {"kind", to_string(s.kind)},
                   {"cosine_offset", s.params.cosine_offset}, {"max_beta", s.params.max_beta},
                   {"beta_start", s.params.beta_start}, {"beta_end", s.params.beta_end}};
  if (s.kind == ScheduleKind::Explicit) j["betas"] = s.params.betas;
  return j;
}

inline DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  ScheduleParams p;
  p.cosine_offset = j.value("cosine_offset", p.cosine_offset);
  p.max_beta = j.value("max_beta", p.max_beta);
  p.beta_start = j.value("beta_start", p.beta_start);
  p.beta_end = j.value("beta_end", p.beta_end);
  if (j.contains("betas")) p.betas = j["betas"].get<std::vector<double>>();
  return make_schedule(j.at("steps").get<int>(), schedule_kind_from_string(j.at("kind").get<std::string>()), p);
}

/// A trajectory at diffusion step k.
struct NoisyTrajectory {
  TensorF values;  // [T, C]
  int step = 0;
};

inline void require_step(const DiffusionSchedule& s, int k, int lo) {
  if (k < lo || k > s.steps) {
    throw ArgumentError("diffusion step " + std::to_string(k) + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(s.steps) + "]");
  }
}

/// Closed-form q(x^k | x^0): sqrt(abar) x0 + sqrt(1 - abar) eps.
inline NoisyTrajectory forward_diffuse(const TensorF& x0, int k, const DiffusionSchedule& s, const TensorF& noise) {
  require_step(s, k, 1);
  nc::require_same_shape(x0.shape(), noise.shape(), "forward_diffuse");
  const double ab = s.alpha_bar_at(k);
  const auto a = static_cast<float>(std::sqrt(ab));
  const auto b = static_cast<float>(std::sqrt(1.0 - ab));
  NoisyTrajectory out{x0, k};
  for (std::int64_t i = 0; i < x0.size(); ++i) out.values[i] = a * x0[i] + b * noise[i];
  return out;
}

/// One reverse step using the x0 parameterization: the posterior mean of
/// q(x^{k-1} | x^k, x0_hat) plus the fixed posterior standard deviation times
/// `noise`. At k = 1 the posterior collapses and x0_hat is returned.
inline NoisyTrajectory ddpm_step(const TensorF& x0_hat, const NoisyTrajectory& xk, const DiffusionSchedule& s,
                                 const TensorF& noise) {
  require_step(s, xk.step, 1);
  nc::require_same_shape(x0_hat.shape(), xk.values.shape(), "ddpm_step");
  if (xk.step == 1) return NoisyTrajectory{x0_hat, 0};
  nc::require_same_shape(x0_hat.shape(), noise.shape(), "ddpm_step noise");
  const int k = xk.step;
  const double ab = s.alpha_bar_at(k), ab_prev = s.alpha_bar_at(k - 1), beta = s.beta_at(k);
  const auto c0 = static_cast<float>(std::sqrt(ab_prev) * beta / (1.0 - ab));
  const auto ck = static_cast<float>(std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab));
  const auto sd = static_cast<float>(std::sqrt(s.posterior_variance(k)));
  NoisyTrajectory out{TensorF(x0_hat.shape()), k - 1};
  for (std::int64_t i = 0; i < x0_hat.size(); ++i) {
    out.values[i] = c0 * x0_hat[i] + ck * xk.values[i] + sd * noise[i];
  }
  return out;
}

/// Fixed entries of a [T, C] trajectory.
struct InpaintMask {
  struct Entry {
    std::int64_t row;
    std::int64_t channel;
    float value;
  };
  std::vector<Entry> entries;

  void fix_row(std::int64_t row, std::span<const float> values) {
    for (std::size_t c = 0; c < values.size(); ++c) entries.push_back({row, static_cast<std::int64_t>(c), values[c]});
  }
  void apply(TensorF& traj) const {
    const std::int64_t width = traj.dim(1);
    for (const auto& e : entries) traj[e.row * width + e.channel] = e.value;
  }
  void validate(std::int64_t rows, std::int64_t channels) const {
    for (const auto& e : entries) {
      if (e.row < 0 || e.row >= rows || e.channel < 0 || e.channel >= channels) {
        throw ArgumentError("inpaint entry outside trajectory bounds");
      }
      if (!std::isfinite(e.value)) throw ArgumentError("inpaint value not finite");
    }
  }
};

/// x0-prediction callable: (x_k [T, C], k) -> x0_hat [T, C]. Context is bound
/// by the caller.
using Denoiser = std::function<TensorF(const TensorF&, int)>;

inline TensorF standard_normal(const nc::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  TensorF t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Full reverse chain from x^K ~ N(0, I) with the mask re-imposed before the
/// first step and after every step.
inline TensorF sample_with_inpainting(const Denoiser& denoiser, const InpaintMask& mask, const DiffusionSchedule& s,
                                      std::int64_t rows, std::int64_t channels, std::mt19937_64& rng) {
  mask.validate(rows, channels);
  const nc::Shape shape{rows, channels};
  NoisyTrajectory x{standard_normal(shape, rng), s.steps};
  mask.apply(x.values);
  while (x.step > 0) {
    TensorF x0_hat = denoiser(x.values, x.step);
    nc::require_same_shape(x0_hat.shape(), shape, "denoiser output");
    if (!x0_hat.all_finite()) throw NumericError("denoiser returned non-finite values at step " + std::to_string(x.step));
    TensorF noise = x.step > 1 ? standard_normal(shape, rng) : TensorF(shape);
    x = ddpm_step(x0_hat, x, s, noise);
    mask.apply(x.values);
  }
  return std::move(x.values);
}

/// Classifier-free guidance: uncond + w (cond - uncond).
inline TensorF cfg_combine(const TensorF& cond, const TensorF& uncond, float w) {
  nc::require_same_shape(cond.shape(), uncond.shape(), "cfg_combine");
  TensorF out(cond.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
  return out;
}

}  // namespace hdp::diff
