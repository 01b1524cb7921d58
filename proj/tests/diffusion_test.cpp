#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hdp/diffusion.hpp"

namespace diff = hdp::diff;
namespace nc = hdp::nc;
using nc::Shape;
using nc::TensorF;

namespace {

TensorF filled(Shape s, float v) { return TensorF(std::move(s), v); }

}  // namespace

TEST(Schedule, SingleStepExplicit) {
  diff::ScheduleParams p;
  p.betas = {0.9999};
  const auto s = diff::make_schedule(1, diff::ScheduleKind::Explicit, p);
  EXPECT_NEAR(s.alpha_bar[0], 1e-4, 1e-12);
}

TEST(Schedule, CosineDefaultMeetsTerminalBound) {
  const auto s = diff::make_schedule(100);
  EXPECT_LT(s.alpha_bar.back(), 1e-3);
  // Independent recomputation of the cumulative product from the betas.
  double acc = 1.0;
  for (int k = 1; k <= 100; ++k) {
    acc *= 1.0 - s.beta_at(k);
    EXPECT_NEAR(s.alpha_bar_at(k), acc, 1e-15);
  }
  for (int k = 1; k < 100; ++k) EXPECT_LT(s.alpha_bar_at(k + 1), s.alpha_bar_at(k));
}

TEST(Schedule, LinearAtHundredStepsIsRejected) {
  double acc = 1.0;
  for (int k = 0; k < 100; ++k) acc *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 99);
  EXPECT_NEAR(acc, 0.36, 0.01);
  EXPECT_THROW(diff::make_schedule(100, diff::ScheduleKind::Linear), hdp::ArgumentError);
  EXPECT_LT(diff::make_schedule(1000, diff::ScheduleKind::Linear).alpha_bar.back(), 1e-3);
}

TEST(Schedule, RejectsZeroSteps) { EXPECT_THROW(diff::make_schedule(0), hdp::ArgumentError); }

TEST(Schedule, JsonRoundTrip) {
  const auto s = diff::make_schedule(50);
  const auto back = diff::schedule_from_json(diff::schedule_to_json(s));
  EXPECT_EQ(back.beta, s.beta);
}

TEST(ForwardDiffuse, ZeroNoiseScalesSignal) {
  const auto s = diff::make_schedule(100);
  const TensorF x0(Shape{4, 2}, std::vector<float>{1, -2, 3, 0.5f, 0, 7, -1, 2});
  for (int k : {1, 37, 100}) {
    const auto xk = diff::forward_diffuse(x0, k, s, filled(Shape{4, 2}, 0.f));
    const auto a = static_cast<float>(std::sqrt(s.alpha_bar_at(k)));
    for (std::int64_t i = 0; i < x0.size(); ++i) EXPECT_EQ(xk.values[i], a * x0[i]);
    EXPECT_EQ(xk.step, k);
  }
}

TEST(ForwardDiffuse, UnitAlphaBarLeavesInput) {
  // A hypothetical near-unit alpha_bar at step 1 of a two-step explicit schedule.
  diff::ScheduleParams p;
  p.betas = {1e-12, 0.99999};
  const auto s = diff::make_schedule(2, diff::ScheduleKind::Explicit, p);
  const TensorF x0(Shape{1, 3}, std::vector<float>{0.25f, -1.5f, 2.f});
  std::mt19937_64 rng(1);
  const auto xk = diff::forward_diffuse(x0, 1, s, diff::standard_normal(x0.shape(), rng));
  for (std::int64_t i = 0; i < 3; ++i) EXPECT_NEAR(xk.values[i], x0[i], 1e-5);
}

TEST(ForwardDiffuse, RejectsStepOutOfRange) {
  const auto s = diff::make_schedule(100);
  const TensorF x(Shape{2, 2});
  EXPECT_THROW(diff::forward_diffuse(x, 0, s, x), hdp::ArgumentError);
  EXPECT_THROW(diff::forward_diffuse(x, 101, s, x), hdp::ArgumentError);
}

TEST(ForwardDiffuse, TerminalStepIsStandardNormal) {
  const auto s = diff::make_schedule(100);
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  constexpr int n = 10000, ch = 3;
  double sum[ch] = {}, sq[ch] = {};
  for (int i = 0; i < n; ++i) {
    TensorF x0(Shape{1, ch});
    for (auto& v : x0.data()) v = u(rng);
    const auto xk = diff::forward_diffuse(x0, 100, s, diff::standard_normal(x0.shape(), rng));
    for (int c = 0; c < ch; ++c) {
      sum[c] += xk.values[c];
      sq[c] += static_cast<double>(xk.values[c]) * xk.values[c];
    }
  }
  for (int c = 0; c < ch; ++c) {
    const double mean = sum[c] / n;
    const double var = sq[c] / n - mean * mean;
    EXPECT_LT(std::abs(mean), 0.05);
    EXPECT_GE(var, 0.9);
    EXPECT_LE(var, 1.1);
  }
}

TEST(DdpmStep, FinalStepReturnsPrediction) {
  const auto s = diff::make_schedule(100);
  const TensorF x0_hat(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const diff::NoisyTrajectory x1{filled(Shape{2, 3}, -9.f), 1};
  const auto out = diff::ddpm_step(x0_hat, x1, s, filled(Shape{2, 3}, 5.f));
  EXPECT_EQ(out.values, x0_hat);
  EXPECT_EQ(out.step, 0);
}

TEST(DdpmStep, PerfectPredictionReconstructs) {
  const auto s = diff::make_schedule(100);
  std::mt19937_64 rng(3);
  TensorF x0 = diff::standard_normal(Shape{16, 4}, rng);
  const TensorF zero(x0.shape());
  for (int k0 : {1, 10, 50, 100}) {
    auto x = diff::forward_diffuse(x0, k0, s, zero);
    while (x.step > 0) x = diff::ddpm_step(x0, x, s, zero);
    for (std::int64_t i = 0; i < x0.size(); ++i) ASSERT_NEAR(x.values[i], x0[i], 1e-4);
  }
}

TEST(DdpmStep, PosteriorMeanMatchesClosedForm) {
  // Gaussian posterior q(x^{k-1} | x^k, x^0) computed from first principles:
  // precision-weighted combination of the prior N(sqrt(abar_{k-1}) x0,
  // 1 - abar_{k-1}) and the likelihood of x^k given x^{k-1}.
  const auto s = diff::make_schedule(100);
  const int k = 40;
  const double ab_prev = s.alpha_bar_at(k - 1), beta = s.beta_at(k);
  const double x0 = 0.7, xk = -0.3;
  const double prior_var = 1 - ab_prev, lik_var = beta / (1 - beta);
  const double lik_mean = xk / std::sqrt(1 - beta);
  const double post_var = 1 / (1 / prior_var + 1 / lik_var);
  const double post_mean = post_var * (std::sqrt(ab_prev) * x0 / prior_var + lik_mean / lik_var);
  const auto out = diff::ddpm_step(TensorF(Shape{1, 1}, static_cast<float>(x0)),
                                   {TensorF(Shape{1, 1}, static_cast<float>(xk)), k}, s, TensorF(Shape{1, 1}));
  EXPECT_NEAR(out.values[0], post_mean, 1e-6);
  EXPECT_NEAR(s.posterior_variance(k), post_var, 1e-12);
}

TEST(DdpmStep, ZeroNoiseIsDeterministic) {
  const auto s = diff::make_schedule(100);
  const TensorF x0_hat = filled(Shape{3, 2}, 0.4f);
  const diff::NoisyTrajectory xk{filled(Shape{3, 2}, 1.f), 60};
  const auto a = diff::ddpm_step(x0_hat, xk, s, TensorF(Shape{3, 2}));
  const auto b = diff::ddpm_step(x0_hat, xk, s, TensorF(Shape{3, 2}));
  EXPECT_EQ(a.values, b.values);
}

TEST(DdpmStep, ShapeMismatchThrows) {
  const auto s = diff::make_schedule(100);
  EXPECT_THROW(diff::ddpm_step(TensorF(Shape{2, 2}), {TensorF(Shape{2, 3}), 5}, s, TensorF(Shape{2, 2})),
               hdp::ShapeError);
}

TEST(Inpainting, ZeroDenoiserKeepsFixedRow) {
  const auto s = diff::make_schedule(100);
  diff::InpaintMask mask;
  const std::vector<float> ones(5, 1.f);
  mask.fix_row(0, ones);
  std::mt19937_64 rng(0);
  const auto out = diff::sample_with_inpainting([](const TensorF& x, int) { return TensorF(x.shape()); }, mask, s,
                                                8, 5, rng);
  for (int c = 0; c < 5; ++c) EXPECT_EQ(out[c], 1.f);
}

TEST(Inpainting, ConstantDenoiserConverges) {
  const auto s = diff::make_schedule(100);
  std::mt19937_64 rng(1);
  const auto out = diff::sample_with_inpainting([](const TensorF& x, int) { return TensorF(x.shape(), 0.625f); },
                                                {}, s, 8, 3, rng);
  for (float v : out.data()) EXPECT_EQ(v, 0.625f);
}

TEST(Inpainting, MaskedEntriesExactForArbitraryDenoiser) {
  const auto s = diff::make_schedule(100);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-3.f, 3.f);
  for (int trial = 0; trial < 50; ++trial) {
    diff::InpaintMask mask;
    std::vector<float> first(7), last(7);
    for (auto& v : first) v = u(rng);
    for (auto& v : last) v = u(rng);
    mask.fix_row(0, first);
    mask.fix_row(15, last);
    mask.entries.push_back({7, 2, u(rng)});
    const float gain = u(rng);
    auto den = [gain](const TensorF& x, int k) {
      TensorF y(x.shape());
      for (std::int64_t i = 0; i < x.size(); ++i) y[i] = std::sin(gain * x[i] + static_cast<float>(k));
      return y;
    };
    const auto out = diff::sample_with_inpainting(den, mask, s, 16, 7, rng);
    for (const auto& e : mask.entries) ASSERT_EQ(out[e.row * 7 + e.channel], e.value);
  }
}

TEST(Inpainting, MaskAppliedBeforeFirstDenoiserCall) {
  const auto s = diff::make_schedule(10, diff::ScheduleKind::Cosine);
  diff::InpaintMask mask;
  mask.entries.push_back({2, 1, 4.5f});
  std::mt19937_64 rng(2);
  int calls = 0;
  diff::sample_with_inpainting(
      [&](const TensorF& x, int) {
        EXPECT_EQ(x[2 * 3 + 1], 4.5f);
        ++calls;
        return TensorF(x.shape());
      },
      mask, s, 8, 3, rng);
  EXPECT_EQ(calls, 10);
}

TEST(Inpainting, OutOfBoundsMaskRejected) {
  const auto s = diff::make_schedule(100);
  diff::InpaintMask mask;
  mask.entries.push_back({8, 0, 1.f});
  std::mt19937_64 rng(0);
  EXPECT_THROW(diff::sample_with_inpainting([](const TensorF& x, int) { return x; }, mask, s, 8, 3, rng),
               hdp::ArgumentError);
}

TEST(Inpainting, NonFiniteDenoiserOutputIsAnError) {
  const auto s = diff::make_schedule(100);
  std::mt19937_64 rng(0);
  EXPECT_THROW(diff::sample_with_inpainting([](const TensorF& x, int) { return TensorF(x.shape(), NAN); }, {}, s, 8,
                                            3, rng),
               hdp::NumericError);
}

TEST(Inpainting, ReproducibleFromSeed) {
  const auto s = diff::make_schedule(100);
  auto den = [](const TensorF& x, int) {
    TensorF y = x;
    for (auto& v : y.data()) v *= 0.5f;
    return y;
  };
  std::mt19937_64 a(77), b(77);
  EXPECT_EQ(diff::sample_with_inpainting(den, {}, s, 8, 4, a), diff::sample_with_inpainting(den, {}, s, 8, 4, b));
}

TEST(Cfg, Combine) {
  const TensorF cond(Shape{2}, std::vector<float>{1.f, 3.f});
  const TensorF uncond(Shape{2}, std::vector<float>{0.f, -1.f});
  EXPECT_EQ(diff::cfg_combine(cond, uncond, 1.f), cond);
  EXPECT_EQ(diff::cfg_combine(cond, uncond, 0.f), uncond);
  EXPECT_EQ(diff::cfg_combine(TensorF(Shape{1}, 1.f), TensorF(Shape{1}, 0.f), 2.f)[0], 2.f);
}
