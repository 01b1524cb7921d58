#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "hdp/data.hpp"
#include "hdp/kinematics.hpp"
#include "hdp/numcore.hpp"
#include "hdp/rkd.hpp"

/// Finite-difference gradient suites shared by the CLI and the acceptance run.
namespace hdp::checks {

using nc::Shape;
using TensorD = nc::Tensor<double>;

struct SuiteResult {
  std::string name;
  int cases = 0;
  int failures = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return failures == 0 && cases > 0; }
};

namespace detail {

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void absorb(SuiteResult& s, const nc::GradCheckReport& r) {
  ++s.cases;
  s.max_rel_error = std::max(s.max_rel_error, r.max_rel_error);
  if (!r.passed()) ++s.failures;
}

/// Chain with random unit axes, link offsets and rotation offsets.
inline kin::KinematicChain random_chain(int dof, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> off(-0.3, 0.3);
  std::vector<kin::Link> links(static_cast<std::size_t>(dof));
  for (auto& l : links) {
    l.axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
    l.offset = Eigen::Vector3d(off(rng), off(rng), off(rng));
    l.rot_offset = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized();
    l.lo = -std::numbers::pi;
    l.hi = std::numbers::pi;
  }
  return kin::KinematicChain("random", std::move(links));
}

inline std::vector<double> random_q(std::mt19937_64& rng, int n, double span) {
  std::uniform_real_distribution<double> u(-span, span);
  std::vector<double> q(static_cast<std::size_t>(n));
  for (auto& v : q) v = u(rng);
  return q;
}

/// Sub-trajectory of a smooth random joint path on `chain`.
inline rkd::TrainExample random_example(const kin::KinematicChain& chain, std::mt19937_64& rng) {
  const int n = chain.dof();
  const auto q0 = random_q(rng, n, 1.2), q1 = random_q(rng, n, 1.2), bulge = random_q(rng, n, 0.5);
  const std::int64_t frames = 64;
  TensorD j(Shape{frames, n});
  for (std::int64_t t = 0; t < frames; ++t) {
    const double s = static_cast<double>(t) / static_cast<double>(frames - 1);
    for (int k = 0; k < n; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      j[t * n + k] = q0[kk] + s * (q1[kk] - q0[kk]) + bulge[kk] * std::sin(std::numbers::pi * s);
    }
  }
  const auto d = data::make_demo(chain, std::move(j), std::vector<int>(static_cast<std::size_t>(frames), 0),
                                 TensorD(Shape{0, 3}), 0, "");
  return {data::make_subtrajectory(d, 0, frames - 1, frames - 1), TensorD(Shape{0, 3})};
}

/// Small-width configuration so double-precision probing stays cheap.
inline rkd::RKDConfig probe_config() {
  rkd::RKDConfig c;
  c.network.widths = {8, 16, 16};
  c.network.groups = 4;
  c.network.context_width = 16;
  c.network.cond_hidden = {16};
  c.network.field_width = 8;
  c.network.point_hidden = {8, 8};
  c.network.step_features = 8;
  c.network.step_width = 8;
  c.diffusion_steps = 20;
  return c;
}

/// Up to `count` distinct indices of a tensor of `size` elements.
inline std::vector<std::int64_t> sample_indices(std::int64_t size, int count, std::mt19937_64& rng) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(size));
  for (std::int64_t i = 0; i < size; ++i) all[static_cast<std::size_t>(i)] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(std::min<std::int64_t>(size, count)));
  return all;
}

}  // namespace detail

/// Batched FK pullback against central differences of <cotangent, FK(q)> on
/// random 7-joint chains.
inline SuiteResult check_fk_pullback(int cases = 100, std::uint64_t seed = 1, double tol = 1e-4) {
  detail::Timer timer;
  SuiteResult s{"fk_pullback", 0, 0, 0.0, tol};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int c = 0; c < cases; ++c) {
    const auto chain = detail::random_chain(7, rng);
    TensorD q(Shape{2, 7}), cot(Shape{2, 7});
    for (auto& v : q.data()) v = 3.0 * u(rng);
    for (auto& v : cot.data()) v = u(rng);
    detail::absorb(s, nc::finite_diff_check<double>(
                          [&](nc::Graph<double>& g, nc::Var<double> jv) {
                            return nc::sum(nc::mul(kin::fk_op(chain, jv), g.constant(cot)));
                          },
                          q, 1e-6, tol));
  }
  s.seconds = timer.seconds();
  return s;
}

/// Gradient of the full two-head training loss with respect to randomly
/// chosen parameter entries of both networks (tolerance `tol`), plus the
/// distillation term alone through FK on the joint network (`distill_tol`).
inline SuiteResult check_rkd_loss(int cases = 100, std::uint64_t seed = 2, double tol = 1e-4, double distill_tol = 1e-3) {
  detail::Timer timer;
  SuiteResult s{"rkd_loss", 0, 0, 0.0, tol};
  std::mt19937_64 rng(seed);
  const auto chain = kin::planar_chain(3, 0.3, 2.9, "arm3");
  for (int c = 0; c < cases; ++c) {
    std::vector<rkd::TrainExample> exs{detail::random_example(chain, rng), detail::random_example(chain, rng)};
    std::vector<data::SubTrajectory> subs{exs[0].sub, exs[1].sub};
    auto [pnorm, jnorm] = rkd::fit_normalizers(subs, 0.05);
    rkd::RKDModel m(chain, detail::probe_config(), pnorm, jnorm, rng());
    const auto batch = rkd::make_train_batch(m, {&exs[0], &exs[1]}, rng).cast<double>();
    auto [pn, jn] = m.to_double();
    const bool distill_only = c % 2 == 1;
    const bool joint = distill_only || c % 4 == 2;
    auto& store = joint ? jn.params() : pn.params();
    std::uniform_int_distribution<std::size_t> pick(0, store.size() - 1);
    const std::size_t idx = pick(rng);
    const rkd::LossWeights w = distill_only ? rkd::LossWeights{0, 0, 1} : rkd::LossWeights{};
    nc::ScalarFn<double> f = [&](nc::Graph<double>& g, nc::Var<double> v) {
      nc::BoundParams<double> pp(g, pn.params()), jp(g, jn.params());
      (joint ? jp : pp).rebind(idx, v);
      return rkd::rkd_loss(g, pn, pp, jn, jp, batch, m.chain(), m.joint_normalizer(), w).total;
    };
    const auto& x = store[idx].value;
    detail::absorb(s, nc::finite_diff_check<double>(f, x, 1e-5, distill_only ? distill_tol : tol,
                                                    detail::sample_indices(x.size(), 8, rng)));
  }
  s.seconds = timer.seconds();
  return s;
}

/// Composite of the differentiable primitives used by the networks.
inline SuiteResult check_ops(int cases = 20, std::uint64_t seed = 3, double tol = 1e-4) {
  detail::Timer timer;
  SuiteResult s{"ops", 0, 0, 0.0, tol};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  auto randn = [&](Shape sh) {
    TensorD t(std::move(sh));
    for (auto& v : t.data()) v = n(rng);
    return t;
  };
  for (int c = 0; c < cases; ++c) {
    const TensorD x = randn(Shape{2, 4, 8});
    const TensorD w = randn(Shape{6, 4, 3}), gamma = randn(Shape{6}), beta = randn(Shape{6});
    const TensorD lw = randn(Shape{5, 48}), lb = randn(Shape{5});
    const std::vector<std::int64_t> labels{static_cast<std::int64_t>(c % 5), static_cast<std::int64_t>((c + 2) % 5)};
    detail::absorb(s, nc::finite_diff_check<double>(
                          [&](nc::Graph<double>& g, nc::Var<double> a) {
                            auto h = nc::conv1d(a, g.constant(w), 1, 1);
                            h = nc::gelu(nc::group_norm(h, g.constant(gamma), g.constant(beta), 3));
                            h = nc::add(h, nc::square(nc::scale(h, 0.3)));
                            auto flat = nc::reshape(h, Shape{2, 48});
                            auto logits = nc::linear(flat, g.constant(lw), g.constant(lb));
                            return nc::add(nc::softmax_cross_entropy(logits, labels), nc::mean(nc::square(h)));
                          },
                          x, 1e-5, tol));
    detail::absorb(s, nc::finite_diff_check<double>(
                          [&](nc::Graph<double>& g, nc::Var<double> wv) {
                            auto h = nc::conv1d(g.constant(x), wv, 2, 1);
                            h = nc::upsample_nearest(h, 2);
                            auto t = nc::transpose_last2(h);
                            return nc::mse(nc::concat<double>({t, t}, 0), g.constant(TensorD(Shape{4, 8, 6}, 0.25)));
                          },
                          w, 1e-5, tol));
  }
  s.seconds = timer.seconds();
  return s;
}

inline std::vector<SuiteResult> run_all(std::uint64_t seed = 0) {
  return {check_fk_pullback(100, seed + 1), check_rkd_loss(100, seed + 2), check_ops(20, seed + 3)};
}

}  // namespace hdp::checks
