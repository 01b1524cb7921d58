#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "hdp/numcore/gradcheck.hpp"
#include "hdp/rkd.hpp"

namespace rkd = hdp::rkd;
namespace kin = hdp::kin;
namespace data = hdp::data;
namespace nc = hdp::nc;
using nc::Shape;
using rkd::TensorD;

namespace {

const kin::KinematicChain& arm3() {
  static const auto c = kin::planar_chain(3, 0.3, 2.9);
  return c;
}

std::vector<double> random_q(std::mt19937_64& rng, int n, double lim = 1.5) {
  std::uniform_real_distribution<double> u(-lim, lim);
  std::vector<double> q(static_cast<std::size_t>(n));
  for (auto& v : q) v = u(rng);
  return q;
}

// Joint path from q0 to q1 with a sinusoidal detour of the given size.
data::Demonstration toy_demo(const kin::KinematicChain& chain, const std::vector<double>& q0,
                             const std::vector<double>& q1, const std::vector<double>& bulge, std::int64_t frames = 64) {
  const auto n = static_cast<std::int64_t>(q0.size());
  TensorD j(Shape{frames, n});
  for (std::int64_t t = 0; t < frames; ++t) {
    const double s = static_cast<double>(t) / static_cast<double>(frames - 1);
    for (std::int64_t k = 0; k < n; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      j[t * n + k] = q0[kk] + s * (q1[kk] - q0[kk]) + bulge[kk] * std::sin(std::numbers::pi * s);
    }
  }
  return data::make_demo(chain, std::move(j), std::vector<int>(static_cast<std::size_t>(frames), 0),
                         TensorD(Shape{0, 3}), 0, "");
}

rkd::TrainExample toy_example(std::mt19937_64& rng, double max_bulge) {
  std::uniform_real_distribution<double> b(-max_bulge, max_bulge);
  const auto q0 = random_q(rng, 3, 1.2), q1 = random_q(rng, 3, 1.2);
  const std::vector<double> bulge{b(rng), b(rng), b(rng)};
  const auto d = toy_demo(arm3(), q0, q1, bulge);
  return {data::make_subtrajectory(d, 0, d.length() - 1, d.length() - 1), TensorD(Shape{0, 3})};
}

rkd::RKDConfig tiny_config(int diffusion_steps = 20) {
  rkd::RKDConfig c;
  c.network.widths = {8, 16, 16};
  c.network.groups = 4;
  c.network.context_width = 16;
  c.network.cond_hidden = {16};
  c.network.field_width = 8;
  c.network.point_hidden = {8, 8};
  c.network.step_features = 8;
  c.network.step_width = 8;
  c.diffusion_steps = diffusion_steps;
  return c;
}

rkd::RKDModel untrained_model(std::uint64_t seed, int diffusion_steps = 20) {
  std::mt19937_64 rng(seed);
  std::vector<data::SubTrajectory> subs;
  for (int i = 0; i < 8; ++i) subs.push_back(toy_example(rng, 0.5).sub);
  auto [pn, jn] = rkd::fit_normalizers(subs, 0.05);
  return rkd::RKDModel(arm3(), tiny_config(diffusion_steps), pn, jn, seed);
}

rkd::Conditions random_conditions(std::mt19937_64& rng, const kin::KinematicChain& chain) {
  const auto q0 = random_q(rng, chain.dof(), 1.2), q1 = random_q(rng, chain.dof(), 1.2);
  const auto p0 = kin::forward_kinematics(chain, q0).row();
  auto p1 = kin::forward_kinematics(chain, q1).row();
  kin::canonicalize_quat(p1.data() + 3);
  rkd::Conditions c;
  std::copy(p0.begin(), p0.end(), c.start_pose.begin());
  kin::canonicalize_quat(c.start_pose.data() + 3);
  c.goal_pose = p1;
  c.start_joints = q0;
  c.state = data::robot_state(q0, c.start_pose);
  return c;
}

double pose_residual(const kin::KinematicChain& chain, const TensorD& q, const TensorD& poses) {
  const auto fk = kin::forward_kinematics<double>(chain, q);
  double s = 0;
  for (std::int64_t r = 0; r < q.dim(0); ++r) s += kin::pose_distance_row(fk.ptr() + r * 7, poses.ptr() + r * 7, 0.5);
  return s;
}

}  // namespace

// -------------------------------------------------------------- error law

TEST(ViolationLaw, Examples) {
  EXPECT_EQ(rkd::predict_violation_prob(0.0, 17), 0.0);
  EXPECT_EQ(rkd::predict_violation_prob(1.0, 5), 1.0);
  EXPECT_NEAR(rkd::predict_violation_prob(0.01, 64), 0.4745, 1e-4);
  EXPECT_THROW(rkd::predict_violation_prob(-0.1, 3), hdp::ArgumentError);
  EXPECT_THROW(rkd::predict_violation_prob(1.5, 3), hdp::ArgumentError);
  EXPECT_THROW(rkd::predict_violation_prob(0.5, 0), hdp::ArgumentError);
}

TEST(ViolationLaw, MonteCarloAgreement) {
  std::mt19937_64 rng(100);
  const double mc = rkd::simulate_violation_rate(0.05, 32, 10000, rng);
  EXPECT_NEAR(mc, 1.0 - std::pow(0.95, 32), 0.02);
}

// ------------------------------------------------------------- refinement

TEST(Refine, ConsistentTrajectoryIsUnchanged) {
  std::mt19937_64 rng(1);
  const auto d = toy_demo(arm3(), random_q(rng, 3), random_q(rng, 3), {0.2, -0.1, 0.3});
  const auto poses = kin::forward_kinematics<double>(arm3(), d.joints);
  const auto [q, trace] = rkd::refine_joints(arm3(), d.joints, poses);
  EXPECT_EQ(q, d.joints);
  EXPECT_LT(trace.initial_residual, 1e-9);
}

TEST(Refine, ConvergesOnPerturbedTargets) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ang(0, 2 * std::numbers::pi), small(-0.3, 0.3), base(-1.5, 1.5),
      bend(0.4, 1.8);
  std::bernoulli_distribution flip(0.5);
  // Elbows stay bent so a 1 cm planar offset keeps every target reachable.
  auto bent = [&] { return (flip(rng) ? 1.0 : -1.0) * bend(rng); };
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<double> q0{base(rng), bent(), bent()};
    const std::vector<double> q1{base(rng), q0[1] + small(rng), q0[2] + small(rng)};
    const auto d = toy_demo(arm3(), q0, q1, {small(rng), 0.3 * small(rng), 0.3 * small(rng)});
    TensorD targets = d.poses;
    for (std::int64_t r = 1; r < 64; ++r) {
      const double a = ang(rng);
      targets[r * 7] += 0.01 * std::cos(a);
      targets[r * 7 + 1] += 0.01 * std::sin(a);
    }
    const auto [q, trace] = rkd::refine_joints(arm3(), d.joints, targets);
    ASSERT_LE(static_cast<int>(trace.residuals.size()), 100);
    ASSERT_LT(pose_residual(arm3(), q, targets), 1e-2) << "trial " << trial;
    ASSERT_LE(pose_residual(arm3(), q, targets), pose_residual(arm3(), d.joints, targets));
    ASSERT_FALSE(trace.diverged);
    for (int k = 0; k < 3; ++k) ASSERT_EQ(q[k], d.joints[k]);
  }
}

TEST(Refine, UnpreconditionedGradientIsMonotoneToo) {
  std::mt19937_64 rng(40);
  rkd::RefineConfig cfg;
  cfg.metric_damping = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = toy_demo(arm3(), random_q(rng, 3), random_q(rng, 3), {0.1, 0.0, -0.1});
    TensorD targets = d.poses;
    for (std::int64_t r = 1; r < 64; ++r) targets[r * 7] += 0.01;
    const auto [q, trace] = rkd::refine_joints(arm3(), d.joints, targets, cfg);
    double prev = trace.initial_residual;
    for (double v : trace.residuals) {
      ASSERT_LE(v, prev + 1e-15);
      prev = v;
    }
  }
}

TEST(Refine, ResidualIsMonotone) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 0.05);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = toy_demo(arm3(), random_q(rng, 3), random_q(rng, 3), {0, 0, 0});
    TensorD q0 = d.joints;
    for (std::int64_t i = 3; i < q0.size(); ++i) q0[i] += nd(rng);
    const auto [q, trace] = rkd::refine_joints(arm3(), q0, d.poses);
    double prev = trace.initial_residual;
    for (std::size_t i = 0; i < std::min<std::size_t>(10, trace.residuals.size()); ++i) {
      ASSERT_LE(trace.residuals[i], prev + 1e-15);
      prev = trace.residuals[i];
    }
  }
}

TEST(Refine, RespectsJointLimits) {
  const auto chain = kin::planar_chain(3, 0.3, 0.4);
  std::mt19937_64 rng(4);
  // Targets that need joints outside +-0.4.
  const auto d = toy_demo(kin::planar_chain(3, 0.3, 3.0), {0.1, 0.1, 0.1}, {1.5, 1.2, -1.0}, {0, 0, 0});
  TensorD q0 = d.joints;
  for (std::int64_t i = 0; i < q0.size(); ++i) q0[i] = std::clamp(q0[i], -0.4, 0.4);
  const auto [q, trace] = rkd::refine_joints(chain, q0, d.poses);
  for (std::int64_t r = 0; r < 64; ++r) {
    EXPECT_TRUE(chain.within_limits({q.ptr() + r * 3, 3}));
  }
  EXPECT_LE(trace.final_residual(), trace.initial_residual);
}

TEST(Refine, RejectsShapeMismatch) {
  EXPECT_THROW(rkd::refine_joints(arm3(), TensorD(Shape{64, 2}), TensorD(Shape{64, 7})), hdp::ShapeError);
  EXPECT_THROW(rkd::refine_joints(arm3(), TensorD(Shape{64, 3}), TensorD(Shape{63, 7})), hdp::ShapeError);
}

// ---------------------------------------------------------- normalization

TEST(Normalizer, MapsRangeToUnitInterval) {
  TensorD t(Shape{3, 2}, std::vector<double>{0, 5, 2, 5, 4, 5});
  const auto n = rkd::ChannelNormalizer::fit({&t}, 0.05);
  EXPECT_DOUBLE_EQ(n.to_unit(0, 0.0), -1.0);
  EXPECT_DOUBLE_EQ(n.to_unit(0, 4.0), 1.0);
  EXPECT_DOUBLE_EQ(n.half[1], 0.05);
  EXPECT_DOUBLE_EQ(n.from_unit(1, n.to_unit(1, 5.3)), 5.3);
  const auto back = rkd::ChannelNormalizer::from_json(n.to_json());
  EXPECT_EQ(back.mid, n.mid);
  EXPECT_EQ(back.half, n.half);
}

// --------------------------------------------------------------- sampling

TEST(Sampling, InpaintedRowsAreExact) {
  auto m = untrained_model(5);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 30; ++i) {
    const auto c = random_conditions(rng, arm3());
    const auto p = rkd::sample_trajectory(m, rkd::Head::Pose, c, rng);
    const auto j = rkd::sample_trajectory(m, rkd::Head::Joint, c, rng);
    ASSERT_EQ(p.dim(0), 64);
    for (int k = 0; k < 7; ++k) {
      ASSERT_EQ(p[k], c.start_pose[static_cast<std::size_t>(k)]);
      ASSERT_EQ(p[63 * 7 + k], c.goal_pose[static_cast<std::size_t>(k)]);
    }
    for (int k = 0; k < 3; ++k) ASSERT_EQ(j[k], c.start_joints[static_cast<std::size_t>(k)]);
  }
}

TEST(Sampling, GuidedSamplingAlsoInpaints) {
  auto m = untrained_model(7);
  m.config().guidance = 2.0;
  std::mt19937_64 rng(8);
  const auto c = random_conditions(rng, arm3());
  const auto p = rkd::sample_trajectory(m, rkd::Head::Pose, c, rng);
  for (int k = 0; k < 7; ++k) EXPECT_EQ(p[63 * 7 + k], c.goal_pose[static_cast<std::size_t>(k)]);
}

TEST(Sampling, ReproducibleGivenSeed) {
  auto m = untrained_model(9);
  std::mt19937_64 crng(10);
  const auto c = random_conditions(crng, arm3());
  std::mt19937_64 a(11), b(11);
  EXPECT_EQ(rkd::rkd_act(m, c, a).joints, rkd::rkd_act(m, c, b).joints);
}

TEST(Sampling, ActionsStayWithinLimits) {
  auto m = untrained_model(12);
  std::mt19937_64 rng(13);
  for (int i = 0; i < 100; ++i) {
    const auto c = random_conditions(rng, arm3());
    const auto a = rkd::rkd_act(m, c, rng);
    for (std::int64_t r = 0; r < 64; ++r) ASSERT_TRUE(arm3().within_limits({a.joints.ptr() + r * 3, 3}));
    ASSERT_LE(a.trace.final_residual(), a.trace.initial_residual);
  }
}

TEST(Sampling, RejectsBadConditions) {
  auto m = untrained_model(14);
  std::mt19937_64 rng(15);
  auto c = random_conditions(rng, arm3());
  c.rank = 0.0;
  EXPECT_THROW(rkd::sample_trajectory(m, rkd::Head::Pose, c, rng), hdp::ArgumentError);
  c.rank = 1.0;
  c.start_joints.pop_back();
  EXPECT_THROW(rkd::sample_trajectory(m, rkd::Head::Joint, c, rng), hdp::ShapeError);
}

// ------------------------------------------------------------------- loss

TEST(Loss, ZeroDistillWeightDecouplesHeads) {
  auto m = untrained_model(16);
  std::mt19937_64 rng(17);
  std::vector<rkd::TrainExample> exs;
  for (int i = 0; i < 3; ++i) exs.push_back(toy_example(rng, 0.5));
  std::vector<const rkd::TrainExample*> ptrs{&exs[0], &exs[1], &exs[2]};
  const auto batch = rkd::make_train_batch(m, ptrs, rng).cast<double>();
  auto [pn, jn] = m.to_double();

  auto grads_for = [&](rkd::LossWeights w) {
    nc::Graph<double> g;
    nc::BoundParams<double> pp(g, pn.params()), jp(g, jn.params());
    auto terms = rkd::rkd_loss(g, pn, pp, jn, jp, batch, m.chain(), m.joint_normalizer(), w);
    auto grads = g.backward(terms.total);
    return std::make_pair(pp.collect(grads), jp.collect(grads));
  };
  const auto full = grads_for({1, 1, 0});
  const auto pose_only = grads_for({1, 0, 0});
  const auto joint_only = grads_for({0, 1, 0});
  for (std::size_t i = 0; i < full.first.size(); ++i) EXPECT_EQ(full.first[i], pose_only.first[i]);
  for (std::size_t i = 0; i < full.second.size(); ++i) EXPECT_EQ(full.second[i], joint_only.second[i]);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  auto m = untrained_model(18);
  std::mt19937_64 rng(19);
  std::vector<rkd::TrainExample> exs;
  for (int i = 0; i < 2; ++i) exs.push_back(toy_example(rng, 0.5));
  std::vector<const rkd::TrainExample*> ptrs{&exs[0], &exs[1]};
  const auto batch = rkd::make_train_batch(m, ptrs, rng).cast<double>();
  auto [pn, jn] = m.to_double();
  const auto& chain = m.chain();
  const auto& norm = m.joint_normalizer();

  // One probe tensor per net: pose head bias, joint head weights.
  struct Probe {
    bool joint;
    std::string name;
    rkd::LossWeights w;
    double tol;
  };
  const std::vector<Probe> probes{{false, "head.b", {1, 1, 1}, 1e-4},
                                  {false, "down1.conv1.w", {1, 1, 1}, 1e-4},
                                  {true, "head.w", {0, 0, 1}, 1e-3},
                                  {true, "up2.conv2.b", {0, 0, 1}, 1e-3},
                                  {true, "head.w", {1, 1, 1}, 1e-4}};
  for (const auto& pr : probes) {
    auto& store = pr.joint ? jn.params() : pn.params();
    const auto idx = store.index_of(pr.name);
    const auto x = store[idx].value;
    nc::ScalarFn<double> f = [&](nc::Graph<double>& g, nc::Var<double> v) {
      nc::BoundParams<double> pp(g, pn.params()), jp(g, jn.params());
      (pr.joint ? jp : pp).rebind(idx, v);
      return rkd::rkd_loss(g, pn, pp, jn, jp, batch, chain, norm, pr.w).total;
    };
    std::vector<std::int64_t> probe;
    for (std::int64_t i = 0; i < x.size(); i += std::max<std::int64_t>(1, x.size() / 24)) probe.push_back(i);
    const auto rep = nc::finite_diff_check<double>(f, x, 1e-5, pr.tol, probe);
    EXPECT_TRUE(rep.passed()) << pr.name << " max rel " << rep.max_rel_error;
  }
}

TEST(Training, MemorizesSingleSubTrajectory) {
  std::mt19937_64 rng(20);
  const std::vector<rkd::TrainExample> one{toy_example(rng, 0.3)};
  auto cfg = tiny_config(100);
  cfg.drop_prob = 0.0;
  std::vector<rkd::TrainLog> hist;
  rkd::TrainConfig tc{.steps = 500, .batch = 4, .lr = 3e-3, .weight_decay = 0.0, .warmup = 20, .seed = 21};
  auto m = rkd::train_rkd(one, arm3(), cfg, tc, &hist);
  double tail = 0;
  for (int i = 480; i < 500; ++i) tail += hist[static_cast<std::size_t>(i)].total / 20;
  EXPECT_LT(tail, 1e-2);
}

TEST(Training, RejectsEmptyDataset) {
  EXPECT_THROW(rkd::train_rkd({}, arm3(), tiny_config(), {}), hdp::ArgumentError);
}

TEST(Persistence, RoundTripReproducesSamples) {
  auto m = untrained_model(22);
  const std::string path = ::testing::TempDir() + "/rkd.ckpt";
  rkd::save_rkd(m, path);
  const auto back = rkd::load_rkd(path);
  std::mt19937_64 crng(23);
  const auto c = random_conditions(crng, arm3());
  std::mt19937_64 a(24), b(24);
  EXPECT_EQ(rkd::rkd_act(m, c, a).joints, rkd::rkd_act(back, c, b).joints);
}

// ------------------------------------------------------ trained toy model

class TrainedToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::mt19937_64 rng(30);
    std::vector<rkd::TrainExample> set;
    for (int i = 0; i < 256; ++i) set.push_back(toy_example(rng, 1.0));
    auto cfg = tiny_config(20);
    cfg.network.widths = {16, 32, 32};
    cfg.network.context_width = 32;
    cfg.network.cond_hidden = {32};
    cfg.network.field_width = 16;
    rkd::TrainConfig tc{.steps = 1500, .batch = 16, .lr = 2e-3, .warmup = 50, .seed = 31};
    model_ = new rkd::RKDModel(rkd::train_rkd(set, arm3(), cfg, tc));
  }
  static void TearDownTestSuite() {
    delete model_;
    model_ = nullptr;
  }
  static rkd::RKDModel* model_;
};
rkd::RKDModel* TrainedToy::model_ = nullptr;

TEST_F(TrainedToy, RankConditionShortensPaths) {
  std::mt19937_64 rng(32);
  int wins = 0;
  const int cases = 5;
  for (int trial = 0; trial < cases; ++trial) {
    auto c = random_conditions(rng, arm3());
    double straight = 0, curved = 0;
    for (int i = 0; i < 20; ++i) {
      c.rank = 1.0;
      straight += data::compute_rank(rkd::sample_trajectory(*model_, rkd::Head::Pose, c, rng));
      c.rank = 0.6;
      curved += data::compute_rank(rkd::sample_trajectory(*model_, rkd::Head::Pose, c, rng));
    }
    wins += straight > curved ? 1 : 0;
  }
  EXPECT_GE(wins, cases - 1);
}

TEST_F(TrainedToy, RefinementMovesFinalPoseTowardGoal) {
  std::mt19937_64 rng(33);
  int closer = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_conditions(rng, arm3());
    const auto a = rkd::rkd_act(*model_, c, rng);
    auto last = [&](const TensorD& q) {
      const auto p = kin::forward_kinematics<double>(arm3(), {q.ptr() + 63 * 3, 3}).row();
      return kin::pose_distance_row(p.data(), c.goal_pose.data(), 0.5);
    };
    closer += last(a.joints) < last(a.joints_unrefined) ? 1 : 0;
  }
  EXPECT_GE(closer, 90);
}
