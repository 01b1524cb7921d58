#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hdp/env.hpp"

using namespace hdp;
using env::TaskKind;

namespace {

env::TaskSpec task(TaskKind k) { return env::default_task(k); }

double path_rank(const env::ExpertDemo& e) { return data::compute_rank(e.demo.poses); }

rkd::RKDModel tiny_model(const env::TaskSpec& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<data::SubTrajectory> subs;
  for (int i = 0; i < 6; ++i) {
    auto e = env::gen_expert_demo(t, t.planner, rng);
    for (auto& s : data::chunk_and_relabel(e.demo, e.keyframes)) subs.push_back(s);
  }
  auto [pn, jn] = rkd::fit_normalizers(subs, 0.05);
  rkd::RKDConfig c;
  c.network.widths = {8, 16, 16};
  c.network.groups = 4;
  c.network.context_width = 16;
  c.network.cond_hidden = {16};
  c.network.field_width = 8;
  c.network.point_hidden = {8, 8};
  c.network.step_features = 8;
  c.network.step_width = 8;
  c.diffusion_steps = 10;
  c.refine.steps = 10;
  return rkd::RKDModel(t.chain, c, pn, jn, seed);
}

env::Controller controller(env::ControllerKind k, const rkd::RKDModel* m = nullptr) {
  env::Controller c;
  c.kind = k;
  c.model = m;
  return c;
}

env::EpisodeResult fake_result(env::FailureReason r, double dev) {
  env::EpisodeResult e;
  e.failure = r;
  e.success = r == env::FailureReason::None;
  e.max_deviation = dev;
  return e;
}

}  // namespace

TEST(Geometry, SagittaMatchesSampledChord) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ur(0.2, 0.5), ut(std::numbers::pi / 3, std::numbers::pi);
  auto t = task(TaskKind::HingedLid);
  const env::Scene s;
  for (int i = 0; i < 200; ++i) {
    t.radius = ur(rng);
    t.opening = ut(rng);
    const auto a = env::lid_handle_pose(t, s, t.closed_angle);
    const auto b = env::lid_handle_pose(t, s, t.closed_angle + t.opening);
    double worst = 0;
    for (int k = 0; k <= 1000; ++k) {
      const double u = k / 1000.0;
      const double p[3] = {a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), 0.0};
      worst = std::max(worst, env::constraint_deviation(t, s, p));
    }
    EXPECT_NEAR(worst, env::sagitta(t.radius, t.opening), 1e-9);
    EXPECT_GT(worst, 0.01);
  }
}

TEST(Geometry, HandleArcHasZeroDeviation) {
  const auto t = task(TaskKind::HingedLid);
  const env::Scene s{{0.01, -0.005}, 0};
  for (int i = 0; i <= 20; ++i) {
    const auto p = env::lid_handle_pose(t, s, t.closed_angle + t.opening * i / 20.0);
    EXPECT_LT(env::constraint_deviation(t, s, p.data()), 1e-12);
  }
  const auto d = task(TaskKind::Drawer);
  for (int i = 0; i <= 20; ++i) {
    const auto p = env::drawer_handle_pose(d, s, i / 20.0);
    EXPECT_LT(env::constraint_deviation(d, s, p.data()), 1e-12);
  }
  const double off[3] = {d.drawer_start[0] + s.offset[0] - 0.1, d.drawer_start[1] + s.offset[1] + 0.03, 0.0};
  EXPECT_NEAR(env::constraint_deviation(d, s, off), 0.03, 1e-12);
}

TEST(Scene, PointCloudShapeAndDeterminism) {
  for (auto k : {TaskKind::Reach, TaskKind::HingedLid, TaskKind::Drawer}) {
    const auto t = task(k);
    std::mt19937_64 a(3), b(3);
    const auto sa = env::sample_scene(t, a);
    const auto pa = env::scene_points(t, sa, a);
    const auto pb = env::scene_points(t, env::sample_scene(t, b), b);
    ASSERT_EQ(pa.dim(0), 256);
    ASSERT_EQ(pa.dim(1), 3);
    EXPECT_TRUE(std::ranges::equal(pa.data(), pb.data()));
    for (std::int64_t i = 0; i < pa.dim(0); ++i) EXPECT_LE(std::abs(pa[i * 3 + 2]), 0.025);
  }
}

TEST(ExpertDemo, StraightReachHasUnitRank) {
  auto t = task(TaskKind::Reach);
  t.planner.waypoint_sigma = 0.0;
  t.planner.yaw_sigma = 0.0;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto e = env::gen_expert_demo(t, t.planner, rng);
    EXPECT_NEAR(path_rank(e), 1.0, 1e-3);
  }
}

TEST(ExpertDemo, NoisyReachIsSuboptimal) {
  const auto t = task(TaskKind::Reach);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) EXPECT_LT(path_rank(env::gen_expert_demo(t, t.planner, rng)), 1.0);
}

TEST(ExpertDemo, SelfConsistentOnEveryTask) {
  for (auto k : {TaskKind::Reach, TaskKind::HingedLid, TaskKind::Drawer}) {
    const auto t = task(k);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 100; ++i) {
      const auto e = env::gen_expert_demo(t, t.planner, rng);
      const auto& d = e.demo;
      ASSERT_EQ(static_cast<int>(e.keyframes.size()), t.keyframe_count());
      EXPECT_EQ(data::discover_keyframes(d), e.keyframes);
      for (std::int64_t r = 0; r < d.length(); ++r) {
        ASSERT_TRUE(t.chain.within_limits({d.joints.ptr() + r * 4, 4}));
      }
      const auto goal = env::final_goal(t, e.scene);
      EXPECT_TRUE(env::within_goal(t, d.poses.ptr() + (d.length() - 1) * 7, goal.data()));
      if (t.constrained()) {
        EXPECT_LT(env::max_deviation(t, e.scene, d.poses, e.grasp_frame), 0.5 * t.delta);
        const auto k0 = e.keyframes[0];
        EXPECT_EQ(d.gripper[static_cast<std::size_t>(k0)], 1);
        const auto g = env::grasp_pose(t, e.scene);
        EXPECT_TRUE(env::within_goal(t, d.poses.ptr() + k0 * 7, g.data()));
      }
      EXPECT_EQ(d.points.dim(0), 256);
    }
  }
}

TEST(ExpertDemo, UnreachableGeometryRaisesPlanningError) {
  auto t = task(TaskKind::HingedLid);
  t.hinge = {1.5, 0.0};
  t.planner.max_retries = 2;
  std::mt19937_64 rng(7);
  EXPECT_THROW(env::gen_expert_demo(t, t.planner, rng), env::PlanningError);
}

TEST(Rollout, OracleLineSolvesReach) {
  const auto t = task(TaskKind::Reach);
  const env::Controller line = controller(env::ControllerKind::Line);
  const auto rs = env::run_episodes(t, line, nullptr, 11, 20);
  for (const auto& r : rs) {
    EXPECT_TRUE(r.success) << r.detail;
    EXPECT_EQ(r.joints.dim(0), r.poses.dim(0));
    EXPECT_EQ(r.deviation.size(), static_cast<std::size_t>(r.joints.dim(0)));
  }
}

TEST(Rollout, OracleLineViolatesLidConstraint) {
  const auto t = task(TaskKind::HingedLid);
  const env::Controller line = controller(env::ControllerKind::Line);
  const auto rs = env::run_episodes(t, line, nullptr, 12, 20);
  for (const auto& r : rs) {
    EXPECT_EQ(r.failure, env::FailureReason::ConstraintViolation) << r.detail;
    EXPECT_GT(r.max_deviation, t.delta);
  }
  const auto s = env::evaluate(rs);
  EXPECT_EQ(s.success_rate, 0.0);
  EXPECT_EQ(s.ik_error_rate, 0.0);
}

TEST(Rollout, OracleLineViolatesNothingOnDrawer) {
  const auto t = task(TaskKind::Drawer);
  const env::Controller line = controller(env::ControllerKind::Line);
  for (const auto& r : env::run_episodes(t, line, nullptr, 13, 10)) EXPECT_TRUE(r.success) << r.detail;
}

TEST(Rollout, ReproducibleAndIndependentOfWorkers) {
  const auto t = task(TaskKind::HingedLid);
  const auto m = tiny_model(t, 14);
  const env::Controller ctl = controller(env::ControllerKind::RKD, &m);
  const auto a = env::run_episodes(t, ctl, nullptr, 15, 4, 1);
  const auto b = env::run_episodes(t, ctl, nullptr, 15, 4, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(a[i].joints.data(), b[i].joints.data()));
    EXPECT_EQ(a[i].deviation, b[i].deviation);
    EXPECT_EQ(a[i].failure, b[i].failure);
  }
}

TEST(Rollout, RKDControllerNeverReportsIKFailure) {
  const auto t = task(TaskKind::HingedLid);
  const auto m = tiny_model(t, 16);
  const env::Controller ctl = controller(env::ControllerKind::RKD, &m);
  const auto rs = env::run_episodes(t, ctl, nullptr, 17, 6);
  for (const auto& r : rs) {
    EXPECT_NE(r.failure, env::FailureReason::IKFailure);
    EXPECT_NE(r.failure, env::FailureReason::LimitViolation);
  }
  EXPECT_EQ(env::evaluate(rs).ik_error_rate, 0.0);
}

TEST(Rollout, PolicyGoalsAreUsed) {
  const auto t = task(TaskKind::Reach);
  const env::Controller line = controller(env::ControllerKind::Line);
  // Always send the arm to target 0; episodes drawn with variation 1 must miss.
  const env::GoalPolicy first = [&](const env::Observation&) {
    return env::Goal{env::final_goal(t, env::Scene{{0, 0}, 0}), 0};
  };
  for (const auto& r : env::run_episodes(t, line, &first, 18, 12)) {
    EXPECT_EQ(r.success, r.variation == 0) << r.detail;
    if (!r.success) {
      EXPECT_EQ(r.failure, env::FailureReason::GoalMiss);
    }
  }
}

TEST(Rollout, ControllersNeedAModel) {
  const auto t = task(TaskKind::Reach);
  const env::Controller ctl = controller(env::ControllerKind::RKD);
  EXPECT_THROW(env::run_episodes(t, ctl, nullptr, 1, 1), ArgumentError);
}

TEST(Evaluate, CountsRates) {
  std::vector<env::EpisodeResult> all(4, fake_result(env::FailureReason::None, 0.001));
  auto s = env::evaluate(all);
  EXPECT_EQ(s.success_rate, 1.0);
  EXPECT_EQ(s.ik_error_rate, 0.0);
  EXPECT_NEAR(s.mean_deviation, 0.001, 1e-15);

  std::vector<env::EpisodeResult> half{fake_result(env::FailureReason::None, 0), fake_result(env::FailureReason::IKFailure, 0),
                                       fake_result(env::FailureReason::None, 0), fake_result(env::FailureReason::IKFailure, 0)};
  s = env::evaluate(half);
  EXPECT_EQ(s.success_rate, 0.5);
  EXPECT_EQ(s.ik_error_rate, 0.5);
  EXPECT_EQ(s.reasons[static_cast<std::size_t>(env::FailureReason::IKFailure)], 2);
}

TEST(Evaluate, RejectsEmptyAndInconsistent) {
  EXPECT_THROW(env::evaluate({}), ArgumentError);
  auto bad = fake_result(env::FailureReason::GoalMiss, 0);
  bad.success = true;
  EXPECT_THROW(env::evaluate({bad}), ArgumentError);
}

TEST(Config, TaskFilesLoadAndRoundTrip) {
  for (const char* name : {"reach", "hinged_lid", "drawer"}) {
    const auto t = env::load_task(std::string(HDP_CONFIG_DIR) + "/" + name + ".json");
    EXPECT_EQ(env::to_string(t.kind), std::string(name));
    EXPECT_EQ(t.chain.dof(), 4);
    const auto back = env::task_from_json(env::to_json(t));
    EXPECT_EQ(env::to_json(back).dump(), env::to_json(t).dump());
    const auto d = env::default_task(t.kind);
    EXPECT_NEAR(t.radius, d.radius, 1e-15);
    EXPECT_NEAR(t.closed_angle, d.closed_angle, 1e-12);
  }
}

TEST(Config, RejectsInvalidTasks) {
  nlohmann::json j = env::to_json(task(TaskKind::HingedLid));
  j["delta"] = 0.0;
  EXPECT_THROW(env::task_from_json(j), FormatError);
  j = env::to_json(task(TaskKind::HingedLid));
  j["task"] = "microwave";
  EXPECT_THROW(env::task_from_json(j), FormatError);
  EXPECT_THROW(env::load_task("/nonexistent/task.json"), FormatError);
}
