#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/data.hpp"
#include "hdp/error.hpp"
#include "hdp/kinematics.hpp"
#include "hdp/rkd.hpp"

namespace hdp::env {

using nc::Shape;
using TensorD = nc::Tensor<double>;
using Pose7 = std::array<double, 7>;

/// Raised when the demonstration generator gives up on a scene.
class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { Reach, HingedLid, Drawer };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Reach: return "reach";
    case TaskKind::HingedLid: return "hinged_lid";
    case TaskKind::Drawer: return "drawer";
  }
  return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "reach") return TaskKind::Reach;
  if (s == "hinged_lid") return TaskKind::HingedLid;
  if (s == "drawer") return TaskKind::Drawer;
  throw FormatError("unknown task '" + s + "'");
}

/// One reach variation: planar goal (x, y, yaw) and its instruction text.
struct ReachTarget {
  double x = 0, y = 0, yaw = 0;
  std::string text;
};

/// Demonstration-generator settings.
struct PlannerNoise {
  double waypoint_sigma = 0.05;  // m, per axis
  double yaw_sigma = 0.25;       // rad
  double step = 0.012;           // m per frame
  double yaw_step = 0.04;        // rad per frame
  int dwell = 3;                 // still frames after a keyframe
  int max_retries = 25;
  double start_noise = 0.2;  // rad, uniform per joint around home
};

struct TaskSpec {
  TaskKind kind = TaskKind::HingedLid;
  kin::KinematicChain chain = kin::planar_chain(4, 0.25, 2.9, "planar4");
  std::vector<double> home{1.4, -1.2, -1.0, -0.6};

  // hinged lid: handle at hinge + radius (cos a, sin a), a from closed_angle
  // to closed_angle + opening; gripper yaw a + pi/2.
  std::array<double, 2> hinge{0.45, 0.0};
  double radius = 0.25;
  double closed_angle = -2.0 * std::numbers::pi / 3.0;
  double opening = std::numbers::pi / 2.0;

  // drawer: handle slides from drawer_start along slide_dir by extent.
  std::array<double, 2> drawer_start{0.62, 0.22};
  std::array<double, 2> slide_dir{-1.0, 0.0};
  double extent = 0.2;
  double drawer_yaw = 0.0;

  std::vector<ReachTarget> targets{{0.5583333333333333, 0.1625, std::numbers::pi / 4, "reach the left marker"},
                                   {0.5583333333333333, -0.1625, -std::numbers::pi / 4, "reach the right marker"}};

  double delta = 0.02;          // constraint tolerance, m
  double goal_tol_t = 0.02;     // m
  double goal_tol_r = 0.1;      // rad
  double scene_jitter = 0.015;  // m, uniform object offset per episode
  int point_count = 256;
  double point_noise = 0.003;
  PlannerNoise planner;

  int task_id() const { return static_cast<int>(kind); }
  int variations() const { return kind == TaskKind::Reach ? static_cast<int>(targets.size()) : 1; }
  bool constrained() const { return kind != TaskKind::Reach; }
  int keyframe_count() const { return kind == TaskKind::Reach ? 1 : 2; }

  void validate() const {
    if (!(delta > 0)) throw ArgumentError("constraint tolerance must be positive");
    if (!(goal_tol_t > 0 && goal_tol_r > 0)) throw ArgumentError("goal tolerances must be positive");
    if (static_cast<int>(home.size()) != chain.dof()) throw ShapeError("home joints differ from chain dof");
    if (point_count < 1) throw ArgumentError("point count must be positive");
    if (kind == TaskKind::Reach && targets.empty()) throw ArgumentError("reach task needs targets");
    if (kind == TaskKind::HingedLid && !(radius > 0 && opening > 0)) throw ArgumentError("lid geometry degenerate");
    if (kind == TaskKind::Drawer) {
      const double n = std::hypot(slide_dir[0], slide_dir[1]);
      if (!(n > 0 && extent > 0)) throw ArgumentError("drawer geometry degenerate");
    }
  }
};

/// Per-episode instance of a task: object offset and chosen variation.
struct Scene {
  std::array<double, 2> offset{0, 0};
  int variation = 0;
};

// ---------------------------------------------------------------- geometry

inline Pose7 planar_pose(double x, double y, double yaw) {
  const auto q = kin::quat_from_yaw(yaw);
  return {x, y, 0.0, q[0], q[1], q[2], q[3]};
}

inline kin::PoseD to_pose(const Pose7& p) { return kin::PoseD::from_row(std::span<const double>(p)); }

inline std::array<double, 2> lid_hinge(const TaskSpec& t, const Scene& s) {
  return {t.hinge[0] + s.offset[0], t.hinge[1] + s.offset[1]};
}

inline Pose7 lid_handle_pose(const TaskSpec& t, const Scene& s, double angle) {
  const auto h = lid_hinge(t, s);
  return planar_pose(h[0] + t.radius * std::cos(angle), h[1] + t.radius * std::sin(angle),
                     angle + std::numbers::pi / 2.0);
}

inline std::array<double, 2> unit_slide(const TaskSpec& t) {
  const double n = std::hypot(t.slide_dir[0], t.slide_dir[1]);
  return {t.slide_dir[0] / n, t.slide_dir[1] / n};
}

/// Drawer handle after pulling a fraction u of the extent.
inline Pose7 drawer_handle_pose(const TaskSpec& t, const Scene& s, double u) {
  const auto d = unit_slide(t);
  return planar_pose(t.drawer_start[0] + s.offset[0] + u * t.extent * d[0],
                     t.drawer_start[1] + s.offset[1] + u * t.extent * d[1], t.drawer_yaw);
}

/// Pose the arm must hold at the end of the task.
inline Pose7 final_goal(const TaskSpec& t, const Scene& s) {
  switch (t.kind) {
    case TaskKind::Reach: {
      const auto& r = t.targets.at(static_cast<std::size_t>(s.variation));
      return planar_pose(r.x, r.y, r.yaw);
    }
    case TaskKind::HingedLid: return lid_handle_pose(t, s, t.closed_angle + t.opening);
    case TaskKind::Drawer: return drawer_handle_pose(t, s, 1.0);
  }
  return {};
}

/// Grasp pose of the handle (constrained tasks).
inline Pose7 grasp_pose(const TaskSpec& t, const Scene& s) {
  if (t.kind == TaskKind::HingedLid) return lid_handle_pose(t, s, t.closed_angle);
  if (t.kind == TaskKind::Drawer) return drawer_handle_pose(t, s, 0.0);
  throw ArgumentError("reach has no grasp");
}

/// Distance of a held handle position from the feasible set: the hinge
/// circle for the lid, the slide segment for the drawer. Zero for reach.
inline double constraint_deviation(const TaskSpec& t, const Scene& s, const double* pos) {
  switch (t.kind) {
    case TaskKind::Reach: return 0.0;
    case TaskKind::HingedLid: {
      const auto h = lid_hinge(t, s);
      const double r = std::hypot(pos[0] - h[0], pos[1] - h[1]);
      return std::hypot(r - t.radius, pos[2]);
    }
    case TaskKind::Drawer: {
      const auto d = unit_slide(t);
      const double ax = t.drawer_start[0] + s.offset[0], ay = t.drawer_start[1] + s.offset[1];
      const double u = std::clamp((pos[0] - ax) * d[0] + (pos[1] - ay) * d[1], 0.0, t.extent);
      return std::hypot(pos[0] - (ax + u * d[0]), pos[1] - (ay + u * d[1]), pos[2]);
    }
  }
  return 0.0;
}

inline double translation_error(const double* a, const double* b) {
  return std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
}

inline double rotation_error(const double* a, const double* b) {
  std::array<double, 4> qa{a[3], a[4], a[5], a[6]}, qb{b[3], b[4], b[5], b[6]};
  auto unit = [](std::array<double, 4>& q) {
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (auto& v : q) v /= n;
  };
  unit(qa);
  unit(qb);
  return kin::rotation_angle(qa, qb);
}

inline bool within_goal(const TaskSpec& t, const double* pose, const double* goal) {
  return translation_error(pose, goal) <= t.goal_tol_t && rotation_error(pose, goal) <= t.goal_tol_r;
}

/// Maximum chord-to-arc gap of a straight cut across a circle of radius r
/// spanning angle theta.
inline double sagitta(double r, double theta) { return r * (1.0 - std::cos(theta / 2.0)); }

// ------------------------------------------------------------------ scenes

inline Scene sample_scene(const TaskSpec& t, std::mt19937_64& rng) {
  Scene s;
  if (t.kind == TaskKind::Reach) {
    std::uniform_int_distribution<int> v(0, t.variations() - 1);
    s.variation = v(rng);
  } else {
    std::uniform_real_distribution<double> j(-t.scene_jitter, t.scene_jitter);
    s.offset[0] = j(rng);
    s.offset[1] = j(rng);
  }
  return s;
}

/// Points on object surfaces and goal markers, [point_count, 3].
inline TensorD scene_points(const TaskSpec& t, const Scene& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> jit(0.0, t.point_noise);
  struct Stroke {
    double x0, y0, x1, y1;
  };
  std::vector<Stroke> strokes;
  std::vector<double> weight;
  auto add = [&](double x0, double y0, double x1, double y1, double w) {
    strokes.push_back({x0, y0, x1, y1});
    weight.push_back(w);
  };
  auto blob = [&](double x, double y, double r, double w) {
    add(x - r, y, x + r, y, w / 2);
    add(x, y - r, x, y + r, w / 2);
  };
  switch (t.kind) {
    case TaskKind::Reach:
      for (const auto& g : t.targets) blob(g.x, g.y, 0.02, 1.0);
      add(0.35, -0.28, 0.35, 0.28, 0.5);
      break;
    case TaskKind::HingedLid: {
      const auto h = lid_hinge(t, s);
      const auto hp = lid_handle_pose(t, s, t.closed_angle);
      add(h[0], h[1], hp[0], hp[1], 1.0);  // lid
      const double back = t.closed_angle + std::numbers::pi / 2.0;
      add(h[0], h[1], h[0] + 0.5 * t.radius * std::cos(back), h[1] + 0.5 * t.radius * std::sin(back), 0.4);
      blob(hp[0], hp[1], 0.015, 0.4);
      break;
    }
    case TaskKind::Drawer: {
      const auto a = drawer_handle_pose(t, s, 0.0);
      const auto d = unit_slide(t);
      const double nx = -d[1], ny = d[0];
      add(a[0] - 0.08 * nx, a[1] - 0.08 * ny, a[0] + 0.08 * nx, a[1] + 0.08 * ny, 1.0);  // front
      for (double side : {-0.08, 0.08}) {
        add(a[0] + side * nx, a[1] + side * ny, a[0] + side * nx - 0.15 * d[0], a[1] + side * ny - 0.15 * d[1], 0.4);
      }
      blob(a[0], a[1], 0.015, 0.4);
      break;
    }
  }
  std::discrete_distribution<std::size_t> pick(weight.begin(), weight.end());
  TensorD pts(Shape{t.point_count, 3});
  for (int i = 0; i < t.point_count; ++i) {
    const auto& st = strokes[pick(rng)];
    const double a = u01(rng);
    pts[i * 3 + 0] = st.x0 + a * (st.x1 - st.x0) + jit(rng);
    pts[i * 3 + 1] = st.y0 + a * (st.y1 - st.y0) + jit(rng);
    pts[i * 3 + 2] = (u01(rng) - 0.5) * 0.05;
  }
  return pts;
}

inline std::string scene_text(const TaskSpec& t, const Scene& s) {
  switch (t.kind) {
    case TaskKind::Reach: return t.targets.at(static_cast<std::size_t>(s.variation)).text;
    case TaskKind::HingedLid: return "open the lid";
    case TaskKind::Drawer: return "pull the drawer";
  }
  return {};
}

// ------------------------------------------------------ expert demonstrations

struct ExpertDemo {
  data::Demonstration demo;
  Scene scene;
  std::vector<std::int64_t> keyframes;
  std::int64_t grasp_frame = -1;  // first frame with the gripper closed
};

namespace detail {

/// Joint path grown by warm-started IK towards successive Cartesian targets.
class Tracker {
 public:
  Tracker(const kin::KinematicChain& chain, std::vector<double> q0) : chain_(chain) { push(std::move(q0), 0); }

  bool track(const Pose7& target, int grip) {
    const auto out = kin::ik_solve_dls(chain_, to_pose(target), q_.back(), ik_);
    if (!out.ok()) return false;
    push(out.joints, grip);
    return true;
  }
  void hold(int grip, int frames) {
    for (int i = 0; i < frames; ++i) push(q_.back(), grip);
  }
  Pose7 pose() const { return kin::forward_kinematics<double>(chain_, std::span<const double>(q_.back())).row(); }
  std::int64_t frames() const { return static_cast<std::int64_t>(q_.size()); }
  int gripper() const { return grip_.back(); }

  /// Interpolates translation linearly and rotation by slerp from the current
  /// pose to `goal`, one frame per `step` meters or `yaw_step` radians.
  bool move(const Pose7& goal, int grip, const PlannerNoise& pn) {
    const Pose7 from = pose();
    const double dist = translation_error(from.data(), goal.data());
    const double ang = rotation_error(from.data(), goal.data());
    const int n = std::max({2, static_cast<int>(std::ceil(dist / pn.step)), static_cast<int>(std::ceil(ang / pn.yaw_step))});
    const std::array<double, 4> qa{from[3], from[4], from[5], from[6]}, qb{goal[3], goal[4], goal[5], goal[6]};
    for (int i = 1; i <= n; ++i) {
      const double a = static_cast<double>(i) / n;
      const auto q = kin::slerp(qa, qb, a);
      const Pose7 p{from[0] + a * (goal[0] - from[0]), from[1] + a * (goal[1] - from[1]),
                    from[2] + a * (goal[2] - from[2]), q[0], q[1], q[2], q[3]};
      if (!track(p, grip)) return false;
    }
    return true;
  }

  TensorD joints() const {
    const auto n = static_cast<std::int64_t>(chain_.dof());
    TensorD out(Shape{frames(), n});
    for (std::int64_t r = 0; r < frames(); ++r) std::copy(q_[static_cast<std::size_t>(r)].begin(), q_[static_cast<std::size_t>(r)].end(), out.ptr() + r * n);
    return out;
  }
  const std::vector<int>& grip() const { return grip_; }

 private:
  void push(std::vector<double> q, int g) {
    q_.push_back(std::move(q));
    grip_.push_back(g);
  }
  const kin::KinematicChain& chain_;
  kin::IKOptions ik_{.tol = 2e-4};
  std::vector<std::vector<double>> q_;
  std::vector<int> grip_;
};

/// Random detour waypoint between two planar poses.
inline Pose7 waypoint(const Pose7& a, const Pose7& b, const PlannerNoise& pn, std::mt19937_64& rng) {
  std::normal_distribution<double> dt(0.0, pn.waypoint_sigma), dr(0.0, pn.yaw_sigma);
  const double ya = kin::yaw_of(std::array<double, 4>{a[3], a[4], a[5], a[6]});
  const double yb = kin::yaw_of(std::array<double, 4>{b[3], b[4], b[5], b[6]});
  double dy = std::remainder(yb - ya, 2.0 * std::numbers::pi);
  const double x = 0.5 * (a[0] + b[0]), y = 0.5 * (a[1] + b[1]);
  if (pn.waypoint_sigma == 0.0 && pn.yaw_sigma == 0.0) return planar_pose(x, y, ya + 0.5 * dy);
  return planar_pose(x + dt(rng), y + dt(rng), ya + 0.5 * dy + dr(rng));
}

}  // namespace detail

/// Start configuration: home plus uniform noise, clamped into the limits.
inline std::vector<double> sample_start(const TaskSpec& t, const PlannerNoise& pn, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-pn.start_noise, pn.start_noise);
  std::vector<double> q = t.home;
  for (auto& v : q) v += pn.start_noise > 0 ? u(rng) : 0.0;
  t.chain.clamp<double>(q);
  return q;
}

/// Maximum constraint deviation over frames [from, rows) of a pose path.
inline double max_deviation(const TaskSpec& t, const Scene& s, const TensorD& poses, std::int64_t from) {
  double m = 0;
  for (std::int64_t r = std::max<std::int64_t>(from, 0); r < poses.dim(0); ++r) {
    m = std::max(m, constraint_deviation(t, s, poses.ptr() + r * 7));
  }
  return m;
}

/// Expert demonstration for an already sampled scene. Free-space motion goes
/// through a random waypoint; constrained motion tracks the handle along the
/// lid arc or drawer line. Attempts failing IK or the self-checks (keyframe
/// layout, constraint < delta / 2, final goal) are redrawn.
inline ExpertDemo gen_expert_demo(const TaskSpec& t, const Scene& scene, const PlannerNoise& pn, std::mt19937_64& rng) {
  t.validate();
  for (int attempt = 0; attempt <= pn.max_retries; ++attempt) {
    detail::Tracker tr(t.chain, sample_start(t, pn, rng));
    const bool reach = t.kind == TaskKind::Reach;
    const Pose7 target = reach ? final_goal(t, scene) : grasp_pose(t, scene);
    const Pose7 via = detail::waypoint(tr.pose(), target, pn, rng);
    if (!tr.move(via, 0, pn) || !tr.move(target, 0, pn)) continue;
    std::int64_t grasp = -1, key1 = -1;
    if (!reach) {
      tr.hold(1, 1);
      grasp = tr.frames() - 1;
      tr.hold(1, pn.dwell);
      key1 = tr.frames() - 1;
      bool ok = true;
      if (t.kind == TaskKind::HingedLid) {
        const int n = std::max(2, static_cast<int>(std::ceil(t.radius * t.opening / pn.step)));
        for (int i = 1; i <= n && ok; ++i) ok = tr.track(lid_handle_pose(t, scene, t.closed_angle + t.opening * i / n), 1);
      } else {
        const int n = std::max(2, static_cast<int>(std::ceil(t.extent / pn.step)));
        for (int i = 1; i <= n && ok; ++i) ok = tr.track(drawer_handle_pose(t, scene, static_cast<double>(i) / n), 1);
      }
      if (!ok) continue;
    }
    tr.hold(tr.gripper(), pn.dwell);

    ExpertDemo e;
    e.scene = scene;
    e.grasp_frame = grasp;
    e.demo = data::make_demo(t.chain, tr.joints(), tr.grip(), scene_points(t, scene, rng), t.task_id(),
                             scene_text(t, scene));
    e.keyframes = data::discover_keyframes(e.demo);
    std::vector<std::int64_t> expect;
    if (!reach) expect.push_back(key1);
    expect.push_back(e.demo.length() - 1);
    if (e.keyframes != expect) continue;
    const Pose7 goal = final_goal(t, scene);
    if (!within_goal(t, e.demo.poses.ptr() + (e.demo.length() - 1) * 7, goal.data())) continue;
    if (!reach && max_deviation(t, scene, e.demo.poses, grasp) >= 0.5 * t.delta) continue;
    return e;
  }
  throw PlanningError(std::string("expert planner failed on ") + to_string(t.kind) + " after " +
                      std::to_string(pn.max_retries + 1) + " attempts");
}

inline ExpertDemo gen_expert_demo(const TaskSpec& t, const PlannerNoise& pn, std::mt19937_64& rng) {
  const Scene s = sample_scene(t, rng);
  return gen_expert_demo(t, s, pn, rng);
}

// -------------------------------------------------------------- controllers

enum class ControllerKind { Line, PoseIK, RKD };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::Line: return "line";
    case ControllerKind::PoseIK: return "pose-ik";
    case ControllerKind::RKD: return "rkd";
  }
  return "?";
}

inline ControllerKind controller_from_string(const std::string& s) {
  if (s == "line") return ControllerKind::Line;
  if (s == "pose-ik") return ControllerKind::PoseIK;
  if (s == "rkd") return ControllerKind::RKD;
  throw ArgumentError("unknown controller '" + s + "'");
}

enum class FailureReason { None, GoalMiss, ConstraintViolation, IKFailure, LimitViolation };

inline const char* to_string(FailureReason r) {
  switch (r) {
    case FailureReason::None: return "None";
    case FailureReason::GoalMiss: return "GoalMiss";
    case FailureReason::ConstraintViolation: return "ConstraintViolation";
    case FailureReason::IKFailure: return "IKFailure";
    case FailureReason::LimitViolation: return "LimitViolation";
  }
  return "?";
}

inline FailureReason failure_from_string(const std::string& s) {
  for (auto r : {FailureReason::None, FailureReason::GoalMiss, FailureReason::ConstraintViolation,
                 FailureReason::IKFailure, FailureReason::LimitViolation}) {
    if (s == to_string(r)) return r;
  }
  throw FormatError("unknown failure reason '" + s + "'");
}

struct Controller {
  ControllerKind kind = ControllerKind::RKD;
  const rkd::RKDModel* model = nullptr;  // required for rkd and pose-ik
  kin::IKOptions ik;
  double rank = 1.0;  // rank condition at inference
};

struct ControlOutput {
  TensorD joints;  // [64, N], row 0 the current configuration
  FailureReason failure = FailureReason::None;
  std::string detail;
};

namespace detail {

/// Per-row warm-started IK along a pose path (rows >= 1).
inline ControlOutput ik_along(const kin::KinematicChain& chain, const TensorD& poses, std::span<const double> q0,
                              const kin::IKOptions& opt) {
  const auto n = static_cast<std::int64_t>(chain.dof());
  ControlOutput out;
  out.joints = TensorD(Shape{poses.dim(0), n});
  std::copy(q0.begin(), q0.end(), out.joints.ptr());
  std::vector<double> q(q0.begin(), q0.end());
  for (std::int64_t r = 1; r < poses.dim(0); ++r) {
    const auto res = kin::ik_solve_dls(chain, kin::PoseD::from_row({poses.ptr() + r * 7, 7}), q, opt);
    if (!res.ok()) {
      out.failure = FailureReason::IKFailure;
      out.detail = std::string("IK ") + kin::to_string(res.status) + " at row " + std::to_string(r);
      out.joints = data::slice_rows(out.joints, 0, r - 1);
      return out;
    }
    q = res.joints;
    std::copy(q.begin(), q.end(), out.joints.ptr() + r * n);
  }
  return out;
}

}  // namespace detail

/// Straight Cartesian segment from the start pose to the goal, 64 rows.
inline TensorD line_poses(const Pose7& from, const Pose7& to, std::int64_t rows = rkd::kHorizon) {
  TensorD out(Shape{rows, 7});
  const std::array<double, 4> qa{from[3], from[4], from[5], from[6]}, qb{to[3], to[4], to[5], to[6]};
  for (std::int64_t r = 0; r < rows; ++r) {
    const double a = static_cast<double>(r) / static_cast<double>(rows - 1);
    const auto q = kin::slerp(qa, qb, a);
    double* p = out.ptr() + r * 7;
    for (int k = 0; k < 3; ++k) p[k] = from[static_cast<std::size_t>(k)] + a * (to[static_cast<std::size_t>(k)] - from[static_cast<std::size_t>(k)]);
    for (int k = 0; k < 4; ++k) p[3 + k] = q[static_cast<std::size_t>(k)];
  }
  std::copy(from.begin(), from.end(), out.ptr());
  std::copy(to.begin(), to.end(), out.ptr() + (rows - 1) * 7);
  return out;
}

/// Joint trajectory towards `c.goal_pose` from the configuration `c.start_joints`.
inline ControlOutput run_controller(const Controller& ctl, const kin::KinematicChain& chain, const rkd::Conditions& c,
                                    std::mt19937_64& rng) {
  switch (ctl.kind) {
    case ControllerKind::Line:
      return detail::ik_along(chain, line_poses(c.start_pose, c.goal_pose), c.start_joints, ctl.ik);
    case ControllerKind::PoseIK: {
      if (!ctl.model) throw ArgumentError("pose-ik controller needs a trained model");
      return detail::ik_along(chain, rkd::sample_trajectory(*ctl.model, rkd::Head::Pose, c, rng), c.start_joints, ctl.ik);
    }
    case ControllerKind::RKD: {
      if (!ctl.model) throw ArgumentError("rkd controller needs a trained model");
      ControlOutput out;
      out.joints = rkd::rkd_act(*ctl.model, c, rng).joints;
      return out;
    }
  }
  throw ArgumentError("unknown controller");
}

// ------------------------------------------------------------------ rollout

struct Goal {
  Pose7 pose{};
  int gripper = 0;
};

/// What the high-level policy sees before each sub-goal.
struct Observation {
  const TaskSpec* task = nullptr;
  const TensorD* points = nullptr;
  int token = 0;
  int ordinal = 0;  // index of the sub-goal being requested
  int gripper = 0;
  std::vector<double> joints;
};

using GoalPolicy = std::function<Goal(const Observation&)>;

struct EpisodeResult {
  int index = 0;
  std::uint64_t seed = 0;
  bool success = false;
  FailureReason failure = FailureReason::None;
  std::string detail;
  int variation = 0;
  TensorD joints;                 // executed configurations, row 0 the start
  TensorD poses;                  // FK of the executed configurations
  std::vector<int> gripper;       // per executed row
  std::vector<double> deviation;  // per executed row, zero outside the constrained phase
  std::vector<Goal> goals;        // sub-goals as issued
  double max_deviation = 0.0;
  double final_translation_error = 0.0;
  double final_rotation_error = 0.0;
  TensorD expert_poses;  // expert demonstration path for the same scene
};

/// Independent engine per (run seed, episode, stream).
inline std::mt19937_64 episode_rng(std::uint64_t seed, int index, int stream) {
  std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(sq);
}

inline Pose7 canonical_fk(const kin::KinematicChain& chain, std::span<const double> q) {
  Pose7 p = kin::forward_kinematics<double>(chain, q).row();
  kin::canonicalize_quat(p.data() + 3);
  return p;
}

/// One episode: expert scene and start state, then per sub-goal observe,
/// query the goal (policy or expert keyframe), control, execute row by row
/// with limit and constraint checks, and finally test the task goal.
inline EpisodeResult rollout_hierarchical(const TaskSpec& task, const Controller& ctl, const GoalPolicy* policy,
                                          std::uint64_t seed, int index) {
  auto scene_rng = episode_rng(seed, index, 0);
  auto ctl_rng = episode_rng(seed, index, 1);
  const ExpertDemo expert = gen_expert_demo(task, task.planner, scene_rng);
  const auto& chain = task.chain;
  const auto n = static_cast<std::size_t>(chain.dof());

  EpisodeResult res;
  res.index = index;
  res.seed = seed;
  res.variation = expert.scene.variation;
  res.expert_poses = expert.demo.poses;
  std::vector<double> q(expert.demo.joints.ptr(), expert.demo.joints.ptr() + n);
  std::vector<double> rows_q, rows_p;
  int grip = 0;
  bool grasped = false;
  auto record = [&](const std::vector<double>& qr, const Pose7& p, double dev) {
    rows_q.insert(rows_q.end(), qr.begin(), qr.end());
    rows_p.insert(rows_p.end(), p.begin(), p.end());
    res.gripper.push_back(grip);
    res.deviation.push_back(dev);
    res.max_deviation = std::max(res.max_deviation, dev);
  };
  auto fail = [&](FailureReason r, std::string why) {
    res.failure = r;
    res.detail = std::move(why);
  };
  record(q, canonical_fk(chain, q), 0.0);

  for (int k = 0; k < task.keyframe_count() && res.failure == FailureReason::None; ++k) {
    Goal goal;
    if (policy) {
      Observation ob{&task, &expert.demo.points, expert.scene.variation, k, grip, q};
      goal = (*policy)(ob);
    } else {
      const auto key = expert.keyframes.at(static_cast<std::size_t>(k));
      std::copy(expert.demo.poses.ptr() + key * 7, expert.demo.poses.ptr() + key * 7 + 7, goal.pose.begin());
      goal.gripper = expert.demo.gripper[static_cast<std::size_t>(key)];
    }
    res.goals.push_back(goal);

    rkd::Conditions c;
    c.start_pose = canonical_fk(chain, q);
    c.goal_pose = goal.pose;
    c.state = data::robot_state(q, c.start_pose);
    c.gripper = grip;
    c.points = expert.demo.points;
    c.rank = ctl.rank;
    c.start_joints = q;
    const ControlOutput out = run_controller(ctl, chain, c, ctl_rng);
    if (out.failure != FailureReason::None) {
      fail(out.failure, "sub-goal " + std::to_string(k) + ": " + out.detail);
      break;
    }
    for (std::int64_t r = 1; r < out.joints.dim(0); ++r) {
      std::vector<double> qr(out.joints.ptr() + r * static_cast<std::int64_t>(n),
                             out.joints.ptr() + (r + 1) * static_cast<std::int64_t>(n));
      const bool finite = std::all_of(qr.begin(), qr.end(), [](double v) { return std::isfinite(v); });
      if (!finite || !chain.within_limits(qr, 1e-9)) {
        fail(FailureReason::LimitViolation, "sub-goal " + std::to_string(k) + ": row " + std::to_string(r) +
                                                " outside joint limits");
        break;
      }
      q = std::move(qr);
      const Pose7 p = canonical_fk(chain, q);
      const double dev = grasped ? constraint_deviation(task, expert.scene, p.data()) : 0.0;
      record(q, p, dev);
      if (dev > task.delta) {
        fail(FailureReason::ConstraintViolation, "sub-goal " + std::to_string(k) + ": deviation " +
                                                     std::to_string(dev) + " m at row " + std::to_string(r));
        break;
      }
    }
    if (res.failure != FailureReason::None) break;
    if (goal.gripper != grip) {
      const Pose7 p = canonical_fk(chain, q);
      if (goal.gripper == 1 && task.constrained()) {
        const Pose7 h = grasp_pose(task, expert.scene);
        if (!within_goal(task, p.data(), h.data())) {
          fail(FailureReason::GoalMiss, "grasp missed the handle by " + std::to_string(translation_error(p.data(), h.data())) + " m");
          break;
        }
        grasped = true;
      } else if (goal.gripper == 0) {
        grasped = false;
      }
      grip = goal.gripper;
      record(q, p, grasped ? constraint_deviation(task, expert.scene, p.data()) : 0.0);
    }
  }

  const auto rows = static_cast<std::int64_t>(res.gripper.size());
  res.joints = TensorD(Shape{rows, static_cast<std::int64_t>(n)}, std::move(rows_q));
  res.poses = TensorD(Shape{rows, 7}, std::move(rows_p));
  const Pose7 goal = final_goal(task, expert.scene);
  const double* last = res.poses.ptr() + (rows - 1) * 7;
  res.final_translation_error = translation_error(last, goal.data());
  res.final_rotation_error = rotation_error(last, goal.data());
  if (res.failure == FailureReason::None && !within_goal(task, last, goal.data())) {
    fail(FailureReason::GoalMiss, "final pose " + std::to_string(res.final_translation_error) + " m / " +
                                      std::to_string(res.final_rotation_error) + " rad from the goal");
  }
  res.success = res.failure == FailureReason::None;
  return res;
}

/// Episodes [0, count) on a pool of `jobs` threads; results in episode order.
inline std::vector<EpisodeResult> run_episodes(const TaskSpec& task, const Controller& ctl, const GoalPolicy* policy,
                                               std::uint64_t seed, int count, int jobs = 1) {
  if (count < 0) throw ArgumentError("episode count must be nonnegative");
  std::vector<EpisodeResult> out(static_cast<std::size_t>(count));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < count; i = next++) {
      try {
        out[static_cast<std::size_t>(i)] = rollout_hierarchical(task, ctl, policy, seed, i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int workers = std::clamp(jobs, 1, std::max(1, count));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// --------------------------------------------------------------- evaluation

struct Summary {
  int episodes = 0;
  double success_rate = 0.0;
  double ik_error_rate = 0.0;
  double mean_deviation = 0.0;  // mean over episodes of the max constraint deviation
  std::array<int, 5> reasons{};  // indexed by FailureReason
};

inline Summary evaluate(const std::vector<EpisodeResult>& results) {
  if (results.empty()) throw ArgumentError("evaluate needs at least one episode");
  Summary s;
  s.episodes = static_cast<int>(results.size());
  for (const auto& r : results) {
    if (r.success != (r.failure == FailureReason::None)) throw ArgumentError("episode success flag inconsistent");
    s.success_rate += r.success ? 1.0 : 0.0;
    s.ik_error_rate += r.failure == FailureReason::IKFailure ? 1.0 : 0.0;
    s.mean_deviation += r.max_deviation;
    ++s.reasons[static_cast<std::size_t>(r.failure)];
  }
  s.success_rate /= s.episodes;
  s.ik_error_rate /= s.episodes;
  s.mean_deviation /= s.episodes;
  return s;
}

// ------------------------------------------------------------- task configs

inline nlohmann::json to_json(const PlannerNoise& p) {
  return {{"waypoint_sigma", p.waypoint_sigma}, {"yaw_sigma", p.yaw_sigma}, {"step", p.step},
          {"yaw_step", p.yaw_step},             {"dwell", p.dwell},         {"max_retries", p.max_retries},
          {"start_noise", p.start_noise}};
}

inline PlannerNoise planner_from_json(const nlohmann::json& j, PlannerNoise p = {}) {
  p.waypoint_sigma = j.value("waypoint_sigma", p.waypoint_sigma);
  p.yaw_sigma = j.value("yaw_sigma", p.yaw_sigma);
  p.step = j.value("step", p.step);
  p.yaw_step = j.value("yaw_step", p.yaw_step);
  p.dwell = j.value("dwell", p.dwell);
  p.max_retries = j.value("max_retries", p.max_retries);
  p.start_noise = j.value("start_noise", p.start_noise);
  if (!(p.waypoint_sigma >= 0 && p.yaw_sigma >= 0 && p.step > 0 && p.yaw_step > 0 && p.dwell >= 1 &&
        p.max_retries >= 0 && p.start_noise >= 0)) {
    throw FormatError("invalid planner settings");
  }
  return p;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j = {{"task", to_string(t.kind)},
                      {"chain", kin::chain_to_json(t.chain)},
                      {"home", t.home},
                      {"delta", t.delta},
                      {"goal_tolerance", {{"translation", t.goal_tol_t}, {"rotation", t.goal_tol_r}}},
                      {"scene_jitter", t.scene_jitter},
                      {"points", t.point_count},
                      {"point_noise", t.point_noise},
                      {"planner", to_json(t.planner)}};
  switch (t.kind) {
    case TaskKind::Reach: {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& r : t.targets) a.push_back({{"x", r.x}, {"y", r.y}, {"yaw_deg", r.yaw * 180 / std::numbers::pi}, {"text", r.text}});
      j["targets"] = a;
      break;
    }
    case TaskKind::HingedLid:
      j["hinge"] = t.hinge;
      j["radius"] = t.radius;
      j["closed_deg"] = t.closed_angle * 180 / std::numbers::pi;
      j["opening_deg"] = t.opening * 180 / std::numbers::pi;
      break;
    case TaskKind::Drawer:
      j["handle"] = t.drawer_start;
      j["slide"] = t.slide_dir;
      j["extent"] = t.extent;
      j["yaw_deg"] = t.drawer_yaw * 180 / std::numbers::pi;
      break;
  }
  return j;
}

/// Task from a JSON document. "chain" is either an inline chain object or a
/// path resolved against `base_dir`.
inline TaskSpec task_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  constexpr double deg = std::numbers::pi / 180.0;
  try {
    TaskSpec t;
    t.kind = task_kind_from_string(j.at("task").get<std::string>());
    if (j.contains("chain")) {
      const auto& c = j.at("chain");
      if (c.is_string()) {
        std::filesystem::path p = c.get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        t.chain = kin::load_chain(p.string());
      } else {
        t.chain = kin::chain_from_json(c);
      }
    }
    t.home = j.value("home", std::vector<double>(t.home));
    t.delta = j.value("delta", t.delta);
    if (j.contains("goal_tolerance")) {
      t.goal_tol_t = j["goal_tolerance"].value("translation", t.goal_tol_t);
      t.goal_tol_r = j["goal_tolerance"].value("rotation", t.goal_tol_r);
    }
    t.scene_jitter = j.value("scene_jitter", t.scene_jitter);
    t.point_count = j.value("points", t.point_count);
    t.point_noise = j.value("point_noise", t.point_noise);
    if (j.contains("planner")) t.planner = planner_from_json(j["planner"]);
    if (j.contains("targets")) {
      t.targets.clear();
      for (const auto& r : j["targets"]) {
        t.targets.push_back({r.at("x").get<double>(), r.at("y").get<double>(), r.at("yaw_deg").get<double>() * deg,
                             r.value("text", std::string("reach target ") + std::to_string(t.targets.size()))});
      }
    }
    t.hinge = j.value("hinge", t.hinge);
    t.radius = j.value("radius", t.radius);
    if (j.contains("closed_deg")) t.closed_angle = j["closed_deg"].get<double>() * deg;
    if (j.contains("opening_deg")) t.opening = j["opening_deg"].get<double>() * deg;
    t.drawer_start = j.value("handle", t.drawer_start);
    t.slide_dir = j.value("slide", t.slide_dir);
    t.extent = j.value("extent", t.extent);
    if (j.contains("yaw_deg")) t.drawer_yaw = j["yaw_deg"].get<double>() * deg;
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("task config: ") + e.what());
  }
}

inline TaskSpec load_task(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open task config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task config " + path + ": " + e.what());
  }
  return task_from_json(j, std::filesystem::path(path).parent_path());
}

/// Built-in task by name with default geometry.
inline TaskSpec default_task(TaskKind k) {
  TaskSpec t;
  t.kind = k;
  return t;
}

}  // namespace hdp::env
