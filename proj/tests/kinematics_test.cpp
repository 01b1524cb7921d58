#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "hdp/kinematics.hpp"
#include "hdp/numcore.hpp"

namespace kin = hdp::kin;
namespace nc = hdp::nc;
using nc::TensorD;

namespace {

constexpr double kPi = std::numbers::pi;

kin::KinematicChain two_link() {
  return kin::chain_from_json(nlohmann::json::parse(R"({
    "name": "two",
    "links": [
      {"axis": [0, 0, 1], "offset": [1, 0, 0], "limits": [-3.2, 3.2]},
      {"axis": [0, 0, 1], "offset": [1, 0, 0], "limits": [-3.2, 3.2]}
    ]})"));
}

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Vector3d v(n(rng), n(rng), n(rng));
  return v.normalized();
}

kin::KinematicChain random_chain(int dof, std::mt19937_64& rng, double limit = kPi) {
  std::uniform_real_distribution<double> off(-0.3, 0.3);
  std::vector<kin::Link> links(static_cast<std::size_t>(dof));
  for (auto& l : links) {
    l.axis = random_unit(rng);
    l.offset = Eigen::Vector3d(off(rng), off(rng), off(rng));
    l.rot_offset = Eigen::Quaterniond(Eigen::AngleAxisd(off(rng) * 3, random_unit(rng)));
    l.lo = -limit;
    l.hi = limit;
  }
  return kin::KinematicChain("random", std::move(links));
}

kin::JointVector random_joints(const kin::KinematicChain& c, std::mt19937_64& rng, double margin = 0.0) {
  kin::JointVector q(static_cast<std::size_t>(c.dof()));
  for (int i = 0; i < c.dof(); ++i) {
    std::uniform_real_distribution<double> u(c.link(i).lo + margin, c.link(i).hi - margin);
    q[static_cast<std::size_t>(i)] = u(rng);
  }
  return q;
}

// Independent oracle: product of 4x4 homogeneous transforms.
Eigen::Matrix4d matrix_chain(const kin::KinematicChain& c, const kin::JointVector& q) {
  Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
  for (int i = 0; i < c.dof(); ++i) {
    const auto& l = c.link(i);
    Eigen::Matrix4d rj = Eigen::Matrix4d::Identity();
    rj.block<3, 3>(0, 0) = Eigen::AngleAxisd(q[static_cast<std::size_t>(i)], l.axis).toRotationMatrix();
    Eigen::Matrix4d tr = Eigen::Matrix4d::Identity();
    tr.block<3, 1>(0, 3) = l.offset;
    Eigen::Matrix4d ro = Eigen::Matrix4d::Identity();
    ro.block<3, 3>(0, 0) = l.rot_offset.toRotationMatrix();
    t = t * rj * tr * ro;
  }
  return t;
}

TensorD joints_tensor(const std::vector<kin::JointVector>& rows) {
  const auto n = static_cast<std::int64_t>(rows.front().size());
  TensorD t(nc::Shape{static_cast<std::int64_t>(rows.size()), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::int64_t i = 0; i < n; ++i) t[static_cast<std::int64_t>(r) * n + i] = rows[r][static_cast<std::size_t>(i)];
  }
  return t;
}

}  // namespace

TEST(LoadChain, TwoLinkPlanar) {
  const auto c = two_link();
  EXPECT_EQ(c.dof(), 2);
  EXPECT_DOUBLE_EQ(c.reach(), 2.0);
}

TEST(LoadChain, NonUnitAxisIsNormalizedWithWarning) {
  std::ostringstream warn;
  const auto c = kin::chain_from_json(
      nlohmann::json::parse(R"({"links": [{"axis": [0, 0, 2], "offset": [1, 0, 0], "limits": [-1, 1]}]})"), &warn);
  EXPECT_EQ(c.link(0).axis, Eigen::Vector3d(0, 0, 1));
  EXPECT_NE(warn.str().find("warning"), std::string::npos);
}

TEST(LoadChain, RejectsInvertedLimits) {
  EXPECT_THROW(kin::chain_from_json(nlohmann::json::parse(
                   R"({"links": [{"axis": [0, 0, 1], "offset": [1, 0, 0], "limits": [1, -1]}]})")),
               hdp::FormatError);
}

TEST(LoadChain, RejectsMalformedDocuments) {
  const char* docs[] = {
      R"({"links": [{"axis": [0, 0, 1], "limits": [-1, 1], "mass": 3}]})",
      R"({"links": []})",
      R"({"links": [{"axis": [0, 0], "limits": [-1, 1]}]})",
      R"({"links": [{"axis": [0, 0, 0], "limits": [-1, 1]}]})",
      R"({"links": [{"axis": [0, 0, 1]}]})",
      R"({"joints": []})",
      R"([1, 2])",
  };
  for (const char* d : docs) {
    EXPECT_THROW(kin::chain_from_json(nlohmann::json::parse(d), nullptr), hdp::FormatError) << d;
  }
}

TEST(LoadChain, JsonRoundTrip) {
  std::mt19937_64 rng(4);
  const auto c = random_chain(5, rng);
  const auto back = kin::chain_from_json(kin::chain_to_json(c), nullptr);
  const auto q = random_joints(c, rng);
  const auto a = kin::forward_kinematics(c, q).row();
  const auto b = kin::forward_kinematics(back, q).row();
  for (int k = 0; k < 7; ++k) EXPECT_NEAR(a[static_cast<std::size_t>(k)], b[static_cast<std::size_t>(k)], 1e-12);
}

TEST(ForwardKinematics, TwoLinkExtended) {
  const auto p = kin::forward_kinematics(two_link(), kin::JointVector{0, 0});
  EXPECT_NEAR(p.translation[0], 2, 1e-12);
  EXPECT_NEAR(p.translation[1], 0, 1e-12);
  EXPECT_NEAR(p.translation[2], 0, 1e-12);
  EXPECT_NEAR(p.rotation[0], 1, 1e-12);
  EXPECT_NEAR(p.rotation[3], 0, 1e-12);
}

TEST(ForwardKinematics, TwoLinkQuarterTurn) {
  const auto p = kin::forward_kinematics(two_link(), kin::JointVector{kPi / 2, 0});
  EXPECT_NEAR(p.translation[0], 0, 1e-12);
  EXPECT_NEAR(p.translation[1], 2, 1e-12);
  EXPECT_NEAR(p.rotation[0], std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(p.rotation[1], 0, 1e-12);
  EXPECT_NEAR(p.rotation[2], 0, 1e-12);
  EXPECT_NEAR(p.rotation[3], std::sqrt(0.5), 1e-12);
}

TEST(ForwardKinematics, DimensionMismatchThrows) {
  EXPECT_THROW(kin::forward_kinematics(two_link(), kin::JointVector{0, 0, 0}), hdp::ShapeError);
  EXPECT_THROW(kin::forward_kinematics<double>(two_link(), TensorD(nc::Shape{4, 3})), hdp::ShapeError);
}

TEST(ForwardKinematics, MatchesMatrixChainOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto c = random_chain(7, rng);
    const auto q = random_joints(c, rng);
    const auto p = kin::forward_kinematics(c, q);
    const Eigen::Matrix4d t = matrix_chain(c, q);
    for (int k = 0; k < 3; ++k) ASSERT_NEAR(p.translation[static_cast<std::size_t>(k)], t(k, 3), 1e-5);
    const Eigen::Quaterniond pq(p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]);
    ASSERT_LT((pq.toRotationMatrix() - t.block<3, 3>(0, 0)).cwiseAbs().maxCoeff(), 1e-5);
    ASSERT_NEAR(p.quat_norm(), 1.0, 1e-12);
  }
}

TEST(ForwardKinematics, BatchedMatchesSingle) {
  std::mt19937_64 rng(8);
  const auto c = random_chain(4, rng);
  std::vector<kin::JointVector> rows{random_joints(c, rng), random_joints(c, rng), random_joints(c, rng)};
  const auto out = kin::forward_kinematics<double>(c, joints_tensor(rows));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto single = kin::forward_kinematics(c, rows[r]).row();
    for (int k = 0; k < 7; ++k) EXPECT_DOUBLE_EQ(out[static_cast<std::int64_t>(r) * 7 + k], single[static_cast<std::size_t>(k)]);
  }
}

TEST(FkPullback, ZeroCotangentsGiveZero) {
  std::mt19937_64 rng(9);
  const auto c = random_chain(7, rng);
  const TensorD j = joints_tensor({random_joints(c, rng), random_joints(c, rng)});
  const auto g = kin::fk_pullback<double>(c, j, TensorD(nc::Shape{2, 7}));
  EXPECT_EQ(g, TensorD(nc::Shape{2, 7}));
}

TEST(FkPullback, StationaryAtOwnPose) {
  std::mt19937_64 rng(10);
  const auto c = random_chain(7, rng);
  const TensorD j = joints_tensor({random_joints(c, rng)});
  nc::Graph<double> g;
  auto jv = g.leaf(j);
  auto pose = kin::fk_op(c, jv);
  auto target = g.constant(pose.value());
  auto grads = g.backward(nc::sum(kin::pose_distance_op(pose, target, 0.5)));
  for (double v : grads.at(jv.id()).data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(FkPullback, MatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_chain(7, rng);
    const TensorD j = joints_tensor({random_joints(c, rng), random_joints(c, rng)});
    TensorD cot(nc::Shape{2, 7});
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : cot.data()) v = u(rng);
    auto rep = nc::finite_diff_check<double>(
        [&](nc::Graph<double>& g, nc::Var<double> jv) {
          return nc::sum(nc::mul(kin::fk_op(c, jv), g.constant(cot)));
        },
        j);
    ASSERT_TRUE(rep.passed()) << "trial " << trial << " rel " << rep.max_rel_error;
  }
}

TEST(FkPullback, PoseDistanceCompositionMatchesFiniteDifferences) {
  std::mt19937_64 rng(78);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = random_chain(7, rng);
    const TensorD j = joints_tensor({random_joints(c, rng)});
    const TensorD target = kin::forward_kinematics<double>(c, joints_tensor({random_joints(c, rng)}));
    auto rep = nc::finite_diff_check<double>(
        [&](nc::Graph<double>& g, nc::Var<double> jv) {
          return nc::sum(kin::pose_distance_op(kin::fk_op(c, jv), g.constant(target), 0.5));
        },
        j);
    ASSERT_TRUE(rep.passed()) << "trial " << trial << " rel " << rep.max_rel_error;
  }
}

TEST(PoseDistance, Examples) {
  kin::PoseD a;
  a.translation = {0.3, -0.2, 0.1};
  a.rotation = kin::quat_from_euler(0.4, 0.1, -0.3);
  EXPECT_NEAR(kin::pose_distance(a, a), 0.0, 1e-15);
  kin::PoseD neg = a;
  for (auto& v : neg.rotation) v = -v;
  EXPECT_NEAR(kin::pose_distance(a, neg), 0.0, 1e-15);
  kin::PoseD shifted = a;
  shifted.translation[0] += 1.0;
  for (double w : {0.0, 0.5, 3.0}) EXPECT_NEAR(kin::pose_distance(a, shifted, w), 1.0, 1e-12);
}

TEST(PoseDistance, RejectsNonUnitQuaternion) {
  kin::PoseD a, b;
  b.rotation = {0.5, 0, 0, 0};
  EXPECT_THROW(kin::pose_distance(a, b), hdp::ArgumentError);
}

TEST(PoseDistance, MetricProperties) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int i = 0; i < 500; ++i) {
    kin::PoseD a, b;
    a.translation = {u(rng), u(rng), u(rng)};
    b.translation = {u(rng), u(rng), u(rng)};
    a.rotation = kin::quat_from_euler(u(rng), u(rng) / 2, u(rng));
    b.rotation = kin::quat_from_euler(u(rng), u(rng) / 2, u(rng));
    const double d = kin::pose_distance(a, b);
    EXPECT_GT(d, 0.0);
    EXPECT_DOUBLE_EQ(d, kin::pose_distance(b, a));
    kin::PoseD bn = b;
    for (auto& v : bn.rotation) v = -v;
    EXPECT_NEAR(d, kin::pose_distance(a, bn), 1e-12);
  }
}

TEST(Quaternion, EulerRoundTrip) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    const double yaw = u(rng), pitch = u(rng) / 2, roll = u(rng);
    const auto e = kin::euler_from_quat(kin::quat_from_euler(yaw, pitch, roll));
    EXPECT_NEAR(e[0], yaw, 1e-9);
    EXPECT_NEAR(e[1], pitch, 1e-9);
    EXPECT_NEAR(e[2], roll, 1e-9);
  }
  EXPECT_NEAR(kin::yaw_of(kin::quat_from_yaw(1.2)), 1.2, 1e-12);
}

TEST(IK, RecoversFeasibleTargets) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  int ok = 0;
  const int trials = 500;
  for (int t = 0; t < trials; ++t) {
    const auto c = random_chain(7, rng);
    const auto qstar = random_joints(c, rng, 0.3);
    auto init = qstar;
    for (auto& v : init) v += jitter(rng);
    const auto target = kin::forward_kinematics(c, qstar);
    const auto out = kin::ik_solve_dls(c, target, init);
    if (out.ok()) {
      ++ok;
      EXPECT_TRUE(c.within_limits(out.joints));
      const auto p = kin::forward_kinematics(c, out.joints);
      double terr = 0;
      for (int k = 0; k < 3; ++k) terr += std::pow(p.translation[static_cast<std::size_t>(k)] - target.translation[static_cast<std::size_t>(k)], 2);
      EXPECT_LE(std::sqrt(terr), 1e-3);
      EXPECT_LE(kin::rotation_angle(p.rotation, target.rotation), 1e-3 + 1e-9);
    }
  }
  EXPECT_GE(ok, trials * 99 / 100);
}

TEST(IK, UnreachableTarget) {
  kin::PoseD target;
  target.translation = {2.5, 0, 0};
  EXPECT_EQ(kin::ik_solve_dls(two_link(), target, {0, 0}).status, kin::IKStatus::Unreachable);
}

TEST(IK, InvalidQuaternion) {
  kin::PoseD target;
  target.translation = {1.0, 0.5, 0};
  target.rotation = {0.5, 0, 0, 0};
  EXPECT_EQ(kin::ik_solve_dls(two_link(), target, {0, 0}).status, kin::IKStatus::InvalidQuaternion);
}

TEST(IK, LimitBlockedTarget) {
  // The target needs the shoulder at pi/2 but the joint stops at 0.5.
  const auto c = kin::planar_chain(2, 1.0, 0.5);
  kin::PoseD target;
  target.translation = {0, 2, 0};
  target.rotation = kin::quat_from_yaw(kPi / 2);
  const auto out = kin::ik_solve_dls(c, target, {0, 0});
  EXPECT_EQ(out.status, kin::IKStatus::LimitViolation);
  EXPECT_TRUE(c.within_limits(out.joints));
}
