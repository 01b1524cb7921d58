#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/error.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::kin {

using nc::Tensor;

/// Pose rows are laid out as (x, y, z, qw, qx, qy, qz).
inline constexpr int kPoseWidth = 7;

template <typename T>
struct Pose {
  std::array<T, 3> translation{};
  std::array<T, 4> rotation{T{1}, T{0}, T{0}, T{0}};  // (w, x, y, z)

  static Pose from_row(std::span<const T> row) {
    Pose p;
    for (int i = 0; i < 3; ++i) p.translation[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(i)];
    for (int i = 0; i < 4; ++i) p.rotation[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(3 + i)];
    return p;
  }
  std::array<T, 7> row() const {
    return {translation[0], translation[1], translation[2], rotation[0], rotation[1], rotation[2], rotation[3]};
  }
  T quat_norm() const {
    T s{0};
    for (T v : rotation) s += v * v;
    return std::sqrt(s);
  }
  bool normalized(T tol = T{1e-6}) const { return std::abs(quat_norm() - T{1}) <= tol; }
  Pose with_normalized_rotation() const {
    Pose p = *this;
    const T n = quat_norm();
    for (auto& v : p.rotation) v /= n;
    return p;
  }
  template <typename U>
  Pose<U> cast() const {
    Pose<U> p;
    for (int i = 0; i < 3; ++i) p.translation[static_cast<std::size_t>(i)] = static_cast<U>(translation[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 4; ++i) p.rotation[static_cast<std::size_t>(i)] = static_cast<U>(rotation[static_cast<std::size_t>(i)]);
    return p;
  }
};

using PoseD = Pose<double>;
using JointVector = std::vector<double>;

struct Link {
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rot_offset = Eigen::Quaterniond::Identity();
  double lo = -std::numbers::pi;
  double hi = std::numbers::pi;
};

/// Revolute serial chain. Each link rotates about its axis, then applies its
/// fixed translation and rotation offsets.
class KinematicChain {
 public:
  KinematicChain() = default;
  KinematicChain(std::string name, std::vector<Link> links) : name_(std::move(name)), links_(std::move(links)) {
    validate();
  }

  const std::string& name() const { return name_; }
  int dof() const { return static_cast<int>(links_.size()); }
  const std::vector<Link>& links() const { return links_; }
  const Link& link(int i) const { return links_[static_cast<std::size_t>(i)]; }

  /// Upper bound on the distance of the end effector from the base origin.
  double reach() const {
    double r = 0.0;
    for (const auto& l : links_) r += l.offset.norm();
    return r;
  }

  bool within_limits(std::span<const double> q, double tol = 0.0) const {
    if (static_cast<int>(q.size()) != dof()) return false;
    for (int i = 0; i < dof(); ++i) {
      if (q[static_cast<std::size_t>(i)] < link(i).lo - tol || q[static_cast<std::size_t>(i)] > link(i).hi + tol) return false;
    }
    return true;
  }

  template <typename T>
  void clamp(std::span<T> q) const {
    for (int i = 0; i < dof(); ++i) {
      auto& v = q[static_cast<std::size_t>(i)];
      v = std::clamp(v, static_cast<T>(link(i).lo), static_cast<T>(link(i).hi));
    }
  }

 private:
  void validate() const {
    if (links_.empty()) throw FormatError("chain needs at least one link");
    for (const auto& l : links_) {
      if (std::abs(l.axis.norm() - 1.0) > 1e-6) throw FormatError("chain axis not unit length");
      if (std::abs(l.rot_offset.norm() - 1.0) > 1e-6) throw FormatError("chain rotation offset not unit");
      if (!(l.lo < l.hi)) throw FormatError("joint limits require lo < hi");
    }
  }

  std::string name_;
  std::vector<Link> links_;
};

// ------------------------------------------------------------------ loading

/// Parses a chain description {"name", "links": [{"axis", "offset",
/// "rot_offset", "limits"}]}. Non-unit vectors are normalized with a warning
/// on `warn`; unknown fields are rejected.
inline KinematicChain chain_from_json(const nlohmann::json& doc, std::ostream* warn = &std::cerr) {
  auto fail = [](const std::string& m) -> void { throw FormatError("chain description: " + m); };
  if (!doc.is_object()) fail("document must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "name" && key != "links") fail("unknown field '" + key + "'");
  }
  if (!doc.contains("links") || !doc["links"].is_array()) fail("missing links array");
  std::vector<Link> links;
  try {
    for (const auto& lj : doc["links"]) {
      if (!lj.is_object()) fail("link must be an object");
      for (const auto& [key, _] : lj.items()) {
        if (key != "axis" && key != "offset" && key != "rot_offset" && key != "limits") {
          fail("unknown link field '" + key + "'");
        }
      }
      Link l;
      const auto axis = lj.at("axis").get<std::array<double, 3>>();
      l.axis = Eigen::Vector3d(axis[0], axis[1], axis[2]);
      const double an = l.axis.norm();
      if (an < 1e-12) fail("zero joint axis");
      if (std::abs(an - 1.0) > 1e-6) {
        if (warn) *warn << "warning: normalizing joint axis of length " << an << "\n";
        l.axis /= an;
      }
      if (lj.contains("offset")) {
        const auto off = lj["offset"].get<std::array<double, 3>>();
        l.offset = Eigen::Vector3d(off[0], off[1], off[2]);
      }
      if (lj.contains("rot_offset")) {
        const auto q = lj["rot_offset"].get<std::array<double, 4>>();
        l.rot_offset = Eigen::Quaterniond(q[0], q[1], q[2], q[3]);
        const double qn = l.rot_offset.norm();
        if (qn < 1e-12) fail("zero rotation offset quaternion");
        if (std::abs(qn - 1.0) > 1e-6) {
          if (warn) *warn << "warning: normalizing rotation offset of norm " << qn << "\n";
          l.rot_offset.normalize();
        }
      }
      const auto lim = lj.at("limits").get<std::array<double, 2>>();
      l.lo = lim[0];
      l.hi = lim[1];
      if (!(l.lo < l.hi)) fail("joint limits require lo < hi");
      links.push_back(l);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(e.what());
  }
  return KinematicChain(doc.value("name", std::string("chain")), std::move(links));
}

inline KinematicChain load_chain(const std::string& path, std::ostream* warn = &std::cerr) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open chain file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("chain file " + path + ": " + e.what());
  }
  return chain_from_json(doc, warn);
}

inline nlohmann::json chain_to_json(const KinematicChain& chain) {
  nlohmann::json links = nlohmann::json::array();
  for (const auto& l : chain.links()) {
    links.push_back({{"axis", {l.axis.x(), l.axis.y(), l.axis.z()}},
                     {"offset", {l.offset.x(), l.offset.y(), l.offset.z()}},
                     {"rot_offset", {l.rot_offset.w(), l.rot_offset.x(), l.rot_offset.y(), l.rot_offset.z()}},
                     {"limits", {l.lo, l.hi}}});
  }
  return {{"name", chain.name()}, {"links", links}};
}

/// Planar chain (all axes +z) with equal link lengths along +x.
inline KinematicChain planar_chain(int links, double length, double limit, std::string name = "planar") {
  std::vector<Link> ls(static_cast<std::size_t>(links));
  for (auto& l : ls) {
    l.offset = Eigen::Vector3d(length, 0, 0);
    l.lo = -limit;
    l.hi = limit;
  }
  return KinematicChain(std::move(name), std::move(ls));
}

// ------------------------------------------------------ forward kinematics

namespace detail {

template <typename T>
struct Quat {
  T w, x, y, z;
};

template <typename T>
Quat<T> qmul(const Quat<T>& a, const Quat<T>& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

template <typename T>
std::array<T, 3> qrotate(const Quat<T>& q, const std::array<T, 3>& v) {
  // v' = v + 2 w (u x v) + 2 u x (u x v)
  const std::array<T, 3> u{q.x, q.y, q.z};
  const std::array<T, 3> t{T{2} * (u[1] * v[2] - u[2] * v[1]), T{2} * (u[2] * v[0] - u[0] * v[2]),
                           T{2} * (u[0] * v[1] - u[1] * v[0])};
  return {v[0] + q.w * t[0] + (u[1] * t[2] - u[2] * t[1]), v[1] + q.w * t[1] + (u[2] * t[0] - u[0] * t[2]),
          v[2] + q.w * t[2] + (u[0] * t[1] - u[1] * t[0])};
}

/// Per-joint world quantities recorded during the forward sweep.
template <typename T>
struct JointFrame {
  std::array<T, 3> origin;  // joint position in world frame
  std::array<T, 3> axis;    // joint axis in world frame
};

template <typename T>
Pose<T> fk_sweep(const KinematicChain& chain, std::span<const T> q, std::vector<JointFrame<T>>* frames) {
  Quat<T> rot{T{1}, T{0}, T{0}, T{0}};
  std::array<T, 3> pos{T{0}, T{0}, T{0}};
  if (frames) frames->resize(static_cast<std::size_t>(chain.dof()));
  for (int i = 0; i < chain.dof(); ++i) {
    const auto& l = chain.link(i);
    const std::array<T, 3> a{static_cast<T>(l.axis.x()), static_cast<T>(l.axis.y()), static_cast<T>(l.axis.z())};
    if (frames) (*frames)[static_cast<std::size_t>(i)] = {pos, qrotate(rot, a)};
    const T half = q[static_cast<std::size_t>(i)] / T{2};
    const T s = std::sin(half);
    rot = qmul(rot, Quat<T>{std::cos(half), s * a[0], s * a[1], s * a[2]});
    const auto d = qrotate(rot, {static_cast<T>(l.offset.x()), static_cast<T>(l.offset.y()), static_cast<T>(l.offset.z())});
    for (int k = 0; k < 3; ++k) pos[static_cast<std::size_t>(k)] += d[static_cast<std::size_t>(k)];
    rot = qmul(rot, Quat<T>{static_cast<T>(l.rot_offset.w()), static_cast<T>(l.rot_offset.x()),
                            static_cast<T>(l.rot_offset.y()), static_cast<T>(l.rot_offset.z())});
  }
  // Renormalize to absorb rounding drift; the product of unit quaternions is
  // unit in exact arithmetic.
  const T n = std::sqrt(rot.w * rot.w + rot.x * rot.x + rot.y * rot.y + rot.z * rot.z);
  Pose<T> p;
  p.translation = pos;
  p.rotation = {rot.w / n, rot.x / n, rot.y / n, rot.z / n};
  return p;
}

inline void require_dof(const KinematicChain& chain, std::int64_t n) {
  if (n != chain.dof()) {
    throw ShapeError("joint count " + std::to_string(n) + " does not match chain dof " + std::to_string(chain.dof()));
  }
}

}  // namespace detail

template <typename T>
Pose<T> forward_kinematics(const KinematicChain& chain, std::span<const T> q) {
  detail::require_dof(chain, static_cast<std::int64_t>(q.size()));
  return detail::fk_sweep<T>(chain, q, nullptr);
}

inline PoseD forward_kinematics(const KinematicChain& chain, const JointVector& q) {
  return forward_kinematics<double>(chain, std::span<const double>(q));
}

/// Batched FK: joints [R, N] -> poses [R, 7].
template <typename T>
Tensor<T> forward_kinematics(const KinematicChain& chain, const Tensor<T>& joints) {
  if (joints.rank() != 2) throw ShapeError("batched FK expects [R, N] joints");
  detail::require_dof(chain, joints.dim(1));
  const std::int64_t rows = joints.dim(0), n = joints.dim(1);
  Tensor<T> out(nc::Shape{rows, kPoseWidth});
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto p = detail::fk_sweep<T>(chain, std::span<const T>(joints.ptr() + r * n, static_cast<std::size_t>(n)), nullptr);
    const auto row = p.row();
    std::copy(row.begin(), row.end(), out.ptr() + r * kPoseWidth);
  }
  return out;
}

/// Reverse-mode pullback of batched FK: cotangents [R, 7] -> joint gradients
/// [R, N].
///
/// For joint i with world axis w_i and origin o_i, the end-effector
/// translation p moves as w_i x (p - o_i) and the orientation quaternion Q as
/// 0.5 (0, w_i) * Q.
template <typename T>
Tensor<T> fk_pullback(const KinematicChain& chain, const Tensor<T>& joints, const Tensor<T>& cotangents) {
  if (joints.rank() != 2 || cotangents.rank() != 2) throw ShapeError("fk_pullback expects 2-D inputs");
  detail::require_dof(chain, joints.dim(1));
  if (cotangents.dim(0) != joints.dim(0) || cotangents.dim(1) != kPoseWidth) {
    throw ShapeError("fk_pullback cotangent shape mismatch");
  }
  const std::int64_t rows = joints.dim(0), n = joints.dim(1);
  Tensor<T> out(joints.shape(), T{0});
  std::vector<detail::JointFrame<T>> frames;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* c = cotangents.ptr() + r * kPoseWidth;
    bool zero = true;
    for (int k = 0; k < kPoseWidth; ++k) zero = zero && c[k] == T{0};
    if (zero) continue;
    // Unnormalized quaternion of the sweep; the final renormalization is a
    // no-op to first order for unit products, so the pullback treats it as
    // identity.
    const auto p = detail::fk_sweep<T>(chain, std::span<const T>(joints.ptr() + r * n, static_cast<std::size_t>(n)), &frames);
    const detail::Quat<T> qe{p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]};
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& f = frames[static_cast<std::size_t>(i)];
      const std::array<T, 3> d{p.translation[0] - f.origin[0], p.translation[1] - f.origin[1],
                               p.translation[2] - f.origin[2]};
      const auto& w = f.axis;
      const std::array<T, 3> dp{w[1] * d[2] - w[2] * d[1], w[2] * d[0] - w[0] * d[2], w[0] * d[1] - w[1] * d[0]};
      const auto dq = detail::qmul(detail::Quat<T>{T{0}, w[0] / T{2}, w[1] / T{2}, w[2] / T{2}}, qe);
      out[r * n + i] = c[0] * dp[0] + c[1] * dp[1] + c[2] * dp[2] + c[3] * dq.w + c[4] * dq.x + c[5] * dq.y +
                       c[6] * dq.z;
    }
  }
  return out;
}

/// Differentiable FK node: joints [R, N] -> poses [R, 7].
template <typename T>
nc::Var<T> fk_op(const KinematicChain& chain, nc::Var<T> joints) {
  Tensor<T> out = forward_kinematics<T>(chain, joints.value());
  const int ij = joints.id();
  return joints.graph().record(std::move(out), {ij}, [&chain, ij](nc::Graph<T>& g, const Tensor<T>& go) {
    const auto grad = fk_pullback<T>(chain, g.value(ij), go);
    auto& gr = g.grad(ij);
    for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += grad[i];
  }, "forward_kinematics");
}

// ------------------------------------------------------------ pose distance

inline constexpr double kDefaultRotWeight = 0.5;

/// ||t_a - t_b|| + w_rot (1 - |<q_a, q_b>|), on raw 7-vectors.
template <typename T>
T pose_distance_row(const T* a, const T* b, T w_rot) {
  T sq{0};
  for (int k = 0; k < 3; ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
  T dot{0};
  for (int k = 3; k < 7; ++k) dot += a[k] * b[k];
  return std::sqrt(sq) + w_rot * (T{1} - std::abs(dot));
}

/// Writes d/da and d/db of pose_distance_row scaled by `s` (accumulating).
/// Subgradient 0 is used at zero translation residual.
template <typename T>
void pose_distance_row_grad(const T* a, const T* b, T w_rot, T s, T* ga, T* gb) {
  T sq{0};
  for (int k = 0; k < 3; ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
  const T dist = std::sqrt(sq);
  if (dist > T{0}) {
    for (int k = 0; k < 3; ++k) {
      const T g = s * (a[k] - b[k]) / dist;
      if (ga) ga[k] += g;
      if (gb) gb[k] -= g;
    }
  }
  T dot{0};
  for (int k = 3; k < 7; ++k) dot += a[k] * b[k];
  const T sgn = dot > T{0} ? T{1} : (dot < T{0} ? T{-1} : T{0});
  for (int k = 3; k < 7; ++k) {
    if (ga) ga[k] -= s * w_rot * sgn * b[k];
    if (gb) gb[k] -= s * w_rot * sgn * a[k];
  }
}

/// Pose distance between normalized poses; throws on non-unit quaternions.
template <typename T>
T pose_distance(const Pose<T>& a, const Pose<T>& b, T w_rot = static_cast<T>(kDefaultRotWeight),
                T quat_tol = T{1e-6}) {
  if (!a.normalized(quat_tol) || !b.normalized(quat_tol)) {
    throw ArgumentError("pose_distance requires unit quaternions");
  }
  const auto ra = a.row();
  const auto rb = b.row();
  return pose_distance_row(ra.data(), rb.data(), w_rot);
}

/// Row-wise pose distance node: a, b [R, 7] -> [R].
template <typename T>
nc::Var<T> pose_distance_op(nc::Var<T> a, nc::Var<T> b, T w_rot) {
  const auto& av = a.value();
  const auto& bv = b.value();
  nc::require_same_shape(av.shape(), bv.shape(), "pose_distance");
  if (av.rank() != 2 || av.dim(1) != kPoseWidth) throw ShapeError("pose_distance expects [R, 7]");
  const std::int64_t rows = av.dim(0);
  Tensor<T> out(nc::Shape{rows});
  for (std::int64_t r = 0; r < rows; ++r) out[r] = pose_distance_row(av.ptr() + r * 7, bv.ptr() + r * 7, w_rot);
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, rows, w_rot](nc::Graph<T>& g, const Tensor<T>& go) {
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    T* ga = g.requires_grad(ia) ? g.grad(ia).ptr() : nullptr;
    T* gb = g.requires_grad(ib) ? g.grad(ib).ptr() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      pose_distance_row_grad(av.ptr() + r * 7, bv.ptr() + r * 7, w_rot, go[r], ga ? ga + r * 7 : nullptr,
                             gb ? gb + r * 7 : nullptr);
    }
  }, "pose_distance");
}

// ------------------------------------------------------------ quaternion util

template <typename T>
std::array<T, 4> quat_from_yaw(T yaw) {
  return {std::cos(yaw / T{2}), T{0}, T{0}, std::sin(yaw / T{2})};
}

/// Yaw of a quaternion (rotation about +z), ZYX convention.
template <typename T>
T yaw_of(const std::array<T, 4>& q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  return std::atan2(T{2} * (w * z + x * y), T{1} - T{2} * (y * y + z * z));
}

/// Quaternion (w, x, y, z) from ZYX Euler angles (yaw about z, then pitch
/// about y, then roll about x).
inline std::array<double, 4> quat_from_euler(double yaw, double pitch, double roll) {
  const double cy = std::cos(yaw / 2), sy = std::sin(yaw / 2);
  const double cp = std::cos(pitch / 2), sp = std::sin(pitch / 2);
  const double cr = std::cos(roll / 2), sr = std::sin(roll / 2);
  return {cr * cp * cy + sr * sp * sy, sr * cp * cy - cr * sp * sy, cr * sp * cy + sr * cp * sy,
          cr * cp * sy - sr * sp * cy};
}

/// ZYX Euler angles (yaw, pitch, roll) of a unit quaternion.
inline std::array<double, 3> euler_from_quat(const std::array<double, 4>& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double yaw = std::atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z));
  const double sp = std::clamp(2 * (w * y - z * x), -1.0, 1.0);
  const double pitch = std::asin(sp);
  const double roll = std::atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y));
  return {yaw, pitch, roll};
}

/// Spherical interpolation along the shorter arc.
inline std::array<double, 4> slerp(std::array<double, 4> a, std::array<double, 4> b, double t) {
  const Eigen::Quaterniond qa(a[0], a[1], a[2], a[3]);
  const Eigen::Quaterniond qb(b[0], b[1], b[2], b[3]);
  const Eigen::Quaterniond q = qa.slerp(t, qb);
  return {q.w(), q.x(), q.y(), q.z()};
}

/// Sign-canonical quaternion (w >= 0).
template <typename T>
void canonicalize_quat(T* q) {
  if (q[0] < T{0}) {
    for (int k = 0; k < 4; ++k) q[k] = -q[k];
  }
}

/// Rotation angle between two unit quaternions.
inline double rotation_angle(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double dot = 0;
  for (int k = 0; k < 4; ++k) dot += a[static_cast<std::size_t>(k)] * b[static_cast<std::size_t>(k)];
  return 2.0 * std::acos(std::clamp(std::abs(dot), 0.0, 1.0));
}

// -------------------------------------------------------------------- IK

enum class IKStatus { Success, Unreachable, LimitViolation, NoConvergence, InvalidQuaternion };

inline const char* to_string(IKStatus s) {
  switch (s) {
    case IKStatus::Success: return "Success";
    case IKStatus::Unreachable: return "Unreachable";
    case IKStatus::LimitViolation: return "LimitViolation";
    case IKStatus::NoConvergence: return "NoConvergence";
    case IKStatus::InvalidQuaternion: return "InvalidQuaternion";
  }
  return "?";
}

struct IKOptions {
  double tol = 1e-3;         // translation (m) and rotation angle (rad)
  int max_iters = 200;
  double damping = 0.05;     // DLS lambda
  double step_clamp = 0.2;   // rad per iteration, per joint
  double quat_tol = 1e-2;    // accepted | |q| - 1 | of the target rotation
};

struct IKOutcome {
  IKStatus status = IKStatus::NoConvergence;
  JointVector joints;
  double translation_error = 0.0;
  double rotation_error = 0.0;
  int iterations = 0;
  bool ok() const { return status == IKStatus::Success; }
};

/// Damped-least-squares IK on the 6-D pose error. Joint limits are enforced
/// by projection after every update.
inline IKOutcome ik_solve_dls(const KinematicChain& chain, const PoseD& target, const JointVector& init,
                              const IKOptions& opt = {}) {
  detail::require_dof(chain, static_cast<std::int64_t>(init.size()));
  IKOutcome res;
  res.joints = init;
  if (!(std::abs(target.quat_norm() - 1.0) <= opt.quat_tol)) {
    res.status = IKStatus::InvalidQuaternion;
    return res;
  }
  const PoseD goal = target.with_normalized_rotation();
  const Eigen::Vector3d goal_t(goal.translation[0], goal.translation[1], goal.translation[2]);
  if (goal_t.norm() > chain.reach() + opt.tol) {
    res.status = IKStatus::Unreachable;
    return res;
  }
  const Eigen::Quaterniond goal_q(goal.rotation[0], goal.rotation[1], goal.rotation[2], goal.rotation[3]);
  const int n = chain.dof();
  JointVector q = init;
  chain.clamp<double>(q);
  std::vector<detail::JointFrame<double>> frames;
  bool projected = false;
  for (int it = 0; it <= opt.max_iters; ++it) {
    const PoseD p = detail::fk_sweep<double>(chain, q, &frames);
    const Eigen::Vector3d pt(p.translation[0], p.translation[1], p.translation[2]);
    const Eigen::Quaterniond pq(p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]);
    Eigen::Quaterniond qerr = goal_q * pq.conjugate();
    if (qerr.w() < 0) qerr.coeffs() *= -1.0;
    const Eigen::AngleAxisd aa(qerr);
    Eigen::Matrix<double, 6, 1> err;
    err.head<3>() = goal_t - pt;
    err.tail<3>() = aa.angle() * aa.axis();
    res.translation_error = err.head<3>().norm();
    res.rotation_error = std::abs(aa.angle());
    res.iterations = it;
    if (res.translation_error <= opt.tol && res.rotation_error <= opt.tol) {
      res.joints = q;
      res.status = IKStatus::Success;
      return res;
    }
    if (it == opt.max_iters) break;
    Eigen::Matrix<double, 6, Eigen::Dynamic> jac(6, n);
    for (int i = 0; i < n; ++i) {
      const auto& f = frames[static_cast<std::size_t>(i)];
      const Eigen::Vector3d w(f.axis[0], f.axis[1], f.axis[2]);
      const Eigen::Vector3d o(f.origin[0], f.origin[1], f.origin[2]);
      jac.block<3, 1>(0, i) = w.cross(pt - o);
      jac.block<3, 1>(3, i) = w;
    }
    const Eigen::Matrix<double, 6, 6> jjt =
        jac * jac.transpose() + opt.damping * opt.damping * Eigen::Matrix<double, 6, 6>::Identity();
    Eigen::VectorXd dq = jac.transpose() * jjt.ldlt().solve(err);
    const double mx = dq.cwiseAbs().maxCoeff();
    if (mx > opt.step_clamp) dq *= opt.step_clamp / mx;
    projected = false;
    for (int i = 0; i < n; ++i) {
      double v = q[static_cast<std::size_t>(i)] + dq[i];
      const double c = std::clamp(v, chain.link(i).lo, chain.link(i).hi);
      projected = projected || c != v;
      q[static_cast<std::size_t>(i)] = c;
    }
  }
  res.joints = q;
  res.status = projected ? IKStatus::LimitViolation : IKStatus::NoConvergence;
  return res;
}

}  // namespace hdp::kin
