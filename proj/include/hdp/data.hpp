#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/error.hpp"
#include "hdp/kinematics.hpp"
#include "hdp/numcore/tensor.hpp"

namespace hdp::data {

using nc::Shape;
using TensorD = nc::Tensor<double>;

inline constexpr int kTrajectoryLength = 64;
inline constexpr double kDefaultVelocityEps = 1e-3;

/// One expert demonstration. `joints` [T, N], `poses` [T, 7] (FK of joints),
/// `state` [T, S], `points` [M, 3] from the first frame.
struct Demonstration {
  int task_id = 0;
  std::string text;
  TensorD joints;
  TensorD poses;
  std::vector<int> gripper;
  TensorD points{Shape{0, 3}};
  TensorD state;

  std::int64_t length() const { return joints.dim(0); }
  int dof() const { return static_cast<int>(joints.dim(1)); }
};

/// Low-dimensional robot state: joints followed by the end-effector pose row.
inline std::vector<double> robot_state(std::span<const double> joints, std::span<const double> pose) {
  std::vector<double> s(joints.begin(), joints.end());
  s.insert(s.end(), pose.begin(), pose.end());
  return s;
}

/// FK poses for every row, quaternions sign-canonicalized to w >= 0.
inline TensorD canonical_poses(const kin::KinematicChain& chain, const TensorD& joints) {
  TensorD poses = kin::forward_kinematics<double>(chain, joints);
  for (std::int64_t r = 0; r < poses.dim(0); ++r) kin::canonicalize_quat(poses.ptr() + r * 7 + 3);
  return poses;
}

/// Builds a demonstration from a joint path, filling poses and state from FK.
inline Demonstration make_demo(const kin::KinematicChain& chain, TensorD joints, std::vector<int> gripper,
                               TensorD points, int task_id, std::string text) {
  Demonstration d;
  d.task_id = task_id;
  d.text = std::move(text);
  d.joints = std::move(joints);
  d.gripper = std::move(gripper);
  d.points = std::move(points);
  d.poses = canonical_poses(chain, d.joints);
  const std::int64_t len = d.joints.dim(0), n = d.joints.dim(1);
  d.state = TensorD(Shape{len, n + 7});
  for (std::int64_t t = 0; t < len; ++t) {
    auto s = robot_state({d.joints.ptr() + t * n, static_cast<std::size_t>(n)}, {d.poses.ptr() + t * 7, 7});
    std::copy(s.begin(), s.end(), d.state.ptr() + t * (n + 7));
  }
  if (static_cast<std::int64_t>(d.gripper.size()) != len) throw ShapeError("gripper length differs from joints");
  return d;
}

// ----------------------------------------------------------------- keyframes

/// Frames where every joint moves less than eps_v and the gripper is unchanged.
/// Runs of consecutive qualifying frames collapse to their last index; the
/// final frame is always included.
inline std::vector<std::int64_t> discover_keyframes(const Demonstration& demo, double eps_v = kDefaultVelocityEps) {
  const std::int64_t len = demo.length(), n = demo.joints.dim(1);
  std::vector<std::int64_t> keys;
  auto still = [&](std::int64_t t) {
    if (demo.gripper[static_cast<std::size_t>(t)] != demo.gripper[static_cast<std::size_t>(t - 1)]) return false;
    for (std::int64_t j = 0; j < n; ++j) {
      if (std::abs(demo.joints[t * n + j] - demo.joints[(t - 1) * n + j]) >= eps_v) return false;
    }
    return true;
  };
  for (std::int64_t t = 1; t < len; ++t) {
    if (still(t) && (t + 1 >= len || !still(t + 1))) keys.push_back(t);
  }
  if (len >= 2 && (keys.empty() || keys.back() != len - 1)) keys.push_back(len - 1);
  return keys;
}

// ---------------------------------------------------------------- resampling

/// Piecewise-linear resampling of [L, C] rows to `target_len` rows at
/// index-uniform parameters. Endpoint rows are copied exactly. When
/// `quat_offset` >= 0, channels [quat_offset, quat_offset + 4) are treated as a
/// quaternion: sign-aligned before interpolation and renormalized after.
inline TensorD resample_trajectory(const TensorD& traj, std::int64_t target_len = kTrajectoryLength,
                                   int quat_offset = -1) {
  if (traj.rank() != 2 || traj.dim(0) < 2) throw ArgumentError("resample_trajectory needs at least two rows");
  if (target_len < 2) throw ArgumentError("resample target length must be at least 2");
  const std::int64_t len = traj.dim(0), ch = traj.dim(1);
  TensorD src = traj;
  if (quat_offset >= 0) {
    for (std::int64_t r = 1; r < len; ++r) {
      double dot = 0;
      for (int k = 0; k < 4; ++k) dot += src[(r - 1) * ch + quat_offset + k] * src[r * ch + quat_offset + k];
      if (dot < 0) {
        for (int k = 0; k < 4; ++k) src[r * ch + quat_offset + k] = -src[r * ch + quat_offset + k];
      }
    }
  }
  TensorD out(Shape{target_len, ch});
  for (std::int64_t i = 0; i < target_len; ++i) {
    if (i == 0 || i == target_len - 1) {
      const std::int64_t r = i == 0 ? 0 : len - 1;
      std::copy(traj.ptr() + r * ch, traj.ptr() + (r + 1) * ch, out.ptr() + i * ch);
      continue;
    }
    const double u = static_cast<double>(i) * static_cast<double>(len - 1) / static_cast<double>(target_len - 1);
    const auto lo = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(u)), len - 2);
    const double f = u - static_cast<double>(lo);
    if (f == 0.0) {
      std::copy(src.ptr() + lo * ch, src.ptr() + (lo + 1) * ch, out.ptr() + i * ch);
      continue;
    }
    for (std::int64_t c = 0; c < ch; ++c) {
      out[i * ch + c] = (1.0 - f) * src[lo * ch + c] + f * src[(lo + 1) * ch + c];
    }
    if (quat_offset >= 0) {
      double nrm = 0;
      for (int k = 0; k < 4; ++k) nrm += out[i * ch + quat_offset + k] * out[i * ch + quat_offset + k];
      nrm = std::sqrt(nrm);
      for (int k = 0; k < 4; ++k) out[i * ch + quat_offset + k] /= nrm;
    }
  }
  return out;
}

// --------------------------------------------------------------------- rank

/// Endpoint distance over polyline length of the translation channels; 1.0
/// for a path shorter than 1e-9. Ratios within 1e-12 of one (collinear paths
/// up to rounding) are reported as exactly 1.
inline double compute_rank(const TensorD& poses) {
  if (poses.rank() != 2 || poses.dim(0) < 2) throw ArgumentError("compute_rank needs at least two rows");
  const std::int64_t len = poses.dim(0), ch = poses.dim(1);
  auto dist = [&](std::int64_t a, std::int64_t b) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += (poses[a * ch + k] - poses[b * ch + k]) * (poses[a * ch + k] - poses[b * ch + k]);
    return std::sqrt(s);
  };
  double travel = 0;
  for (std::int64_t r = 1; r < len; ++r) travel += dist(r - 1, r);
  if (travel < 1e-9) return 1.0;
  const double r = dist(0, len - 1) / travel;
  return r > 1.0 - 1e-12 ? 1.0 : r;
}

// ---------------------------------------------------------- sub-trajectories

/// A fixed-length training segment with its conditioning.
struct SubTrajectory {
  TensorD joints;  // [64, N]
  TensorD poses;   // [64, 7]
  std::array<double, 7> start_pose{};
  std::array<double, 7> goal_pose{};
  std::vector<double> start_joints;
  std::vector<double> state;  // robot state at the segment start
  double gripper = 0.0;       // gripper state at the segment start
  int goal_gripper = 0;
  double rank = 1.0;
  int task_id = 0;
  std::int64_t demo_index = -1;
  std::int64_t begin = 0;
  std::int64_t end = 0;
};

/// Source frame range [begin, end] of a segment within a demonstration,
/// `keyframe` being the keyframe that ends it.
struct Segment {
  std::int64_t demo_index = 0;
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t keyframe = 0;
};

inline TensorD slice_rows(const TensorD& t, std::int64_t begin, std::int64_t end) {
  const std::int64_t ch = t.dim(1);
  TensorD out(Shape{end - begin + 1, ch});
  std::copy(t.ptr() + begin * ch, t.ptr() + (end + 1) * ch, out.ptr());
  return out;
}

/// Resamples frames [begin, end] of `demo` and relabels the goal with the
/// pose at `end` and the gripper action at `keyframe`.
inline SubTrajectory make_subtrajectory(const Demonstration& demo, std::int64_t begin, std::int64_t end,
                                        std::int64_t keyframe, std::int64_t demo_index = -1) {
  if (begin < 0 || end >= demo.length() || end - begin + 1 < 2) throw ArgumentError("segment needs two frames");
  const std::int64_t n = demo.joints.dim(1);
  SubTrajectory s;
  s.joints = resample_trajectory(slice_rows(demo.joints, begin, end));
  const TensorD raw_poses = slice_rows(demo.poses, begin, end);
  s.poses = resample_trajectory(raw_poses, kTrajectoryLength, 3);
  std::copy(demo.poses.ptr() + begin * 7, demo.poses.ptr() + begin * 7 + 7, s.start_pose.begin());
  std::copy(demo.poses.ptr() + end * 7, demo.poses.ptr() + end * 7 + 7, s.goal_pose.begin());
  s.start_joints.assign(demo.joints.ptr() + begin * n, demo.joints.ptr() + (begin + 1) * n);
  const std::int64_t sd = demo.state.dim(1);
  s.state.assign(demo.state.ptr() + begin * sd, demo.state.ptr() + (begin + 1) * sd);
  s.gripper = demo.gripper[static_cast<std::size_t>(begin)];
  s.goal_gripper = demo.gripper[static_cast<std::size_t>(keyframe)];
  s.rank = compute_rank(raw_poses);
  s.task_id = demo.task_id;
  s.demo_index = demo_index;
  s.begin = begin;
  s.end = end;
  return s;
}

/// Segments between consecutive keyframes, the first starting at frame 0.
inline std::vector<Segment> segment_demo(const Demonstration& demo, const std::vector<std::int64_t>& keyframes,
                                         std::int64_t demo_index = 0, std::ostream* warn = &std::cerr) {
  std::vector<Segment> out;
  std::int64_t prev = 0;
  for (auto k : keyframes) {
    if (k < 0 || k >= demo.length()) throw ArgumentError("keyframe index out of range");
    if (k - prev + 1 < 2) {
      if (warn) *warn << "warning: skipping degenerate segment [" << prev << ", " << k << "]\n";
    } else {
      out.push_back({demo_index, prev, k, k});
    }
    prev = k;
  }
  return out;
}

inline std::vector<SubTrajectory> chunk_and_relabel(const Demonstration& demo,
                                                    const std::vector<std::int64_t>& keyframes,
                                                    std::int64_t demo_index = -1, std::ostream* warn = &std::cerr) {
  std::vector<SubTrajectory> subs;
  for (const auto& seg : segment_demo(demo, keyframes, demo_index, warn)) {
    subs.push_back(make_subtrajectory(demo, seg.begin, seg.end, seg.keyframe, demo_index));
  }
  return subs;
}

inline constexpr int kMaxEndpointShift = 5;

/// Endpoint shifts for augmentation; either may be zero.
struct EndpointShift {
  int start = 0;
  int end = 0;
};

inline EndpointShift draw_endpoint_shift(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, kMaxEndpointShift);
  const int a = d(rng);
  return {a, d(rng)};
}

/// Shrinks the larger shift until at least half of the segment (and two
/// frames) remain.
inline EndpointShift clamp_shift(EndpointShift k, std::int64_t frames) {
  const std::int64_t keep = std::max<std::int64_t>(2, (frames + 1) / 2);
  while (frames - k.start - k.end < keep && (k.start > 0 || k.end > 0)) {
    if (k.start >= k.end) --k.start; else --k.end;
  }
  return k;
}

/// Sub-trajectory over [begin + k0, end - k1] with conditioning recomputed
/// from the shifted frames. The goal gripper action stays that of the segment
/// keyframe.
inline SubTrajectory augment_endpoints(const Demonstration& demo, const Segment& seg, EndpointShift k) {
  k = clamp_shift(k, seg.end - seg.begin + 1);
  return make_subtrajectory(demo, seg.begin + k.start, seg.end - k.end, seg.keyframe, seg.demo_index);
}

inline SubTrajectory augment_endpoints(const Demonstration& demo, const Segment& seg, std::mt19937_64& rng) {
  return augment_endpoints(demo, seg, draw_endpoint_shift(rng));
}

// ------------------------------------------------------------- dataset file

inline nlohmann::json demo_to_json(const Demonstration& d) {
  auto rows = [](const TensorD& t) {
    nlohmann::json a = nlohmann::json::array();
    const std::int64_t ch = t.rank() == 2 ? t.dim(1) : 0;
    for (std::int64_t r = 0; r < (t.rank() == 2 ? t.dim(0) : 0); ++r) {
      a.push_back(std::vector<double>(t.ptr() + r * ch, t.ptr() + (r + 1) * ch));
    }
    return a;
  };
  return {{"task_id", d.task_id}, {"text", d.text}, {"joints", rows(d.joints)},
          {"gripper", d.gripper}, {"points", rows(d.points)}, {"state", rows(d.state)}};
}

inline TensorD rows_from_json(const nlohmann::json& a, std::int64_t width, const char* what) {
  if (!a.is_array()) throw FormatError(std::string(what) + " must be an array of rows");
  const auto rows = static_cast<std::int64_t>(a.size());
  if (rows == 0) return TensorD(Shape{0, std::max<std::int64_t>(width, 0)});
  if (width < 0) width = static_cast<std::int64_t>(a[0].size());
  TensorD t(Shape{rows, width});
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto row = a[static_cast<std::size_t>(r)].get<std::vector<double>>();
    if (static_cast<std::int64_t>(row.size()) != width) throw FormatError(std::string(what) + " rows differ in width");
    std::copy(row.begin(), row.end(), t.ptr() + r * width);
  }
  return t;
}

/// Parses one demonstration line. Poses are recomputed from joints by FK.
inline Demonstration demo_from_json(const nlohmann::json& j, const kin::KinematicChain& chain) {
  try {
    for (const auto& [key, _] : j.items()) {
      if (key != "task_id" && key != "text" && key != "joints" && key != "gripper" && key != "points" &&
          key != "state") {
        throw FormatError("unknown demo field '" + key + "'");
      }
    }
    TensorD joints = rows_from_json(j.at("joints"), chain.dof(), "joints");
    if (joints.dim(0) < 2) throw FormatError("demo needs at least two frames");
    auto gripper = j.at("gripper").get<std::vector<int>>();
    if (static_cast<std::int64_t>(gripper.size()) != joints.dim(0)) throw FormatError("gripper length mismatch");
    TensorD points = rows_from_json(j.value("points", nlohmann::json::array()), 3, "points");
    Demonstration d = make_demo(chain, std::move(joints), std::move(gripper), std::move(points),
                                j.value("task_id", 0), j.value("text", std::string()));
    if (j.contains("state")) {
      TensorD state = rows_from_json(j["state"], -1, "state");
      if (state.dim(0) != d.length()) throw FormatError("state length mismatch");
      d.state = std::move(state);
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("demo record: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("demo record: ") + e.what());
  }
}

inline void save_demos(const std::string& path, const std::vector<Demonstration>& demos) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  for (const auto& d : demos) f << demo_to_json(d).dump() << '\n';
  if (!f) throw FormatError("write failed for " + path);
}

inline std::vector<Demonstration> load_demos(const std::string& path, const kin::KinematicChain& chain) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open dataset " + path);
  std::vector<Demonstration> demos;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      demos.push_back(demo_from_json(nlohmann::json::parse(line), chain));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return demos;
}

/// Every keyframe segment of every demo.
inline std::vector<Segment> build_segments(const std::vector<Demonstration>& demos, double eps_v = kDefaultVelocityEps,
                                           std::ostream* warn = &std::cerr) {
  std::vector<Segment> all;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    auto segs = segment_demo(demos[i], discover_keyframes(demos[i], eps_v), static_cast<std::int64_t>(i), warn);
    all.insert(all.end(), segs.begin(), segs.end());
  }
  return all;
}

}  // namespace hdp::data
