#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/data.hpp"
#include "hdp/error.hpp"
#include "hdp/kinematics.hpp"
#include "hdp/numcore.hpp"

namespace hdp::nbp {

using nc::Shape;
using nc::Var;
using TensorD = nc::Tensor<double>;
using TensorF = nc::Tensor<float>;
using Pose7 = std::array<double, 7>;

// --------------------------------------------------------------------- grid

struct GridConfig {
  std::array<int, 3> res{24, 24, 24};
  std::array<double, 3> lo{0.0, 0.0, 0.0};
  std::array<double, 3> hi{1.0, 1.0, 1.0};
  int rot_bins = 36;
  bool snap_plane = false;  // reconstruct with z = plane_z and zero pitch/roll
  double plane_z = 0.0;

  std::int64_t cells() const { return static_cast<std::int64_t>(res[0]) * res[1] * res[2]; }
  double width(int axis) const { return (hi[static_cast<std::size_t>(axis)] - lo[static_cast<std::size_t>(axis)]) / res[static_cast<std::size_t>(axis)]; }
  double boundary(int axis, int k) const {
    const auto a = static_cast<std::size_t>(axis);
    return lo[a] + (hi[a] - lo[a]) * k / res[a];
  }
  double center(int axis, int k) const { return 0.5 * (boundary(axis, k) + boundary(axis, k + 1)); }
  double bin_width() const { return 2.0 * std::numbers::pi / rot_bins; }
  double bin_center(int b) const { return -std::numbers::pi + bin_width() * (b + 0.5); }
  std::int64_t flat(int i, int j, int k) const { return (static_cast<std::int64_t>(i) * res[1] + j) * res[2] + k; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (res[static_cast<std::size_t>(a)] < 2) throw ArgumentError("grid resolution must be at least 2 per axis");
      if (!(hi[static_cast<std::size_t>(a)] > lo[static_cast<std::size_t>(a)])) throw ArgumentError("grid bounds degenerate");
    }
    if (rot_bins < 2) throw ArgumentError("need at least two rotation bins");
  }

  /// Cell index along one axis, -1 outside [lo, hi]. A point on a shared
  /// face goes to the lower-index cell.
  int cell(int axis, double v) const {
    const auto a = static_cast<std::size_t>(axis);
    if (!(v >= lo[a] && v <= hi[a])) return -1;
    int k = std::clamp(static_cast<int>(std::floor((v - lo[a]) / (hi[a] - lo[a]) * res[a])), 0, res[a] - 1);
    while (k > 0 && v <= boundary(axis, k)) --k;
    while (k < res[a] - 1 && v > boundary(axis, k + 1)) ++k;
    return k;
  }

  /// Rotation bin of an angle in [-pi, pi]; same face rule as cells.
  int bin(double angle) const {
    const double u = (angle + std::numbers::pi) / bin_width();
    int b = std::clamp(static_cast<int>(std::ceil(u)) - 1, 0, rot_bins - 1);
    return b;
  }
};

inline nlohmann::json to_json(const GridConfig& g) {
  return {{"res", g.res}, {"lo", g.lo}, {"hi", g.hi}, {"rot_bins", g.rot_bins}, {"snap_plane", g.snap_plane},
          {"plane_z", g.plane_z}};
}

inline GridConfig grid_from_json(const nlohmann::json& j, GridConfig g = {}) {
  g.res = j.value("res", g.res);
  g.lo = j.value("lo", g.lo);
  g.hi = j.value("hi", g.hi);
  g.rot_bins = j.value("rot_bins", g.rot_bins);
  g.snap_plane = j.value("snap_plane", g.snap_plane);
  g.plane_z = j.value("plane_z", g.plane_z);
  g.validate();
  return g;
}

struct VoxelGrid {
  GridConfig config;
  std::vector<float> occupancy;  // flat (i, j, k), k fastest
  int dropped = 0;               // points outside the bounds

  float at(int i, int j, int k) const { return occupancy[static_cast<std::size_t>(config.flat(i, j, k))]; }
};

inline VoxelGrid voxelize(const TensorD& points, const GridConfig& g) {
  g.validate();
  if (points.rank() != 2 || points.dim(1) != 3) throw ShapeError("voxelize expects [M, 3] points");
  VoxelGrid v{g, std::vector<float>(static_cast<std::size_t>(g.cells()), 0.0f), 0};
  for (std::int64_t m = 0; m < points.dim(0); ++m) {
    const int i = g.cell(0, points[m * 3]), j = g.cell(1, points[m * 3 + 1]), k = g.cell(2, points[m * 3 + 2]);
    if (i < 0 || j < 0 || k < 0) {
      ++v.dropped;
      continue;
    }
    v.occupancy[static_cast<std::size_t>(g.flat(i, j, k))] = 1.0f;
  }
  return v;
}

// ------------------------------------------------------------------ actions

struct HighLevelAction {
  std::array<int, 3> trans{};  // voxel (x, y, z)
  std::array<int, 3> rot{};    // bins (yaw, pitch, roll)
  int grip = 0;
  bool operator==(const HighLevelAction&) const = default;
};

/// Expert pose and gripper state as discrete targets. Throws when the pose
/// lies outside the workspace.
inline HighLevelAction discretize(const Pose7& pose, int grip, const GridConfig& g) {
  HighLevelAction a;
  for (int ax = 0; ax < 3; ++ax) {
    a.trans[static_cast<std::size_t>(ax)] = g.cell(ax, pose[static_cast<std::size_t>(ax)]);
    if (a.trans[static_cast<std::size_t>(ax)] < 0) throw ArgumentError("expert pose outside the voxel workspace");
  }
  const auto e = kin::euler_from_quat({pose[3], pose[4], pose[5], pose[6]});
  for (int ax = 0; ax < 3; ++ax) a.rot[static_cast<std::size_t>(ax)] = g.bin(e[static_cast<std::size_t>(ax)]);
  if (grip != 0 && grip != 1) throw ArgumentError("gripper action must be 0 or 1");
  a.grip = grip;
  return a;
}

/// Continuous pose at the cell center and bin-center Euler angles.
inline Pose7 reconstruct(const HighLevelAction& a, const GridConfig& g) {
  for (int ax = 0; ax < 3; ++ax) {
    const int v = a.trans[static_cast<std::size_t>(ax)], r = a.rot[static_cast<std::size_t>(ax)];
    if (v < 0 || v >= g.res[static_cast<std::size_t>(ax)] || r < 0 || r >= g.rot_bins) {
      throw ArgumentError("high-level action index out of range");
    }
  }
  const double yaw = g.bin_center(a.rot[0]);
  const double pitch = g.snap_plane ? 0.0 : g.bin_center(a.rot[1]);
  const double roll = g.snap_plane ? 0.0 : g.bin_center(a.rot[2]);
  auto q = kin::quat_from_euler(yaw, pitch, roll);
  kin::canonicalize_quat(q.data());
  return {g.center(0, a.trans[0]), g.center(1, a.trans[1]), g.snap_plane ? g.plane_z : g.center(2, a.trans[2]),
          q[0], q[1], q[2], q[3]};
}

// -------------------------------------------------------------------- model

struct NBPConfig {
  GridConfig grid;
  int hidden = 512;
  int token_dim = 16;
  int tokens = 2;
  bool use_token = true;
  int max_ordinal = 4;  // sub-goal index one-hot width

  int proprio_dim() const { return 1 + max_ordinal; }
  std::int64_t input_dim() const { return grid.cells() + token_dim + proprio_dim(); }
  void validate() const {
    grid.validate();
    if (hidden < 1 || token_dim < 1 || tokens < 1 || max_ordinal < 1) throw ArgumentError("invalid nbp network sizes");
  }
};

inline nlohmann::json to_json(const NBPConfig& c) {
  return {{"grid", to_json(c.grid)}, {"hidden", c.hidden},   {"token_dim", c.token_dim},
          {"tokens", c.tokens},      {"use_token", c.use_token}, {"max_ordinal", c.max_ordinal}};
}

inline NBPConfig nbp_config_from_json(const nlohmann::json& j, NBPConfig c = {}) {
  if (j.contains("grid")) c.grid = grid_from_json(j["grid"], c.grid);
  c.hidden = j.value("hidden", c.hidden);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.tokens = j.value("tokens", c.tokens);
  c.use_token = j.value("use_token", c.use_token);
  c.max_ordinal = j.value("max_ordinal", c.max_ordinal);
  c.validate();
  return c;
}

/// Observation as seen by the high-level agent.
struct Observation {
  std::vector<float> occupancy;  // voxelized scene
  int token = 0;
  int gripper = 0;
  int ordinal = 0;
};

inline Observation observe(const TensorD& points, int token, int gripper, int ordinal, const GridConfig& g) {
  return {voxelize(points, g).occupancy, token, gripper, ordinal};
}

template <typename T>
struct Logits {
  Var<T> trans;  // [B, cells]
  Var<T> rot;    // [B, 3 * bins], yaw | pitch | roll
  Var<T> grip;   // [B, 2]
};

/// Flattened voxels, token embedding and proprioception through a two-layer
/// GELU MLP into the three discrete heads.
class NBPModel {
 public:
  NBPModel() = default;
  NBPModel(NBPConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::int64_t in = cfg_.input_dim(), h = cfg_.hidden;
    params_.add_uniform("token.emb", Shape{cfg_.tokens, cfg_.token_dim}, 1, rng);
    params_.add_uniform("enc0.w", Shape{h, in}, in, rng);
    params_.add_uniform("enc0.b", Shape{h}, in, rng);
    params_.add_uniform("enc1.w", Shape{h, h}, h, rng);
    params_.add_uniform("enc1.b", Shape{h}, h, rng);
    params_.add_uniform("trans.w", Shape{cfg_.grid.cells(), h}, h, rng);
    params_.add_uniform("trans.b", Shape{cfg_.grid.cells()}, h, rng);
    params_.add_uniform("rot.w", Shape{3 * cfg_.grid.rot_bins, h}, h, rng);
    params_.add_uniform("rot.b", Shape{3 * cfg_.grid.rot_bins}, h, rng);
    params_.add_uniform("grip.w", Shape{2, h}, h, rng);
    params_.add_uniform("grip.b", Shape{2}, h, rng);
  }

  const NBPConfig& config() const { return cfg_; }
  nc::ParamStore<float>& params() { return params_; }
  const nc::ParamStore<float>& params() const { return params_; }

  Logits<float> forward(nc::Graph<float>& g, const nc::BoundParams<float>& p,
                        const std::vector<const Observation*>& obs) const {
    const auto b = static_cast<std::int64_t>(obs.size());
    const std::int64_t cells = cfg_.grid.cells();
    TensorF vox(Shape{b, cells}), prop(Shape{b, cfg_.proprio_dim()});
    std::vector<std::int64_t> tok(static_cast<std::size_t>(b));
    for (std::int64_t r = 0; r < b; ++r) {
      const auto& o = *obs[static_cast<std::size_t>(r)];
      if (static_cast<std::int64_t>(o.occupancy.size()) != cells) throw ShapeError("observation grid size mismatch");
      if (o.token < 0 || o.token >= cfg_.tokens) throw ArgumentError("task token out of range");
      std::copy(o.occupancy.begin(), o.occupancy.end(), vox.ptr() + r * cells);
      prop[r * cfg_.proprio_dim()] = static_cast<float>(o.gripper);
      prop[r * cfg_.proprio_dim() + 1 + std::clamp(o.ordinal, 0, cfg_.max_ordinal - 1)] = 1.0f;
      tok[static_cast<std::size_t>(r)] = o.token;
    }
    Var<float> emb = cfg_.use_token ? nc::gather_rows(p[idx("token.emb")], tok)
                                    : g.constant(TensorF(Shape{b, cfg_.token_dim}));
    Var<float> x = nc::concat<float>({g.constant(std::move(vox)), emb, g.constant(std::move(prop))}, 1);
    x = nc::gelu(nc::linear(x, p[idx("enc0.w")], p[idx("enc0.b")]));
    x = nc::gelu(nc::linear(x, p[idx("enc1.w")], p[idx("enc1.b")]));
    return {nc::linear(x, p[idx("trans.w")], p[idx("trans.b")]), nc::linear(x, p[idx("rot.w")], p[idx("rot.b")]),
            nc::linear(x, p[idx("grip.w")], p[idx("grip.b")])};
  }

 private:
  std::size_t idx(const char* name) const { return params_.index_of(name); }
  NBPConfig cfg_;
  nc::ParamStore<float> params_;
};

/// Sum of the three heads' cross-entropies (the rotation head counts once
/// per Euler axis), averaged over the batch.
inline Var<float> nbp_loss(const NBPModel& m, const Logits<float>& l, const std::vector<HighLevelAction>& targets) {
  const auto& g = m.config().grid;
  const auto b = static_cast<std::int64_t>(targets.size());
  std::vector<std::int64_t> tt, rt, gt;
  for (const auto& a : targets) {
    tt.push_back(g.flat(a.trans[0], a.trans[1], a.trans[2]));
    for (int ax = 0; ax < 3; ++ax) rt.push_back(a.rot[static_cast<std::size_t>(ax)]);
    gt.push_back(a.grip);
  }
  const auto rot_rows = nc::reshape(l.rot, Shape{b * 3, g.rot_bins});
  return nc::add(nc::add(nc::softmax_cross_entropy(l.trans, tt), nc::scale(nc::softmax_cross_entropy(rot_rows, rt), 3.0f)),
                 nc::softmax_cross_entropy(l.grip, gt));
}

// ----------------------------------------------------------------- training

struct Sample {
  TensorD points{Shape{0, 3}};
  int token = 0;
  int gripper = 0;
  int ordinal = 0;
  HighLevelAction action;
};

/// One sample per keyframe: first-frame points, gripper state entering the
/// segment, and the discretized keyframe pose and gripper action.
inline std::vector<Sample> keyframe_samples(const data::Demonstration& d, int token, const GridConfig& g,
                                            double eps_v = data::kDefaultVelocityEps) {
  std::vector<Sample> out;
  int grip = d.gripper.empty() ? 0 : d.gripper.front();
  const auto keys = data::discover_keyframes(d, eps_v);
  for (std::size_t k = 0; k < keys.size(); ++k) {
    Pose7 p;
    std::copy(d.poses.ptr() + keys[k] * 7, d.poses.ptr() + keys[k] * 7 + 7, p.begin());
    const int ga = d.gripper[static_cast<std::size_t>(keys[k])];
    out.push_back({d.points, token, grip, static_cast<int>(k), discretize(p, ga, g)});
    grip = ga;
  }
  return out;
}

struct TrainConfig {
  int steps = 1000;
  int batch = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  int max_jitter = 2;  // cells; capped at a quarter of each axis' resolution
  std::uint64_t seed = 0;
  int log_every = 0;
};

/// Per-axis jitter bound.
inline std::array<int, 3> jitter_bounds(const GridConfig& g, int max_jitter) {
  std::array<int, 3> b{};
  for (int a = 0; a < 3; ++a) b[static_cast<std::size_t>(a)] = std::min(max_jitter, g.res[static_cast<std::size_t>(a)] / 4);
  return b;
}

/// Shifts the scene occupancy and the expert voxel by the same offset; an
/// offset pushing the expert voxel off the grid is replaced by zero.
inline std::pair<Observation, HighLevelAction> jitter(const Observation& o, const HighLevelAction& a,
                                                      const GridConfig& g, std::array<int, 3> off) {
  for (int ax = 0; ax < 3; ++ax) {
    const int v = a.trans[static_cast<std::size_t>(ax)] + off[static_cast<std::size_t>(ax)];
    if (v < 0 || v >= g.res[static_cast<std::size_t>(ax)]) off = {0, 0, 0};
  }
  if (off == std::array<int, 3>{0, 0, 0}) return {o, a};
  Observation s = o;
  std::fill(s.occupancy.begin(), s.occupancy.end(), 0.0f);
  for (int i = 0; i < g.res[0]; ++i) {
    for (int j = 0; j < g.res[1]; ++j) {
      for (int k = 0; k < g.res[2]; ++k) {
        const float v = o.occupancy[static_cast<std::size_t>(g.flat(i, j, k))];
        if (v == 0.0f) continue;
        const int ii = i + off[0], jj = j + off[1], kk = k + off[2];
        if (ii < 0 || jj < 0 || kk < 0 || ii >= g.res[0] || jj >= g.res[1] || kk >= g.res[2]) continue;
        s.occupancy[static_cast<std::size_t>(g.flat(ii, jj, kk))] = v;
      }
    }
  }
  HighLevelAction b = a;
  for (int ax = 0; ax < 3; ++ax) b.trans[static_cast<std::size_t>(ax)] += off[static_cast<std::size_t>(ax)];
  return {std::move(s), b};
}

inline std::vector<double> train_nbp(NBPModel& m, const std::vector<Sample>& samples, const TrainConfig& tc,
                                     std::ostream* log = nullptr) {
  if (samples.empty()) throw ArgumentError("train_nbp needs samples");
  if (tc.steps < 0 || tc.batch < 1) throw ArgumentError("invalid training configuration");
  const auto& g = m.config().grid;
  std::vector<Observation> obs;
  for (const auto& s : samples) {
    for (int ax = 0; ax < 3; ++ax) {
      const int v = s.action.trans[static_cast<std::size_t>(ax)], r = s.action.rot[static_cast<std::size_t>(ax)];
      if (v < 0 || v >= g.res[static_cast<std::size_t>(ax)] || r < 0 || r >= g.rot_bins) {
        throw ArgumentError("expert action index out of bounds");
      }
    }
    obs.push_back(observe(s.points, s.token, s.gripper, s.ordinal, g));
  }
  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  const auto jb = jitter_bounds(g, tc.max_jitter);
  const nc::AdamWConfig opt{.lr = tc.lr, .weight_decay = tc.weight_decay};
  auto st = nc::OptState<float>::for_params(m.params(), opt);
  std::vector<double> history;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<Observation> bo;
    std::vector<HighLevelAction> ba;
    for (int i = 0; i < tc.batch; ++i) {
      const std::size_t s = pick(rng);
      std::array<int, 3> off{};
      for (int ax = 0; ax < 3; ++ax) {
        const int r = jb[static_cast<std::size_t>(ax)];
        off[static_cast<std::size_t>(ax)] = std::uniform_int_distribution<int>(-r, r)(rng);
      }
      auto [o, a] = jitter(obs[s], samples[s].action, g, off);
      bo.push_back(std::move(o));
      ba.push_back(a);
    }
    std::vector<const Observation*> ptrs;
    for (const auto& o : bo) ptrs.push_back(&o);
    nc::Graph<float> graph;
    nc::BoundParams<float> p(graph, m.params());
    const auto loss = nbp_loss(m, m.forward(graph, p, ptrs), ba);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw NumericError("nbp training diverged at step " + std::to_string(step));
    auto grads = graph.backward(loss);
    auto gs = p.collect(grads);
    nc::clip_grad_norm(gs, tc.grad_clip);
    nc::adamw_step(m.params(), gs, st, 1.0);
    history.push_back(lv);
    if (log && tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
      *log << "nbp step " << step << " loss " << lv << '\n';
    }
  }
  return history;
}

// ---------------------------------------------------------------- inference

namespace detail {

inline int argmax(const float* v, int n) { return static_cast<int>(std::max_element(v, v + n) - v); }

}  // namespace detail

/// Argmax of each head (first index on ties).
inline HighLevelAction decode(const NBPModel& m, const TensorF& trans, const TensorF& rot, const TensorF& grip,
                              std::int64_t row = 0) {
  const auto& g = m.config().grid;
  const auto cells = static_cast<int>(g.cells());
  HighLevelAction a;
  int f = detail::argmax(trans.ptr() + row * cells, cells);
  a.trans[2] = f % g.res[2];
  f /= g.res[2];
  a.trans[1] = f % g.res[1];
  a.trans[0] = f / g.res[1];
  for (int ax = 0; ax < 3; ++ax) {
    a.rot[static_cast<std::size_t>(ax)] = detail::argmax(rot.ptr() + row * 3 * g.rot_bins + ax * g.rot_bins, g.rot_bins);
  }
  a.grip = detail::argmax(grip.ptr() + row * 2, 2);
  return a;
}

struct NBPAction {
  HighLevelAction action;
  Pose7 pose{};
  int gripper = 0;
};

inline NBPAction nbp_act(const NBPModel& m, const Observation& o) {
  nc::Graph<float> g(false);
  nc::BoundParams<float> p(g, m.params());
  const auto l = m.forward(g, p, {&o});
  NBPAction out;
  out.action = decode(m, l.trans.value(), l.rot.value(), l.grip.value());
  out.pose = reconstruct(out.action, m.config().grid);
  out.gripper = out.action.grip;
  return out;
}

inline NBPAction nbp_act(const NBPModel& m, const TensorD& points, int token, int gripper, int ordinal) {
  return nbp_act(m, observe(points, token, gripper, ordinal, m.config().grid));
}

// -------------------------------------------------------------- persistence

inline void save_nbp(const NBPModel& m, const std::string& path) {
  nc::save_checkpoint(path, m.params());
  std::ofstream f(path + ".json");
  if (!f) throw FormatError("cannot write " + path + ".json");
  f << nlohmann::json{{"kind", "nbp"}, {"config", to_json(m.config())}}.dump(2) << '\n';
}

inline NBPModel load_nbp(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) throw FormatError("missing model sidecar " + path + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ".json: " + e.what());
  }
  if (side.value("kind", std::string()) != "nbp") throw FormatError(path + " is not an nbp checkpoint");
  NBPModel m(nbp_config_from_json(side.at("config")), 0);
  const auto all = nc::load_checkpoint(path);
  m.params().assign_from(all);
  return m;
}

}  // namespace hdp::nbp
