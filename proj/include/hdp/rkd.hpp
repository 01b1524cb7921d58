#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hdp/data.hpp"
#include "hdp/denoiser.hpp"
#include "hdp/diffusion.hpp"
#include "hdp/error.hpp"
#include "hdp/kinematics.hpp"
#include "hdp/numcore/adamw.hpp"
#include "hdp/numcore/checkpoint.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/ops.hpp"

// Pose and joint trajectory diffusers trained jointly, with a through-FK
// consistency term, plus gradient refinement of sampled joints against the
// sampled pose path.

namespace hdp::rkd {

using nc::Shape;
using nc::Tensor;
using TensorD = nc::Tensor<double>;
using TensorF = nc::Tensor<float>;

inline constexpr std::int64_t kHorizon = data::kTrajectoryLength;

// ------------------------------------------------------------ normalization

/// Per-channel affine map of [min, max] onto [-1, 1]. The half range is
/// floored so near-constant channels are not blown up.
struct ChannelNormalizer {
  std::vector<double> mid;
  std::vector<double> half;

  int channels() const { return static_cast<int>(mid.size()); }
  double to_unit(std::size_t c, double v) const { return (v - mid[c]) / half[c]; }
  double from_unit(std::size_t c, double u) const { return mid[c] + half[c] * u; }

  static ChannelNormalizer fit(const std::vector<const TensorD*>& sets, double floor) {
    if (sets.empty()) throw ArgumentError("normalizer needs data");
    const std::int64_t ch = sets.front()->dim(1);
    std::vector<double> lo(static_cast<std::size_t>(ch), 1e300), hi(static_cast<std::size_t>(ch), -1e300);
    for (const auto* t : sets) {
      if (t->dim(1) != ch) throw ShapeError("normalizer inputs differ in width");
      for (std::int64_t r = 0; r < t->dim(0); ++r) {
        for (std::int64_t c = 0; c < ch; ++c) {
          lo[static_cast<std::size_t>(c)] = std::min(lo[static_cast<std::size_t>(c)], (*t)[r * ch + c]);
          hi[static_cast<std::size_t>(c)] = std::max(hi[static_cast<std::size_t>(c)], (*t)[r * ch + c]);
        }
      }
    }
    ChannelNormalizer n;
    for (std::size_t c = 0; c < lo.size(); ++c) {
      n.mid.push_back(0.5 * (lo[c] + hi[c]));
      n.half.push_back(std::max(0.5 * (hi[c] - lo[c]), floor));
    }
    return n;
  }

  nlohmann::json to_json() const { return {{"mid", mid}, {"half", half}}; }
  static ChannelNormalizer from_json(const nlohmann::json& j) {
    ChannelNormalizer n{j.at("mid").get<std::vector<double>>(), j.at("half").get<std::vector<double>>()};
    if (n.mid.size() != n.half.size()) throw FormatError("normalizer mid/half length mismatch");
    for (double h : n.half) {
      if (!(h > 0)) throw FormatError("normalizer half range must be positive");
    }
    return n;
  }
};

// --------------------------------------------------------------- conditions

struct Conditions {
  std::array<double, 7> start_pose{};
  std::array<double, 7> goal_pose{};
  std::vector<double> state;  // joints followed by the end-effector pose
  double gripper = 0.0;
  TensorD points{Shape{0, 3}};
  double rank = 1.0;
  std::vector<double> start_joints;
};

inline Conditions conditions_from(const data::SubTrajectory& s, const TensorD& points) {
  Conditions c;
  c.start_pose = s.start_pose;
  c.goal_pose = s.goal_pose;
  c.state = s.state;
  c.gripper = s.gripper;
  c.points = points;
  c.rank = s.rank;
  c.start_joints = s.start_joints;
  return c;
}

/// Network-side condition tensors for a batch; pose fields and the state
/// vector go through the channel normalizers.
template <typename T>
den::ConditionBatch<T> make_condition_batch(const ChannelNormalizer& pose_norm, const ChannelNormalizer& joint_norm,
                                            const std::vector<const Conditions*>& conds, std::vector<bool> drop) {
  const auto batch = static_cast<std::int64_t>(conds.size());
  const auto n = static_cast<std::int64_t>(joint_norm.channels());
  const std::int64_t m = conds.empty() ? 0 : conds.front()->points.dim(0);
  den::ConditionBatch<T> cb;
  cb.start_pose = Tensor<T>(Shape{batch, 7});
  cb.goal_pose = Tensor<T>(Shape{batch, 7});
  cb.state = Tensor<T>(Shape{batch, n + 7});
  cb.gripper = Tensor<T>(Shape{batch, 1});
  cb.rank = Tensor<T>(Shape{batch, 1});
  cb.points = Tensor<T>(Shape{batch, m, 3});
  for (std::int64_t b = 0; b < batch; ++b) {
    const Conditions& c = *conds[static_cast<std::size_t>(b)];
    if (static_cast<std::int64_t>(c.state.size()) != n + 7) throw ShapeError("condition state must be joints + pose");
    if (c.points.dim(0) != m) throw ShapeError("condition point counts differ within a batch");
    if (!(c.rank > 0.0 && c.rank <= 1.0 + 1e-9)) throw ArgumentError("rank condition outside (0, 1]");
    for (std::size_t k = 0; k < 7; ++k) {
      cb.start_pose[b * 7 + static_cast<std::int64_t>(k)] = static_cast<T>(pose_norm.to_unit(k, c.start_pose[k]));
      cb.goal_pose[b * 7 + static_cast<std::int64_t>(k)] = static_cast<T>(pose_norm.to_unit(k, c.goal_pose[k]));
    }
    for (std::int64_t k = 0; k < n; ++k) {
      cb.state[b * (n + 7) + k] = static_cast<T>(joint_norm.to_unit(static_cast<std::size_t>(k), c.state[static_cast<std::size_t>(k)]));
    }
    for (std::size_t k = 0; k < 7; ++k) {
      cb.state[b * (n + 7) + n + static_cast<std::int64_t>(k)] =
          static_cast<T>(pose_norm.to_unit(k, c.state[static_cast<std::size_t>(n) + k]));
    }
    cb.gripper[b] = static_cast<T>(c.gripper);
    cb.rank[b] = static_cast<T>(c.rank);
    for (std::int64_t i = 0; i < m * 3; ++i) cb.points[b * m * 3 + i] = static_cast<T>(c.points[i]);
  }
  drop.resize(static_cast<std::size_t>(batch), false);
  cb.drop = std::move(drop);
  return cb;
}

// ------------------------------------------------------------------- config

enum class Head { Pose, Joint };

struct LossWeights {
  double pose = 1.0;
  double joint = 1.0;
  double distill = 1.0;
};

struct RefineConfig {
  double alpha = 0.05;
  int steps = 100;
  double stop_tol = 1e-6;
  double w_rot = kin::kDefaultRotWeight;
  int max_backtracks = 30;
  double metric_damping = 1e-4;  // 0 disables the FK-metric preconditioner
};

struct RefinementTrace {
  double initial_residual = 0.0;
  std::vector<double> residuals;  // after each iteration
  bool diverged = false;
  double final_residual() const { return residuals.empty() ? initial_residual : residuals.back(); }
};

/// Network size used for the toy tasks (CPU training budget).
inline den::DenoiserConfig compact_network() {
  den::DenoiserConfig c;
  c.widths = {32, 64, 64};
  c.context_width = 64;
  c.cond_hidden = {64};
  c.field_width = 32;
  c.point_hidden = {32, 64};
  c.step_features = 32;
  c.step_width = 64;
  return c;
}

struct RKDConfig {
  den::DenoiserConfig network = compact_network();  // channels and state_dim are set per head
  int diffusion_steps = 100;
  diff::ScheduleKind schedule = diff::ScheduleKind::Cosine;
  LossWeights weights;
  RefineConfig refine;
  double guidance = 1.0;
  double drop_prob = 0.1;
  double half_range_floor = 0.05;
};

inline nlohmann::json to_json(const RKDConfig& c) {
  return {{"network", den::to_json(c.network)},
          {"diffusion_steps", c.diffusion_steps},
          {"schedule", diff::to_string(c.schedule)},
          {"weights", {{"pose", c.weights.pose}, {"joint", c.weights.joint}, {"distill", c.weights.distill}}},
          {"refine",
           {{"alpha", c.refine.alpha}, {"steps", c.refine.steps}, {"stop_tol", c.refine.stop_tol},
            {"w_rot", c.refine.w_rot}, {"max_backtracks", c.refine.max_backtracks},
            {"metric_damping", c.refine.metric_damping}}},
          {"guidance", c.guidance},
          {"drop_prob", c.drop_prob},
          {"half_range_floor", c.half_range_floor}};
}

/// Fields absent from `j` keep the values already in `c`.
inline RKDConfig rkd_config_from_json(const nlohmann::json& j, RKDConfig c = {}) {
  if (j.contains("network")) {
    auto net = den::to_json(c.network);
    net.update(j["network"]);
    c.network = den::denoiser_config_from_json(net);
  }
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  if (j.contains("schedule")) c.schedule = diff::schedule_kind_from_string(j["schedule"].get<std::string>());
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    c.weights = {w.value("pose", c.weights.pose), w.value("joint", c.weights.joint),
                 w.value("distill", c.weights.distill)};
  }
  if (j.contains("refine")) {
    const auto& r = j["refine"];
    c.refine.alpha = r.value("alpha", c.refine.alpha);
    c.refine.steps = r.value("steps", c.refine.steps);
    c.refine.stop_tol = r.value("stop_tol", c.refine.stop_tol);
    c.refine.w_rot = r.value("w_rot", c.refine.w_rot);
    c.refine.max_backtracks = r.value("max_backtracks", c.refine.max_backtracks);
    c.refine.metric_damping = r.value("metric_damping", c.refine.metric_damping);
  }
  c.guidance = j.value("guidance", c.guidance);
  c.drop_prob = j.value("drop_prob", c.drop_prob);
  c.half_range_floor = j.value("half_range_floor", c.half_range_floor);
  if (c.weights.pose < 0 || c.weights.joint < 0 || c.weights.distill < 0) {
    throw ArgumentError("loss weights must be nonnegative");
  }
  return c;
}

// -------------------------------------------------------------------- model

class RKDModel {
 public:
  RKDModel(kin::KinematicChain chain, RKDConfig cfg, ChannelNormalizer pose_norm, ChannelNormalizer joint_norm,
           std::uint64_t seed)
      : chain_(std::move(chain)),
        cfg_(std::move(cfg)),
        pose_norm_(std::move(pose_norm)),
        joint_norm_(std::move(joint_norm)),
        schedule_(diff::make_schedule(cfg_.diffusion_steps, cfg_.schedule)) {
    if (pose_norm_.channels() != 7) throw ShapeError("pose normalizer must have 7 channels");
    if (joint_norm_.channels() != chain_.dof()) throw ShapeError("joint normalizer width differs from chain dof");
    auto net = cfg_.network;
    net.horizon = static_cast<int>(kHorizon);
    net.state_dim = chain_.dof() + 7;
    net.channels = 7;
    pose_net_ = den::DenoiserModel<float>(net, seed);
    net.channels = chain_.dof();
    joint_net_ = den::DenoiserModel<float>(net, seed + 1);
  }

  RKDModel(const RKDModel&) = delete;
  RKDModel& operator=(const RKDModel&) = delete;
  RKDModel(RKDModel&&) = default;

  const kin::KinematicChain& chain() const { return chain_; }
  const RKDConfig& config() const { return cfg_; }
  RKDConfig& config() { return cfg_; }
  const diff::DiffusionSchedule& schedule() const { return schedule_; }
  const ChannelNormalizer& pose_normalizer() const { return pose_norm_; }
  const ChannelNormalizer& joint_normalizer() const { return joint_norm_; }
  den::DenoiserModel<float>& pose_net() { return pose_net_; }
  den::DenoiserModel<float>& joint_net() { return joint_net_; }
  const den::DenoiserModel<float>& pose_net() const { return pose_net_; }
  const den::DenoiserModel<float>& joint_net() const { return joint_net_; }
  const den::DenoiserModel<float>& net(Head h) const { return h == Head::Pose ? pose_net_ : joint_net_; }
  const ChannelNormalizer& normalizer(Head h) const { return h == Head::Pose ? pose_norm_ : joint_norm_; }

  /// Double-precision copies of both networks (for finite-difference checks).
  std::pair<den::DenoiserModel<double>, den::DenoiserModel<double>> to_double() const {
    auto net = pose_net_.config();
    den::DenoiserModel<double> p(net, 0);
    p.params().assign_from(pose_net_.params());
    den::DenoiserModel<double> j(joint_net_.config(), 0);
    j.params().assign_from(joint_net_.params());
    return {std::move(p), std::move(j)};
  }

 private:
  kin::KinematicChain chain_;
  RKDConfig cfg_;
  ChannelNormalizer pose_norm_;
  ChannelNormalizer joint_norm_;
  diff::DiffusionSchedule schedule_;
  den::DenoiserModel<float> pose_net_;
  den::DenoiserModel<float> joint_net_;
};

/// Normalizers fitted on the pose and joint rows of a dataset.
inline std::pair<ChannelNormalizer, ChannelNormalizer> fit_normalizers(const std::vector<data::SubTrajectory>& subs,
                                                                       double floor) {
  std::vector<const TensorD*> poses, joints;
  for (const auto& s : subs) {
    poses.push_back(&s.poses);
    joints.push_back(&s.joints);
  }
  return {ChannelNormalizer::fit(poses, floor), ChannelNormalizer::fit(joints, floor)};
}

// ----------------------------------------------------------------- training

struct TrainExample {
  data::SubTrajectory sub;
  TensorD points{Shape{0, 3}};
};

/// One noised minibatch, channels-first and normalized, plus the raw pose
/// rows [B * 64, 7] that the FK term compares against.
template <typename T>
struct TrainBatch {
  Tensor<T> pose_noisy, pose_clean;
  Tensor<T> joint_noisy, joint_clean;
  Tensor<T> pose_rows;
  std::vector<int> steps;
  den::ConditionBatch<T> cond;

  template <typename U>
  TrainBatch<U> cast() const {
    return {pose_noisy.template cast<U>(), pose_clean.template cast<U>(), joint_noisy.template cast<U>(),
            joint_clean.template cast<U>(), pose_rows.template cast<U>(), steps, cond.template cast<U>()};
  }
};

namespace detail {

inline TensorF normalized_channels_first(const TensorD& rows, const ChannelNormalizer& n) {
  const std::int64_t len = rows.dim(0), ch = rows.dim(1);
  TensorF out(Shape{ch, len});
  for (std::int64_t t = 0; t < len; ++t) {
    for (std::int64_t c = 0; c < ch; ++c) out[c * len + t] = static_cast<float>(n.to_unit(static_cast<std::size_t>(c), rows[t * ch + c]));
  }
  return out;
}

inline void put_slice(TensorF& dst, std::int64_t b, const TensorF& src) {
  std::copy(src.data().begin(), src.data().end(), dst.ptr() + b * src.size());
}

}  // namespace detail

inline TrainBatch<float> make_train_batch(const RKDModel& m, const std::vector<const TrainExample*>& examples,
                                          std::mt19937_64& rng) {
  const auto batch = static_cast<std::int64_t>(examples.size());
  const std::int64_t n = m.chain().dof();
  TrainBatch<float> b;
  b.pose_noisy = TensorF(Shape{batch, 7, kHorizon});
  b.pose_clean = TensorF(Shape{batch, 7, kHorizon});
  b.joint_noisy = TensorF(Shape{batch, n, kHorizon});
  b.joint_clean = TensorF(Shape{batch, n, kHorizon});
  b.pose_rows = TensorF(Shape{batch * kHorizon, 7});
  std::uniform_int_distribution<int> kd(1, m.schedule().steps);
  std::bernoulli_distribution drop(m.config().drop_prob);
  std::vector<Conditions> conds;
  std::vector<bool> dropped;
  for (std::int64_t i = 0; i < batch; ++i) {
    const auto& ex = *examples[static_cast<std::size_t>(i)];
    if (ex.sub.poses.dim(0) != kHorizon || ex.sub.joints.dim(0) != kHorizon) {
      throw ShapeError("training trajectories must have 64 rows");
    }
    const int k = kd(rng);
    b.steps.push_back(k);
    const TensorF p0 = detail::normalized_channels_first(ex.sub.poses, m.pose_normalizer());
    const TensorF j0 = detail::normalized_channels_first(ex.sub.joints, m.joint_normalizer());
    const auto pk = diff::forward_diffuse(p0, k, m.schedule(), diff::standard_normal(p0.shape(), rng));
    const auto jk = diff::forward_diffuse(j0, k, m.schedule(), diff::standard_normal(j0.shape(), rng));
    detail::put_slice(b.pose_clean, i, p0);
    detail::put_slice(b.pose_noisy, i, pk.values);
    detail::put_slice(b.joint_clean, i, j0);
    detail::put_slice(b.joint_noisy, i, jk.values);
    for (std::int64_t r = 0; r < kHorizon * 7; ++r) b.pose_rows[i * kHorizon * 7 + r] = static_cast<float>(ex.sub.poses[r]);
    conds.push_back(conditions_from(ex.sub, ex.points));
    dropped.push_back(drop(rng));
  }
  std::vector<const Conditions*> ptrs;
  for (const auto& c : conds) ptrs.push_back(&c);
  b.cond = make_condition_batch<float>(m.pose_normalizer(), m.joint_normalizer(), ptrs, std::move(dropped));
  return b;
}

template <typename T>
struct LossTerms {
  nc::Var<T> pose, joint, distill, total;
};

/// Weighted sum of the two denoising MSEs and the mean pose distance between
/// FK of the (denormalized) joint prediction and the clean pose rows.
template <typename T>
LossTerms<T> rkd_loss(nc::Graph<T>& g, const den::DenoiserModel<T>& pose_net, const nc::BoundParams<T>& pp,
                      const den::DenoiserModel<T>& joint_net, const nc::BoundParams<T>& jp, const TrainBatch<T>& b,
                      const kin::KinematicChain& chain, const ChannelNormalizer& joint_norm, const LossWeights& w,
                      double w_rot = kin::kDefaultRotWeight) {
  LossTerms<T> out;
  out.pose = nc::mse(pose_net.forward(g, pp, g.constant(b.pose_noisy), b.steps, b.cond), g.constant(b.pose_clean));
  nc::Var<T> jpred = joint_net.forward(g, jp, g.constant(b.joint_noisy), b.steps, b.cond);
  out.joint = nc::mse(jpred, g.constant(b.joint_clean));

  const std::int64_t batch = b.joint_noisy.dim(0), n = b.joint_noisy.dim(1), len = b.joint_noisy.dim(2);
  Tensor<T> scale(Shape{batch, n, len});
  Tensor<T> mid(Shape{n});
  for (std::int64_t c = 0; c < n; ++c) {
    mid[c] = static_cast<T>(joint_norm.mid[static_cast<std::size_t>(c)]);
    for (std::int64_t i = 0; i < batch; ++i) {
      for (std::int64_t t = 0; t < len; ++t) {
        scale[(i * n + c) * len + t] = static_cast<T>(joint_norm.half[static_cast<std::size_t>(c)]);
      }
    }
  }
  nc::Var<T> raw = nc::bias_add(nc::mul(jpred, g.constant(std::move(scale))), g.constant(std::move(mid)), 1);
  nc::Var<T> rows = nc::reshape(nc::transpose_last2(raw), Shape{batch * len, n});
  nc::Var<T> fk = kin::fk_op(chain, rows);
  out.distill = nc::mean(kin::pose_distance_op(fk, g.constant(b.pose_rows), static_cast<T>(w_rot)));
  out.total = nc::add(nc::add(nc::scale(out.pose, static_cast<T>(w.pose)), nc::scale(out.joint, static_cast<T>(w.joint))),
                      nc::scale(out.distill, static_cast<T>(w.distill)));
  return out;
}

struct TrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  int warmup = 100;
  std::uint64_t seed = 0;
  int log_every = 0;
};

struct TrainLog {
  int step = 0;
  double total = 0, pose = 0, joint = 0, distill = 0;
};

/// Linear warmup, then cosine decay to 10% of the base rate.
inline double lr_multiplier(int step, int total, int warmup) {
  if (step < warmup) return static_cast<double>(step + 1) / warmup;
  const double p = static_cast<double>(step - warmup) / std::max(1, total - warmup);
  return 0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * p));
}

using ExampleSource = std::function<TrainExample(std::mt19937_64&)>;

/// Optimizes both networks in place; returns per-step loss terms.
inline std::vector<TrainLog> train_rkd(RKDModel& m, const ExampleSource& source, const TrainConfig& tc,
                                       std::ostream* log = nullptr) {
  if (tc.steps < 0 || tc.batch < 1) throw ArgumentError("invalid training configuration");
  std::mt19937_64 rng(tc.seed);
  const nc::AdamWConfig opt{.lr = tc.lr, .weight_decay = tc.weight_decay};
  auto pst = nc::OptState<float>::for_params(m.pose_net().params(), opt);
  auto jst = nc::OptState<float>::for_params(m.joint_net().params(), opt);
  std::vector<TrainLog> history;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<TrainExample> exs;
    for (int i = 0; i < tc.batch; ++i) exs.push_back(source(rng));
    std::vector<const TrainExample*> ptrs;
    for (const auto& e : exs) ptrs.push_back(&e);
    const auto batch = make_train_batch(m, ptrs, rng);
    nc::Graph<float> g;
    nc::BoundParams<float> pp(g, m.pose_net().params());
    nc::BoundParams<float> jp(g, m.joint_net().params());
    TrainLog entry{step};
    try {
      auto terms = rkd_loss(g, m.pose_net(), pp, m.joint_net(), jp, batch, m.chain(), m.joint_normalizer(),
                            m.config().weights, m.config().refine.w_rot);
      entry.total = terms.total.value().item();
      entry.pose = terms.pose.value().item();
      entry.joint = terms.joint.value().item();
      entry.distill = terms.distill.value().item();
      auto grads = g.backward(terms.total);
      auto pg = pp.collect(grads);
      auto jg = jp.collect(grads);
      nc::clip_grad_norm(pg, tc.grad_clip);
      nc::clip_grad_norm(jg, tc.grad_clip);
      const double lr = lr_multiplier(step, tc.steps, tc.warmup);
      nc::adamw_step(m.pose_net().params(), pg, pst, lr);
      nc::adamw_step(m.joint_net().params(), jg, jst, lr);
    } catch (const NumericError& e) {
      throw NumericError("rkd training diverged at step " + std::to_string(step) + " (last loss " +
                         (history.empty() ? std::string("n/a") : std::to_string(history.back().total)) + "): " +
                         e.what());
    }
    history.push_back(entry);
    if (log && tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
      *log << "rkd step " << step << " loss " << entry.total << " (pose " << entry.pose << ", joint " << entry.joint
           << ", fk " << entry.distill << ")\n";
    }
  }
  return history;
}

/// Builds a model with normalizers fitted on `dataset` and trains it on
/// uniformly drawn examples.
inline RKDModel train_rkd(const std::vector<TrainExample>& dataset, const kin::KinematicChain& chain,
                          const RKDConfig& cfg, const TrainConfig& tc, std::vector<TrainLog>* history = nullptr,
                          std::ostream* log = nullptr) {
  if (dataset.empty()) throw ArgumentError("train_rkd needs a nonempty dataset");
  std::vector<data::SubTrajectory> subs;
  for (const auto& e : dataset) subs.push_back(e.sub);
  auto [pn, jn] = fit_normalizers(subs, cfg.half_range_floor);
  RKDModel m(chain, cfg, pn, jn, tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  auto h = train_rkd(m, [&](std::mt19937_64& r) { return dataset[pick(r)]; }, tc, log);
  if (history) *history = std::move(h);
  return m;
}

// ----------------------------------------------------------------- sampling

/// Draws a 64-row trajectory for one head in raw units. Inpainting runs in
/// normalized space; the fixed rows are then overwritten with the raw
/// conditioning values so they match bit for bit. Pose quaternions are left
/// as produced.
inline TensorD sample_trajectory(const RKDModel& m, Head head, const Conditions& c, std::mt19937_64& rng) {
  const auto& net = m.net(head);
  const auto& norm = m.normalizer(head);
  const std::int64_t ch = norm.channels();
  const float w = static_cast<float>(m.config().guidance);
  const bool guided = w != 1.0f;
  std::vector<const Conditions*> conds{&c};
  std::vector<bool> drop{false};
  if (guided) {
    conds.push_back(&c);
    drop.push_back(true);
  }
  const auto cb = make_condition_batch<float>(m.pose_normalizer(), m.joint_normalizer(), conds, drop);
  const auto batch = static_cast<std::int64_t>(conds.size());

  diff::Denoiser fn = [&](const TensorF& x, int k) {
    TensorF xin(Shape{batch, ch, kHorizon});
    const TensorF cf = den::to_channels_first(x);
    for (std::int64_t b = 0; b < batch; ++b) detail::put_slice(xin, b, cf);
    nc::Graph<float> g(false);
    nc::BoundParams<float> p(g, net.params());
    const TensorF out = net.forward(g, p, g.constant(std::move(xin)), std::vector<int>(static_cast<std::size_t>(batch), k), cb).value();
    if (!guided) return den::from_channels_first(out, 0);
    return diff::cfg_combine(den::from_channels_first(out, 0), den::from_channels_first(out, 1), w);
  };

  diff::InpaintMask mask;
  auto unit_row = [&](const double* raw) {
    std::vector<float> r(static_cast<std::size_t>(ch));
    for (std::int64_t k = 0; k < ch; ++k) r[static_cast<std::size_t>(k)] = static_cast<float>(norm.to_unit(static_cast<std::size_t>(k), raw[k]));
    return r;
  };
  if (head == Head::Pose) {
    mask.fix_row(0, unit_row(c.start_pose.data()));
    mask.fix_row(kHorizon - 1, unit_row(c.goal_pose.data()));
  } else {
    if (static_cast<std::int64_t>(c.start_joints.size()) != ch) throw ShapeError("start joints differ from chain dof");
    mask.fix_row(0, unit_row(c.start_joints.data()));
  }
  const TensorF unit = diff::sample_with_inpainting(fn, mask, m.schedule(), kHorizon, ch, rng);

  TensorD out(Shape{kHorizon, ch});
  for (std::int64_t t = 0; t < kHorizon; ++t) {
    for (std::int64_t k = 0; k < ch; ++k) out[t * ch + k] = norm.from_unit(static_cast<std::size_t>(k), unit[t * ch + k]);
  }
  auto put = [&](std::int64_t row, const double* v) { std::copy(v, v + ch, out.ptr() + row * ch); };
  if (head == Head::Pose) {
    put(0, c.start_pose.data());
    put(kHorizon - 1, c.goal_pose.data());
  } else {
    put(0, c.start_joints.data());
  }
  return out;
}

/// Pose rows with unit quaternions.
inline TensorD normalize_pose_rows(const TensorD& poses) {
  TensorD out = poses;
  for (std::int64_t r = 0; r < out.dim(0); ++r) {
    double* q = out.ptr() + r * 7 + 3;
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (!(n > 1e-9)) throw NumericError("pose row " + std::to_string(r) + " has a degenerate quaternion");
    for (int k = 0; k < 4; ++k) q[k] /= n;
  }
  return out;
}

// --------------------------------------------------------------- refinement

/// Descent on sum_t pose_distance(FK(q_t), target_t) over rows t >= 1. The
/// joint gradient (pulled back through FK) is preconditioned per row by
/// (J^T J + damping I)^-1, J being the pose Jacobian. Each row keeps its own
/// step size: halved until the row residual strictly decreases, doubled after
/// an accepted step, never above alpha. Iterates are projected into the joint
/// limits.
inline std::pair<TensorD, RefinementTrace> refine_joints(const kin::KinematicChain& chain, const TensorD& joints,
                                                         const TensorD& poses, const RefineConfig& cfg = {}) {
  if (joints.rank() != 2 || joints.dim(1) != chain.dof()) throw ShapeError("joint trajectory width differs from dof");
  if (poses.rank() != 2 || poses.dim(1) != 7 || poses.dim(0) != joints.dim(0)) {
    throw ShapeError("pose trajectory must be [rows, 7] matching the joints");
  }
  const TensorD target = normalize_pose_rows(poses);
  const std::int64_t rows = joints.dim(0), n = joints.dim(1);
  TensorD q = joints;
  for (std::int64_t r = 1; r < rows; ++r) chain.clamp<double>({q.ptr() + r * n, static_cast<std::size_t>(n)});

  auto row_residual = [&](const double* qr, std::int64_t r) {
    const auto p = kin::forward_kinematics<double>(chain, std::span<const double>(qr, static_cast<std::size_t>(n))).row();
    return kin::pose_distance_row(p.data(), target.ptr() + r * 7, cfg.w_rot);
  };
  std::vector<double> res(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) res[static_cast<std::size_t>(r)] = row_residual(q.ptr() + r * n, r);
  auto total = [&] {
    double s = 0;
    for (double v : res) s += v;
    return s;
  };

  RefinementTrace trace;
  trace.initial_residual = total();
  TensorD best = q;
  double best_res = trace.initial_residual;
  std::vector<double> step(static_cast<std::size_t>(rows), cfg.alpha);
  std::vector<double> cand(static_cast<std::size_t>(n));
  std::vector<TensorD> jac;  // jac[k] row r: d pose_k / d q_r
  double prev = trace.initial_residual;
  for (int it = 0; it < cfg.steps; ++it) {
    const TensorD fk = kin::forward_kinematics<double>(chain, q);
    TensorD cot(Shape{rows, 7});
    for (std::int64_t r = 1; r < rows; ++r) {
      kin::pose_distance_row_grad(fk.ptr() + r * 7, target.ptr() + r * 7, cfg.w_rot, 1.0, cot.ptr() + r * 7,
                                  static_cast<double*>(nullptr));
    }
    const TensorD grad = kin::fk_pullback<double>(chain, q, cot);
    if (cfg.metric_damping > 0) {
      jac.clear();
      for (int k = 0; k < 7; ++k) {
        TensorD e(Shape{rows, 7});
        for (std::int64_t r = 0; r < rows; ++r) e[r * 7 + k] = 1.0;
        jac.push_back(kin::fk_pullback<double>(chain, q, e));
      }
    }
    Eigen::MatrixXd jr(7, n), h(n, n);
    Eigen::VectorXd dir(n);
    for (std::int64_t r = 1; r < rows; ++r) {
      const double* g = grad.ptr() + r * n;
      double gn = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        gn += g[j] * g[j];
        dir[j] = g[j];
      }
      if (gn == 0.0) continue;
      if (cfg.metric_damping > 0) {
        for (int k = 0; k < 7; ++k) {
          for (std::int64_t j = 0; j < n; ++j) jr(k, j) = jac[static_cast<std::size_t>(k)][r * n + j];
        }
        h = jr.transpose() * jr;
        h.diagonal().array() += cfg.metric_damping;
        dir = h.ldlt().solve(dir);
      }
      auto& a = step[static_cast<std::size_t>(r)];
      for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
        for (std::int64_t j = 0; j < n; ++j) cand[static_cast<std::size_t>(j)] = q[r * n + j] - a * dir[j];
        chain.clamp<double>(cand);
        const double rc = row_residual(cand.data(), r);
        if (rc < res[static_cast<std::size_t>(r)]) {
          std::copy(cand.begin(), cand.end(), q.ptr() + r * n);
          res[static_cast<std::size_t>(r)] = rc;
          a = std::min(cfg.alpha, 2.0 * a);
          break;
        }
        a *= 0.5;
      }
    }
    const double cur = total();
    trace.residuals.push_back(cur);
    if (cur < best_res) {
      best_res = cur;
      best = q;
    } else if (cur > 2.0 * best_res) {
      trace.diverged = true;
      break;
    }
    if (prev - cur < cfg.stop_tol) break;
    prev = cur;
  }
  return {std::move(best), std::move(trace)};
}

// ---------------------------------------------------------------------- act

struct RKDAction {
  TensorD joints;            // refined, within limits
  TensorD joints_unrefined;  // joint head sample
  TensorD poses_raw;         // pose head sample as produced
  TensorD poses;             // quaternion-normalized pose targets
  RefinementTrace trace;
};

inline RKDAction rkd_act(const RKDModel& m, const Conditions& c, std::mt19937_64& rng) {
  RKDAction a;
  a.poses_raw = sample_trajectory(m, Head::Pose, c, rng);
  a.poses = normalize_pose_rows(a.poses_raw);
  a.joints_unrefined = sample_trajectory(m, Head::Joint, c, rng);
  auto [q, trace] = refine_joints(m.chain(), a.joints_unrefined, a.poses, m.config().refine);
  a.joints = std::move(q);
  a.trace = std::move(trace);
  return a;
}

// ----------------------------------------------------------- error law

inline double predict_violation_prob(double p, int steps) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("per-step probability must lie in [0, 1]");
  if (steps < 1) throw ArgumentError("step count must be at least 1");
  return 1.0 - std::pow(1.0 - p, steps);
}

/// Fraction of simulated trajectories with at least one violating step.
inline double simulate_violation_rate(double p, int steps, int trials, std::mt19937_64& rng) {
  std::bernoulli_distribution bad(p);
  int hits = 0;
  for (int i = 0; i < trials; ++i) {
    bool any = false;
    for (int t = 0; t < steps; ++t) any = bad(rng) || any;
    hits += any ? 1 : 0;
  }
  return static_cast<double>(hits) / trials;
}

// -------------------------------------------------------------- persistence

inline void save_rkd(const RKDModel& m, const std::string& path) {
  nc::ParamStore<float> all;
  for (const auto& p : m.pose_net().params()) all.add("pose." + p.name, p.value);
  for (const auto& p : m.joint_net().params()) all.add("joint." + p.name, p.value);
  nc::save_checkpoint(path, all);
  nlohmann::json side{{"kind", "rkd"},
                      {"config", to_json(m.config())},
                      {"schedule", diff::schedule_to_json(m.schedule())},
                      {"pose_normalizer", m.pose_normalizer().to_json()},
                      {"joint_normalizer", m.joint_normalizer().to_json()},
                      {"chain", kin::chain_to_json(m.chain())}};
  std::ofstream f(path + ".json");
  if (!f) throw FormatError("cannot write " + path + ".json");
  f << side.dump(2) << '\n';
}

inline RKDModel load_rkd(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) throw FormatError("missing model sidecar " + path + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ".json: " + e.what());
  }
  if (side.value("kind", std::string()) != "rkd") throw FormatError(path + " is not an rkd checkpoint");
  RKDModel m(kin::chain_from_json(side.at("chain")), rkd_config_from_json(side.at("config")),
             ChannelNormalizer::from_json(side.at("pose_normalizer")),
             ChannelNormalizer::from_json(side.at("joint_normalizer")), 0);
  const auto all = nc::load_checkpoint(path);
  auto fill = [&](nc::ParamStore<float>& dst, const std::string& prefix) {
    for (auto& p : dst) {
      const auto& v = all.get(prefix + p.name);
      nc::require_same_shape(v.shape(), p.value.shape(), p.name.c_str());
      p.value = v;
    }
  };
  fill(m.pose_net().params(), "pose.");
  fill(m.joint_net().params(), "joint.");
  return m;
}

}  // namespace hdp::rkd
