#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/data.hpp"
#include "hdp/env.hpp"
#include "hdp/error.hpp"
#include "hdp/nbp.hpp"
#include "hdp/rkd.hpp"

/// End-to-end glue: demo datasets, training wrappers, task grids and the
/// learned goal policy.
namespace hdp::pipeline {

using TensorD = nc::Tensor<double>;

/// Task geometry plus the voxel grid its high-level agent works on.
struct TaskBundle {
  env::TaskSpec task;
  nbp::GridConfig grid;
  nlohmann::json doc;  // task description as resolved
};

/// Workspace grid covering every keyframe of the task's scenes.
inline nbp::GridConfig default_grid(env::TaskKind k) {
  nbp::GridConfig g;
  g.res = {24, 24, 3};
  g.lo = {0.35, -0.3, -0.03};
  g.hi = {0.75, 0.3, 0.03};
  g.rot_bins = 36;
  g.snap_plane = true;
  g.plane_z = 0.0;
  if (k != env::TaskKind::Reach) {
    g.lo = {0.1, -0.4, -0.03};
    g.hi = {0.9, 0.4, 0.03};
  }
  return g;
}

inline TaskBundle bundle_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  TaskBundle b;
  b.task = env::task_from_json(j, base_dir);
  b.grid = default_grid(b.task.kind);
  if (j.contains("nbp")) {
    try {
      b.grid = nbp::grid_from_json(j["nbp"], b.grid);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("task grid: ") + e.what());
    }
  }
  b.grid.validate();
  b.doc = env::to_json(b.task);
  b.doc["nbp"] = nbp::to_json(b.grid);
  return b;
}

/// `spec` is a config path, or a task name resolved against `config_dir`
/// (falling back to built-in geometry when no file exists there).
inline TaskBundle resolve_task(const std::string& spec, const std::filesystem::path& config_dir = {}) {
  std::filesystem::path path = spec;
  if (!std::filesystem::exists(path)) {
    const auto named = config_dir / (spec + ".json");
    if (!config_dir.empty() && std::filesystem::exists(named)) {
      path = named;
    } else {
      nlohmann::json j{{"task", spec}};
      try {
        return bundle_from_json(j);
      } catch (const FormatError&) {
        throw FormatError("unknown task '" + spec + "' (not a file or task name)");
      }
    }
  }
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open task config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task config " + path.string() + ": " + e.what());
  }
  return bundle_from_json(j, path.parent_path());
}

/// Expert demonstrations drawn from one engine seeded with `seed`.
inline std::vector<data::Demonstration> generate_demos(const env::TaskSpec& t, int count, std::uint64_t seed) {
  if (count < 0) throw ArgumentError("demo count must be nonnegative");
  std::mt19937_64 rng(seed);
  std::vector<data::Demonstration> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(env::gen_expert_demo(t, t.planner, rng).demo);
  return out;
}

/// Variation token of a demo: index of the target whose text it carries.
inline int token_of(const env::TaskSpec& t, const data::Demonstration& d) {
  for (std::size_t i = 0; i < t.targets.size() && t.kind == env::TaskKind::Reach; ++i) {
    if (t.targets[i].text == d.text) return static_cast<int>(i);
  }
  return 0;
}

/// Random keyframe segment, endpoint-shifted, with its demo's scene points.
class SegmentSampler {
 public:
  explicit SegmentSampler(const std::vector<data::Demonstration>& demos)
      : demos_(&demos), segs_(data::build_segments(demos)) {
    if (segs_.empty()) throw ArgumentError("dataset yields no keyframe segments");
  }

  rkd::TrainExample operator()(std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, segs_.size() - 1);
    const auto& s = segs_[pick(rng)];
    const auto& d = (*demos_)[static_cast<std::size_t>(s.demo_index)];
    return {data::augment_endpoints(d, s, rng), d.points};
  }

  std::vector<data::SubTrajectory> unshifted() const {
    std::vector<data::SubTrajectory> subs;
    for (const auto& s : segs_) {
      subs.push_back(data::make_subtrajectory((*demos_)[static_cast<std::size_t>(s.demo_index)], s.begin, s.end,
                                              s.keyframe, s.demo_index));
    }
    return subs;
  }

  std::size_t size() const { return segs_.size(); }

 private:
  const std::vector<data::Demonstration>* demos_;
  std::vector<data::Segment> segs_;
};

inline rkd::RKDModel train_rkd_on(const std::vector<data::Demonstration>& demos, const kin::KinematicChain& chain,
                                  const rkd::RKDConfig& cfg, const rkd::TrainConfig& tc, std::uint64_t model_seed,
                                  std::ostream* log = nullptr) {
  const SegmentSampler sampler(demos);
  auto [pn, jn] = rkd::fit_normalizers(sampler.unshifted(), cfg.half_range_floor);
  rkd::RKDModel m(chain, cfg, pn, jn, model_seed);
  rkd::train_rkd(m, [&](std::mt19937_64& r) { return sampler(r); }, tc, log);
  return m;
}

inline std::vector<nbp::Sample> nbp_samples(const env::TaskSpec& t, const std::vector<data::Demonstration>& demos,
                                            const nbp::GridConfig& g) {
  std::vector<nbp::Sample> out;
  for (const auto& d : demos) {
    auto s = nbp::keyframe_samples(d, token_of(t, d), g);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

inline nbp::NBPModel train_nbp_on(const env::TaskSpec& t, const std::vector<data::Demonstration>& demos,
                                  const nbp::NBPConfig& cfg, const nbp::TrainConfig& tc, std::uint64_t model_seed,
                                  std::ostream* log = nullptr) {
  nbp::NBPModel m(cfg, model_seed);
  nbp::train_nbp(m, nbp_samples(t, demos, cfg.grid), tc, log);
  return m;
}

/// Goal policy backed by a trained high-level model.
inline env::GoalPolicy nbp_policy(const nbp::NBPModel& m) {
  return [&m](const env::Observation& o) {
    const auto a = nbp::nbp_act(m, *o.points, o.token, o.gripper, o.ordinal);
    return env::Goal{a.pose, a.gripper};
  };
}

}  // namespace hdp::pipeline
