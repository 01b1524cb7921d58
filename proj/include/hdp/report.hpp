#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/env.hpp"
#include "hdp/error.hpp"

/// Rollout reports: JSON documents of per-episode results, plus CSV and SVG
/// trajectory exports.
namespace hdp::report {

using env::EpisodeResult;
using TensorD = nc::Tensor<double>;

namespace detail {

inline nlohmann::json rows(const TensorD& t) {
  nlohmann::json a = nlohmann::json::array();
  if (t.rank() != 2) return a;
  for (std::int64_t r = 0; r < t.dim(0); ++r) {
    a.push_back(std::vector<double>(t.ptr() + r * t.dim(1), t.ptr() + (r + 1) * t.dim(1)));
  }
  return a;
}

inline TensorD from_rows(const nlohmann::json& a, std::int64_t width) {
  TensorD t(nc::Shape{static_cast<std::int64_t>(a.size()), width});
  for (std::size_t r = 0; r < a.size(); ++r) {
    const auto v = a[r].get<std::vector<double>>();
    if (static_cast<std::int64_t>(v.size()) != width) throw FormatError("report row width mismatch");
    std::copy(v.begin(), v.end(), t.ptr() + static_cast<std::int64_t>(r) * width);
  }
  return t;
}

}  // namespace detail

inline nlohmann::json to_json(const EpisodeResult& e) {
  nlohmann::json goals = nlohmann::json::array();
  for (const auto& g : e.goals) goals.push_back({{"pose", g.pose}, {"gripper", g.gripper}});
  return {{"index", e.index},
          {"seed", e.seed},
          {"success", e.success},
          {"failure", env::to_string(e.failure)},
          {"detail", e.detail},
          {"variation", e.variation},
          {"max_deviation", e.max_deviation},
          {"final_translation_error", e.final_translation_error},
          {"final_rotation_error", e.final_rotation_error},
          {"goals", goals},
          {"gripper", e.gripper},
          {"deviation", e.deviation},
          {"joints", detail::rows(e.joints)},
          {"poses", detail::rows(e.poses)},
          {"expert_poses", detail::rows(e.expert_poses)}};
}

inline EpisodeResult episode_from_json(const nlohmann::json& j) {
  try {
    EpisodeResult e;
    e.index = j.at("index").get<int>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.success = j.at("success").get<bool>();
    e.failure = env::failure_from_string(j.at("failure").get<std::string>());
    e.detail = j.value("detail", std::string());
    e.variation = j.value("variation", 0);
    e.max_deviation = j.at("max_deviation").get<double>();
    e.final_translation_error = j.value("final_translation_error", 0.0);
    e.final_rotation_error = j.value("final_rotation_error", 0.0);
    for (const auto& g : j.at("goals")) e.goals.push_back({g.at("pose").get<env::Pose7>(), g.at("gripper").get<int>()});
    e.gripper = j.at("gripper").get<std::vector<int>>();
    e.deviation = j.at("deviation").get<std::vector<double>>();
    const auto& jr = j.at("joints");
    const std::int64_t n = jr.empty() ? 0 : static_cast<std::int64_t>(jr[0].size());
    e.joints = detail::from_rows(jr, n);
    e.poses = detail::from_rows(j.at("poses"), 7);
    e.expert_poses = detail::from_rows(j.at("expert_poses"), 7);
    if (e.success != (e.failure == env::FailureReason::None)) throw FormatError("episode success flag inconsistent");
    if (e.poses.dim(0) != e.joints.dim(0)) throw FormatError("episode pose and joint rows differ");
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("episode record: ") + ex.what());
  }
}

inline nlohmann::json to_json(const env::Summary& s) {
  nlohmann::json reasons;
  for (auto r : {env::FailureReason::None, env::FailureReason::GoalMiss, env::FailureReason::ConstraintViolation,
                 env::FailureReason::IKFailure, env::FailureReason::LimitViolation}) {
    reasons[env::to_string(r)] = s.reasons[static_cast<std::size_t>(r)];
  }
  return {{"episodes", s.episodes},
          {"success_rate", s.success_rate},
          {"ik_error_rate", s.ik_error_rate},
          {"mean_deviation", s.mean_deviation},
          {"reasons", reasons}};
}

struct Report {
  nlohmann::json task;
  std::string controller;
  std::string goals;  // "oracle" or "nbp"
  std::uint64_t seed = 0;
  std::vector<EpisodeResult> episodes;
};

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : r.episodes) eps.push_back(to_json(e));
  nlohmann::json j = {{"task", r.task}, {"controller", r.controller}, {"goals", r.goals}, {"seed", r.seed},
                      {"episodes", eps}};
  if (!r.episodes.empty()) j["summary"] = to_json(env::evaluate(r.episodes));
  return j;
}

inline void save_report(const std::string& path, const Report& r) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write report " + path);
  f << to_json(r).dump() << '\n';
}

inline Report load_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open report " + path);
  try {
    const auto j = nlohmann::json::parse(f);
    Report r;
    r.task = j.at("task");
    r.controller = j.at("controller").get<std::string>();
    r.goals = j.at("goals").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("episodes")) r.episodes.push_back(episode_from_json(e));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report " + path + ": " + e.what());
  }
}

/// Two-number cells "success / IK error" in percent, one row per report.
inline std::string summary_table(const std::vector<std::pair<std::string, env::Summary>>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(36) << "run" << std::right << std::setw(10) << "episodes" << std::setw(18)
    << "success / IK err" << std::setw(14) << "mean dev (m)" << '\n';
  for (const auto& [name, s] : rows) {
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(1) << 100.0 * s.success_rate << " / " << 100.0 * s.ik_error_rate;
    o << std::left << std::setw(36) << name << std::right << std::setw(10) << s.episodes << std::setw(18) << cell.str()
      << std::setw(14) << std::setprecision(4) << std::fixed << s.mean_deviation << '\n';
  }
  return o.str();
}

/// One row per executed step: t, pose, then the joints.
inline std::string episode_csv(const EpisodeResult& e) {
  std::ostringstream o;
  o << std::setprecision(std::numeric_limits<double>::max_digits10);
  o << "t,x,y,z,qw,qx,qy,qz";
  const std::int64_t n = e.joints.rank() == 2 ? e.joints.dim(1) : 0;
  for (std::int64_t j = 0; j < n; ++j) o << ",j" << j;
  o << '\n';
  for (std::int64_t r = 0; r < e.poses.dim(0); ++r) {
    o << r;
    for (int k = 0; k < 7; ++k) o << ',' << e.poses[r * 7 + k];
    for (std::int64_t j = 0; j < n; ++j) o << ',' << e.joints[r * n + j];
    o << '\n';
  }
  return o.str();
}

/// Translation paths projected on the arm plane: expert in one stroke,
/// executed (generated) in another, one panel row per episode overlayed.
inline std::string episodes_svg(const std::vector<EpisodeResult>& eps, double x0 = -0.1, double x1 = 1.0,
                                double y0 = -0.55, double y1 = 0.55, int px = 600) {
  const double scale = px / (x1 - x0);
  const int py = static_cast<int>(std::lround((y1 - y0) * scale));
  auto sx = [&](double x) { return (x - x0) * scale; };
  auto sy = [&](double y) { return (y1 - y) * scale; };
  auto polyline = [&](const TensorD& poses, const char* colour, double width, double opacity) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2);
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"" << width << "\" stroke-opacity=\""
      << opacity << "\" points=\"";
    for (std::int64_t r = 0; r < poses.dim(0); ++r) o << sx(poses[r * 7]) << ',' << sy(poses[r * 7 + 1]) << ' ';
    o << "\"/>\n";
    return o.str();
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px << "\" height=\"" << py << "\" viewBox=\"0 0 " << px
    << ' ' << py << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<circle cx=\"" << sx(0) << "\" cy=\"" << sy(0) << "\" r=\"4\" fill=\"black\"/>\n";
  for (const auto& e : eps) {
    if (e.expert_poses.rank() == 2 && e.expert_poses.dim(0) > 0) o << polyline(e.expert_poses, "#d95f02", 1.5, 0.6);
  }
  for (const auto& e : eps) {
    if (e.poses.rank() == 2 && e.poses.dim(0) > 0) o << polyline(e.poses, e.success ? "#1f5fbf" : "#b00020", 1.5, 0.8);
  }
  o << "<text x=\"8\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#d95f02\">expert</text>\n";
  o << "<text x=\"8\" y=\"32\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f5fbf\">generated</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace hdp::report
