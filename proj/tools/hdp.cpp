#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hdp/checks.hpp"
#include "hdp/pipeline.hpp"
#include "hdp/report.hpp"

#ifndef HDP_CONFIG_DIR
#define HDP_CONFIG_DIR "configs"
#endif

using namespace hdp;

namespace {

/// Bad user input detected after parsing; exits with status 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << text;
  if (!f) throw FormatError("write failed for " + path);
}

template <class T>
void override_if(const CLI::Option* opt, T& dst, const T& v) {
  if (opt && opt->count() > 0) dst = v;
}

struct Common {
  std::string config_dir = HDP_CONFIG_DIR;
  bool quiet = false;
};

pipeline::TaskBundle task_arg(const std::string& spec, const Common& c) {
  const bool named = std::filesystem::exists(std::filesystem::path(c.config_dir) / (spec + ".json"));
  if (!std::filesystem::exists(spec) && !named) {
    try {
      env::task_kind_from_string(spec);
    } catch (const std::exception&) {
      throw UsageError("unknown task '" + spec + "' (not a file or task name)");
    }
  }
  return pipeline::resolve_task(spec, c.config_dir);
}

// ------------------------------------------------------------- gen-demos

struct GenDemos {
  std::string task, out;
  int count = 0;
  std::uint64_t seed = 0;
};

int gen_demos(const GenDemos& a, const Common& c) {
  if (a.count < 1) throw UsageError("--count must be positive");
  const auto b = task_arg(a.task, c);
  const auto demos = pipeline::generate_demos(b.task, a.count, a.seed);
  data::save_demos(a.out, demos);
  if (!c.quiet) std::cerr << "wrote " << demos.size() << " " << env::to_string(b.task.kind) << " demos to " << a.out << '\n';
  return 0;
}

// ------------------------------------------------------------- train-rkd

struct TrainRKD {
  std::string data, out, task = "hinged_lid", config;
  int steps = 0, batch = 0, log_every = 0;
  double lr = 0;
  std::uint64_t seed = 0, model_seed = 0;
  const CLI::Option *o_steps = nullptr, *o_batch = nullptr, *o_lr = nullptr, *o_seed = nullptr,
                    *o_model_seed = nullptr, *o_log = nullptr;
};

int train_rkd_cmd(const TrainRKD& a, const Common& c) {
  const auto b = task_arg(a.task, c);
  rkd::RKDConfig cfg;
  rkd::TrainConfig tc;
  tc.log_every = 250;
  std::uint64_t model_seed = 7;
  if (!a.config.empty()) {
    const auto j = read_json(a.config);
    cfg = rkd::rkd_config_from_json(j.value("model", nlohmann::json::object()), cfg);
    const auto t = j.value("train", nlohmann::json::object());
    tc.steps = t.value("steps", tc.steps);
    tc.batch = t.value("batch", tc.batch);
    tc.lr = t.value("lr", tc.lr);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.grad_clip = t.value("grad_clip", tc.grad_clip);
    tc.warmup = t.value("warmup", tc.warmup);
    tc.seed = t.value("seed", tc.seed);
    model_seed = t.value("model_seed", model_seed);
  }
  override_if(a.o_steps, tc.steps, a.steps);
  override_if(a.o_batch, tc.batch, a.batch);
  override_if(a.o_lr, tc.lr, a.lr);
  override_if(a.o_seed, tc.seed, a.seed);
  override_if(a.o_model_seed, model_seed, a.model_seed);
  override_if(a.o_log, tc.log_every, a.log_every);
  if (tc.steps < 1 || tc.batch < 1 || !(tc.lr > 0)) throw UsageError("steps, batch and lr must be positive");
  if (c.quiet) tc.log_every = 0;
  const auto demos = data::load_demos(a.data, b.task.chain);
  if (demos.empty()) throw FormatError(a.data + " holds no demonstrations");
  const auto m = pipeline::train_rkd_on(demos, b.task.chain, cfg, tc, model_seed, &std::cerr);
  rkd::save_rkd(m, a.out);
  if (!c.quiet) std::cerr << "saved rkd model to " << a.out << '\n';
  return 0;
}

// ------------------------------------------------------------- train-nbp

struct TrainNBP {
  std::string data, out, task = "reach", config;
  int steps = 0, batch = 0, hidden = 0, log_every = 0;
  double lr = 0;
  bool no_token = false;
  std::uint64_t seed = 0, model_seed = 0;
  const CLI::Option *o_steps = nullptr, *o_batch = nullptr, *o_lr = nullptr, *o_seed = nullptr,
                    *o_model_seed = nullptr, *o_hidden = nullptr, *o_log = nullptr;
};

int train_nbp_cmd(const TrainNBP& a, const Common& c) {
  const auto b = task_arg(a.task, c);
  nbp::NBPConfig cfg;
  cfg.grid = b.grid;
  cfg.tokens = std::max(1, b.task.variations());
  nbp::TrainConfig tc;
  tc.log_every = 100;
  std::uint64_t model_seed = 11;
  if (!a.config.empty()) {
    const auto j = read_json(a.config);
    if (j.contains("model")) cfg = nbp::nbp_config_from_json(j["model"], cfg);
    const auto t = j.value("train", nlohmann::json::object());
    tc.steps = t.value("steps", tc.steps);
    tc.batch = t.value("batch", tc.batch);
    tc.lr = t.value("lr", tc.lr);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.grad_clip = t.value("grad_clip", tc.grad_clip);
    tc.max_jitter = t.value("max_jitter", tc.max_jitter);
    tc.seed = t.value("seed", tc.seed);
    model_seed = t.value("model_seed", model_seed);
  }
  override_if(a.o_steps, tc.steps, a.steps);
  override_if(a.o_batch, tc.batch, a.batch);
  override_if(a.o_lr, tc.lr, a.lr);
  override_if(a.o_seed, tc.seed, a.seed);
  override_if(a.o_model_seed, model_seed, a.model_seed);
  override_if(a.o_hidden, cfg.hidden, a.hidden);
  override_if(a.o_log, tc.log_every, a.log_every);
  if (a.no_token) cfg.use_token = false;
  if (tc.steps < 1 || tc.batch < 1 || !(tc.lr > 0)) throw UsageError("steps, batch and lr must be positive");
  if (c.quiet) tc.log_every = 0;
  const auto demos = data::load_demos(a.data, b.task.chain);
  if (demos.empty()) throw FormatError(a.data + " holds no demonstrations");
  const auto m = pipeline::train_nbp_on(b.task, demos, cfg, tc, model_seed, &std::cerr);
  nbp::save_nbp(m, a.out);
  if (!c.quiet) std::cerr << "saved nbp model to " << a.out << '\n';
  return 0;
}

// --------------------------------------------------------------- rollout

struct Rollout {
  std::string task, nbp, rkd, controller = "rkd", report;
  bool oracle = false;
  int episodes = 50, jobs = 1;
  double rank = 1.0;
  std::uint64_t seed = 0;
};

int rollout_cmd(const Rollout& a, const Common& c) {
  if (a.episodes < 1) throw UsageError("--episodes must be positive");
  if (a.jobs < 1) throw UsageError("--jobs must be positive");
  if (a.oracle == !a.nbp.empty()) throw UsageError("give exactly one of --oracle and --nbp");
  env::ControllerKind kind;
  try {
    kind = env::controller_from_string(a.controller);
  } catch (const std::exception&) {
    throw UsageError("unknown controller '" + a.controller + "'");
  }
  if (kind != env::ControllerKind::Line && a.rkd.empty()) throw UsageError("--rkd is required for this controller");
  const auto b = task_arg(a.task, c);
  std::optional<rkd::RKDModel> low;
  if (!a.rkd.empty()) low.emplace(rkd::load_rkd(a.rkd));
  if (low && low->chain().dof() != b.task.chain.dof()) throw FormatError("rkd model and task chain disagree on dof");
  std::optional<nbp::NBPModel> high;
  env::GoalPolicy policy;
  if (!a.nbp.empty()) {
    high.emplace(nbp::load_nbp(a.nbp));
    policy = pipeline::nbp_policy(*high);
  }
  env::Controller ctl;
  ctl.kind = kind;
  ctl.model = low ? &*low : nullptr;
  ctl.rank = a.rank;
  report::Report r;
  r.task = b.doc;
  r.controller = env::to_string(kind);
  r.goals = high ? "nbp" : "oracle";
  r.seed = a.seed;
  r.episodes = env::run_episodes(b.task, ctl, high ? &policy : nullptr, a.seed, a.episodes, a.jobs);
  report::save_report(a.report, r);
  if (!c.quiet) {
    std::cout << report::summary_table({{std::string(env::to_string(b.task.kind)) + " " + r.controller + " (" + r.goals + ")",
                                         env::evaluate(r.episodes)}});
  }
  return 0;
}

// ------------------------------------------------------------------ eval

int eval_cmd(const std::vector<std::string>& reports, bool reasons) {
  std::vector<std::pair<std::string, env::Summary>> rows;
  std::vector<env::Summary> sums;
  for (const auto& path : reports) {
    const auto r = report::load_report(path);
    if (r.episodes.empty()) throw FormatError(path + " holds no episodes");
    const auto s = env::evaluate(r.episodes);
    rows.push_back({r.task.value("task", std::string("?")) + " " + r.controller + " (" + r.goals + ")", s});
    sums.push_back(s);
  }
  std::cout << report::summary_table(rows);
  if (reasons) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::cout << rows[i].first << ':';
      const auto reasons = report::to_json(sums[i])["reasons"];
      for (const auto& [k, v] : reasons.items()) std::cout << ' ' << k << '=' << v;
      std::cout << '\n';
    }
  }
  return 0;
}

// ----------------------------------------------------------- export-traj

struct Export {
  std::string report, format = "csv", out;
  int episode = 0;
  bool all = false;
};

int export_cmd(const Export& a) {
  const auto r = report::load_report(a.report);
  if (r.episodes.empty()) throw FormatError(a.report + " holds no episodes");
  std::vector<env::EpisodeResult> chosen;
  if (a.all) {
    chosen = r.episodes;
  } else {
    const auto it = std::find_if(r.episodes.begin(), r.episodes.end(), [&](const auto& e) { return e.index == a.episode; });
    if (it == r.episodes.end()) throw UsageError("episode " + std::to_string(a.episode) + " not in report");
    chosen.push_back(*it);
  }
  if (a.format == "csv") {
    if (chosen.size() != 1) throw UsageError("csv export takes a single episode");
    write_text(a.out, report::episode_csv(chosen.front()));
  } else if (a.format == "svg") {
    write_text(a.out, report::episodes_svg(chosen));
  } else {
    throw UsageError("unknown format '" + a.format + "'");
  }
  return 0;
}

// ------------------------------------------------------------- gradcheck

int gradcheck_cmd(std::uint64_t seed) {
  bool ok = true;
  for (const auto& s : checks::run_all(seed)) {
    std::cout << (s.passed() ? "PASS " : "FAIL ") << s.name << ": " << s.cases << " cases, " << s.failures
              << " failures, max rel error " << s.max_rel_error << " (tol " << s.tolerance << "), " << s.seconds
              << " s\n";
    ok = ok && s.passed();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical keyframe and kinematics-aware trajectory diffusion toolkit"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config-dir", common.config_dir, "Directory searched for named task configs");
  app.add_flag("-q,--quiet", common.quiet, "Suppress progress output");

  GenDemos gd;
  auto* s_gen = app.add_subcommand("gen-demos", "Generate expert demonstrations (JSON lines)");
  s_gen->add_option("--task", gd.task, "Task name or config path")->required();
  s_gen->add_option("--count", gd.count, "Number of demos")->required();
  s_gen->add_option("--out", gd.out, "Output file")->required();
  s_gen->add_option("--seed", gd.seed, "Generator seed");

  TrainRKD tr;
  auto* s_rkd = app.add_subcommand("train-rkd", "Train the low-level trajectory model");
  s_rkd->add_option("--data", tr.data, "Demo file")->required();
  s_rkd->add_option("--out", tr.out, "Checkpoint path")->required();
  s_rkd->add_option("--task", tr.task, "Task name or config path (supplies the chain)");
  s_rkd->add_option("--config", tr.config, "JSON with optional 'model' and 'train' sections");
  tr.o_steps = s_rkd->add_option("--steps", tr.steps, "Optimizer steps");
  tr.o_batch = s_rkd->add_option("--batch", tr.batch, "Batch size");
  tr.o_lr = s_rkd->add_option("--lr", tr.lr, "Learning rate");
  tr.o_seed = s_rkd->add_option("--seed", tr.seed, "Training seed");
  tr.o_model_seed = s_rkd->add_option("--model-seed", tr.model_seed, "Initialization seed");
  tr.o_log = s_rkd->add_option("--log-every", tr.log_every, "Log interval in steps");

  TrainNBP tn;
  auto* s_nbp = app.add_subcommand("train-nbp", "Train the high-level keyframe model");
  s_nbp->add_option("--data", tn.data, "Demo file")->required();
  s_nbp->add_option("--out", tn.out, "Checkpoint path")->required();
  s_nbp->add_option("--task", tn.task, "Task name or config path (supplies the grid)");
  s_nbp->add_option("--config", tn.config, "JSON with optional 'model' and 'train' sections");
  s_nbp->add_flag("--no-token", tn.no_token, "Train without the task-variation token");
  tn.o_steps = s_nbp->add_option("--steps", tn.steps, "Optimizer steps");
  tn.o_batch = s_nbp->add_option("--batch", tn.batch, "Batch size");
  tn.o_lr = s_nbp->add_option("--lr", tn.lr, "Learning rate");
  tn.o_hidden = s_nbp->add_option("--hidden", tn.hidden, "Hidden width");
  tn.o_seed = s_nbp->add_option("--seed", tn.seed, "Training seed");
  tn.o_model_seed = s_nbp->add_option("--model-seed", tn.model_seed, "Initialization seed");
  tn.o_log = s_nbp->add_option("--log-every", tn.log_every, "Log interval in steps");

  Rollout ro;
  auto* s_roll = app.add_subcommand("rollout", "Run evaluation episodes and write a report");
  s_roll->add_option("--task", ro.task, "Task name or config path")->required();
  s_roll->add_option("--nbp", ro.nbp, "High-level checkpoint");
  s_roll->add_flag("--oracle", ro.oracle, "Use expert keyframes as goals");
  s_roll->add_option("--controller", ro.controller, "rkd | pose-ik | line");
  s_roll->add_option("--rkd", ro.rkd, "Low-level checkpoint");
  s_roll->add_option("--episodes", ro.episodes, "Episode count");
  s_roll->add_option("--report", ro.report, "Report path")->required();
  s_roll->add_option("--jobs", ro.jobs, "Worker threads");
  s_roll->add_option("--seed", ro.seed, "Run seed");
  s_roll->add_option("--rank", ro.rank, "Rank condition passed to the trajectory model");

  std::vector<std::string> eval_reports;
  bool eval_reasons = false;
  auto* s_eval = app.add_subcommand("eval", "Summarize reports as success / IK-error cells");
  s_eval->add_option("--report", eval_reports, "Report path(s)")->required();
  s_eval->add_flag("--reasons", eval_reasons, "Also list failure-reason counts");

  Export ex;
  auto* s_exp = app.add_subcommand("export-traj", "Export executed trajectories");
  s_exp->add_option("--report", ex.report, "Report path")->required();
  s_exp->add_option("--format", ex.format, "csv | svg")->check(CLI::IsMember({"csv", "svg"}));
  s_exp->add_option("--episode", ex.episode, "Episode index");
  s_exp->add_flag("--all", ex.all, "Every episode (svg)");
  s_exp->add_option("--out", ex.out, "Output file (stdout if omitted)");

  std::uint64_t gc_seed = 0;
  auto* s_gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");
  s_gc->add_option("--seed", gc_seed, "Suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*s_gen) return gen_demos(gd, common);
    if (*s_rkd) return train_rkd_cmd(tr, common);
    if (*s_nbp) return train_nbp_cmd(tn, common);
    if (*s_roll) return rollout_cmd(ro, common);
    if (*s_eval) return eval_cmd(eval_reports, eval_reasons);
    if (*s_exp) return export_cmd(ex);
    if (*s_gc) return gradcheck_cmd(gc_seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
