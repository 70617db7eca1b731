// clface: plan / train / eval / ablate for the continual-learning pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 training error,
// 4 evaluation error.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clface/checkpoint.hpp"
#include "clface/config.hpp"
#include "clface/errors.hpp"
#include "clface/runio.hpp"
#include "clface/svgplot.hpp"

namespace fs = std::filesystem;
using namespace clface;

namespace {

std::string join_args(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

fs::path run_root() {
  if (const char* env = std::getenv("CLFACE_RUN_ROOT")) return fs::path(env);
  return fs::path("runs");
}

void apply_overrides(Config& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) cfg.apply_override(kv);
}

void print_breakdown_line(const LedgerRow& r) {
  std::printf("step %d epoch %3d  msfd=%-10.4g gpkd=%-10.4g ckd=%-10.4g", r.step,
              r.epoch, r.losses.msfd, r.losses.gpkd, r.losses.ckd);
  if (r.losses.id.has_value()) std::printf(" id=%-10.4g", *r.losses.id);
  std::printf(" total=%-10.4g lr=%g\n", r.losses.total, r.lr);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

int cmd_plan(const std::string& config_path, const std::string& out_path,
             int steps_override, double base_fraction_override,
             long long seed_override, const std::vector<std::string>& overrides) {
  Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
  apply_overrides(cfg, overrides);
  if (steps_override >= 0) cfg.steps = steps_override;
  if (base_fraction_override > 0.0) cfg.base_fraction = base_fraction_override;
  if (seed_override >= 0) {
    cfg.plan_seed = static_cast<uint64_t>(seed_override);
    cfg.dataset.seed = static_cast<uint64_t>(seed_override);
  }

  const IdentityDataset data = synth_identities(cfg.dataset);
  const StepPlan plan = make_step_plan(data, cfg.base_fraction, cfg.steps,
                                       cfg.plan_seed, cfg.allow_overlap);
  save_plan(plan, cfg.dataset, out_path);

  std::printf("plan written to %s\n", out_path.c_str());
  std::printf("  identities: %zu   base: %zu (fraction %.3g)\n",
              data.identity_ids.size(), plan.base_identities.size(),
              plan.base_fraction);
  for (size_t t = 0; t < plan.step_identity_sets.size(); ++t) {
    std::printf("  step %zu: %zu identities\n", t + 1,
                plan.step_identity_sets[t].size());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& plan_path, const std::string& config_path,
              std::string run_dir, const std::string& mode,
              long long seed_override, bool resume,
              const std::vector<std::string>& overrides,
              const std::string& command_line) {
  Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
  apply_overrides(cfg, overrides);
  if (!mode.empty()) cfg.train.mode = parse_mode(mode);
  if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);

  auto [plan, dataset_params] = load_plan(plan_path);
  cfg.dataset = dataset_params;  // the plan owns the data definition

  if (run_dir.empty()) {
    run_dir = (run_root() / (mode_name(cfg.train.mode) + "-seed" +
                             std::to_string(cfg.train.seed)))
                  .string();
  }
  std::printf("run directory: %s\n", run_dir.c_str());

  const ExecuteResult result =
      execute_run(run_dir, cfg, plan, command_line, resume);

  for (const LedgerRow& r : result.ledger.rows) print_breakdown_line(r);
  std::printf("checkpoints: %zu  (", result.steps.size());
  for (size_t i = 0; i < result.steps.size(); ++i) {
    std::printf("%s%d", i ? ", " : "", result.steps[i]);
  }
  std::printf(")\n");
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct RunEvaluation {
  std::vector<EvalReport> reports;
  std::vector<int> steps;
};

RunEvaluation evaluate_run_dir(const fs::path& run_dir, const Config& cfg,
                               const StepPlan& plan) {
  RunPaths paths{run_dir};

  const int expected = cfg.train.mode == TrainMode::joint ? 0 : plan.step_count;
  std::vector<int> missing, present;
  for (int t = 0; t <= expected; ++t) {
    if (fs::exists(paths.checkpoint(t))) present.push_back(t);
    else missing.push_back(t);
  }
  if (!missing.empty()) {
    std::string msg = "missing checkpoints in " + run_dir.string() + ":";
    for (int t : missing) msg += " step_" + std::to_string(t);
    throw EvalError(msg);
  }

  const std::vector<EvalSuite> suites = cfg.build_suites();
  const EvalOptions options = cfg.eval_options();

  RunEvaluation out;
  for (int t : present) {
    ModelSnapshot model = load_checkpoint(paths.checkpoint(t).string());
    if (!model.frozen()) model.freeze();
    const auto reports = evaluate_step(model, suites, t, options);
    out.reports.insert(out.reports.end(), reports.begin(), reports.end());
  }
  out.steps = present;
  return out;
}

int cmd_eval(const std::string& run_dir, const std::string& config_path,
             bool plot, const std::string& compare_dir,
             const std::vector<std::string>& overrides) {
  RunPaths paths{fs::path(run_dir)};
  if (!fs::exists(paths.config()))
    throw ConfigError("no config.json in run dir " + run_dir);
  Config cfg = Config::load(
      config_path.empty() ? paths.config().string() : config_path);
  apply_overrides(cfg, overrides);
  auto [plan, dataset_params] = load_plan(paths.plan().string());
  cfg.dataset = dataset_params;

  const RunEvaluation mine = evaluate_run_dir(run_dir, cfg, plan);
  write_reports_csv(paths.reports_csv(), mine.reports);
  write_reports_json(paths.reports_json(), mine.reports);

  std::printf("%-6s %-16s %-14s %s\n", "step", "suite", "va_mean", "va_std");
  for (const EvalReport& r : mine.reports) {
    std::printf("%-6d %-16s %-14.6f %.6f\n", r.step_index, r.suite.c_str(),
                r.va_mean, r.va_std);
  }
  std::printf("reports: %s\n", paths.reports_csv().c_str());

  if (plot || !compare_dir.empty()) {
    std::map<std::string, std::vector<PlotSeries>> by_suite;
    auto add_series = [&](const std::vector<EvalReport>& reports,
                          const std::string& label) {
      std::map<std::string, PlotSeries> series;
      for (const EvalReport& r : reports) {
        auto& s = series[r.suite];
        s.label = label;
        s.points.emplace_back(r.step_index, r.va_mean);
      }
      for (auto& [suite, s] : series) {
        std::sort(s.points.begin(), s.points.end());
        by_suite[suite].push_back(std::move(s));
      }
    };
    add_series(mine.reports, fs::path(run_dir).filename().string());

    if (!compare_dir.empty()) {
      RunPaths other{fs::path(compare_dir)};
      std::vector<EvalReport> other_reports;
      if (fs::exists(other.reports_json())) {
        other_reports = load_reports_json(other.reports_json());
      } else {
        if (!fs::exists(other.config()))
          throw ConfigError("no config.json in compare dir " + compare_dir);
        Config other_cfg = Config::load(other.config().string());
        auto [other_plan, other_data] = load_plan(other.plan().string());
        other_cfg.dataset = other_data;
        other_reports = evaluate_run_dir(compare_dir, other_cfg, other_plan).reports;
      }
      add_series(other_reports, fs::path(compare_dir).filename().string());
    }

    for (const auto& [suite, series] : by_suite) {
      const fs::path img = fs::path(run_dir) / ("plot_" + suite + ".svg");
      write_svg_line_chart(img.string(), "verification accuracy: " + suite,
                           "step", "VA", series);
      std::printf("plot: %s\n", img.c_str());
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string name;
  std::vector<std::string> overrides;
  double base_fraction = -1.0;  // <0: use the plan's fraction
};

std::vector<AblationCell> parse_ablation_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open ablation spec: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse ablation spec: " + std::string(e.what()));
  }

  std::vector<AblationCell> cells;
  if (j.contains("loss_masks")) {
    for (const auto& mask : j.at("loss_masks")) {
      if (mask.size() != 3) throw ConfigError("loss mask needs 3 flags");
      AblationCell cell;
      const bool msfd = mask.at(0).get<bool>();
      const bool gpkd = mask.at(1).get<bool>();
      const bool ckd = mask.at(2).get<bool>();
      cell.name = "mask";
      if (msfd) cell.name += "_msfd";
      if (gpkd) cell.name += "_gpkd";
      if (ckd) cell.name += "_ckd";
      if (!msfd) cell.overrides.push_back("loss.lambda1=0");
      if (!gpkd) cell.overrides.push_back("loss.lambda2=0");
      if (!ckd) cell.overrides.push_back("loss.lambda3=0");
      cells.push_back(std::move(cell));
    }
  }
  if (j.contains("base_fractions")) {
    for (const auto& f : j.at("base_fractions")) {
      AblationCell cell;
      const double frac = f.get<double>();
      char buf[32];
      std::snprintf(buf, sizeof(buf), "base_%g", frac);
      cell.name = buf;
      cell.base_fraction = frac;
      cells.push_back(std::move(cell));
    }
  }
  if (j.contains("id_loss")) {
    for (const auto& flag : j.at("id_loss")) {
      AblationCell cell;
      cell.name = flag.get<bool>() ? "with_id" : "without_id";
      cell.overrides.push_back(std::string("loss.include_id_loss=") +
                               (flag.get<bool>() ? "true" : "false"));
      cells.push_back(std::move(cell));
    }
  }
  if (j.contains("cells")) {
    for (const auto& c : j.at("cells")) {
      AblationCell cell;
      cell.name = c.at("name").get<std::string>();
      if (c.contains("overrides")) {
        for (const auto& [k, v] : c.at("overrides").items()) {
          cell.overrides.push_back(
              k + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
        }
      }
      if (c.contains("base_fraction")) {
        cell.base_fraction = c.at("base_fraction").get<double>();
      }
      cells.push_back(std::move(cell));
    }
  }

  std::set<std::string> names;
  for (const auto& c : cells) {
    if (!names.insert(c.name).second) {
      throw ConfigError("conflicting ablation cells named '" + c.name + "'");
    }
  }
  return cells;
}

// Fingerprint of everything that shapes the base checkpoint.
std::string base_config_key(const Config& cfg, const StepPlan& plan) {
  const nlohmann::json full = cfg.to_json();
  nlohmann::json j;
  j["dataset"] = full.at("dataset");
  j["model"] = full.at("model");
  j["base_fraction"] = plan.base_fraction;
  j["plan_seed"] = plan.seed;
  j["base_epochs"] = cfg.train.base_epochs;
  j["batch_size"] = cfg.train.batch_size;
  j["lr_base"] = cfg.train.lr_base;
  j["seed"] = cfg.train.seed;
  const std::string text = j.dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return hash_hex(h);
}

int cmd_ablate(const std::string& plan_path, const std::string& config_path,
               const std::string& spec_path, std::string out_root,
               const std::vector<std::string>& overrides,
               const std::string& command_line) {
  Config base_cfg = config_path.empty() ? Config{} : Config::load(config_path);
  apply_overrides(base_cfg, overrides);
  auto [plan, dataset_params] = load_plan(plan_path);
  base_cfg.dataset = dataset_params;

  const std::vector<AblationCell> cells = parse_ablation_spec(spec_path);
  if (cells.empty()) {
    std::printf("warning: ablation spec defines no cells; nothing to do\n");
    return 0;
  }
  if (out_root.empty()) out_root = (run_root() / "ablate").string();

  const IdentityDataset data = synth_identities(base_cfg.dataset);

  // step_0000.ckpt per distinct base configuration, shared across cells.
  std::map<std::string, fs::path> base_cache;

  struct CellResult {
    std::string name;
    std::map<std::string, double> final_va;  // suite -> VA after the last step
  };
  std::vector<CellResult> results;

  for (const AblationCell& cell : cells) {
    Config cfg = base_cfg;
    apply_overrides(cfg, cell.overrides);
    StepPlan cell_plan = plan;
    if (cell.base_fraction > 0.0 && cell.base_fraction != plan.base_fraction) {
      cell_plan = make_step_plan(data, cell.base_fraction, plan.step_count,
                                 plan.seed, plan.allow_overlap);
    }

    const fs::path run_dir = fs::path(out_root) / cell.name;
    fs::create_directories(run_dir);
    RunPaths paths{run_dir};

    const std::string key = base_config_key(cfg, cell_plan);
    const auto cached = base_cache.find(key);
    if (cached != base_cache.end()) {
      fs::copy_file(cached->second, paths.checkpoint(0),
                    fs::copy_options::overwrite_existing);
      std::printf("[%s] reusing base checkpoint (%s)\n", cell.name.c_str(),
                  key.c_str());
    }

    std::printf("[%s] training\n", cell.name.c_str());
    execute_run(run_dir, cfg, cell_plan, command_line, /*resume=*/true);
    base_cache.emplace(key, paths.checkpoint(0));

    const RunEvaluation ev = evaluate_run_dir(run_dir, cfg, cell_plan);
    write_reports_csv(paths.reports_csv(), ev.reports);
    write_reports_json(paths.reports_json(), ev.reports);

    CellResult res;
    res.name = cell.name;
    const int last = ev.steps.back();
    for (const EvalReport& r : ev.reports) {
      if (r.step_index == last) res.final_va[r.suite] = r.va_mean;
    }
    results.push_back(std::move(res));
  }

  // Summary table: one row per cell, one column per suite.
  std::set<std::string> suite_names;
  for (const auto& r : results) {
    for (const auto& [s, v] : r.final_va) suite_names.insert(s);
  }
  std::printf("\n%-24s", "cell");
  for (const auto& s : suite_names) std::printf(" %-16s", s.c_str());
  std::printf("\n");
  std::string csv = "cell";
  for (const auto& s : suite_names) csv += "," + s;
  csv += "\n";
  for (const auto& r : results) {
    std::printf("%-24s", r.name.c_str());
    csv += r.name;
    for (const auto& s : suite_names) {
      const auto it = r.final_va.find(s);
      if (it != r.final_va.end()) {
        std::printf(" %-16.6f", it->second);
        csv += "," + std::to_string(it->second);
      } else {
        std::printf(" %-16s", "-");
        csv += ",";
      }
    }
    std::printf("\n");
    csv += "\n";
  }
  std::ofstream summary(fs::path(out_root) / "ablate_summary.csv");
  summary << csv;
  std::printf("summary: %s\n",
              (fs::path(out_root) / "ablate_summary.csv").c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual face-embedding learning: plan, train, evaluate, ablate"};
  app.require_subcommand(1);
  const std::string command_line = join_args(argc, argv);

  // plan
  auto* plan_cmd = app.add_subcommand("plan", "build a base/incremental identity split");
  std::string plan_config, plan_out = "plan.json";
  int plan_steps = -1;
  double plan_fraction = -1.0;
  long long plan_seed = -1;
  std::vector<std::string> plan_overrides;
  plan_cmd->add_option("--config", plan_config, "config file (JSON)");
  plan_cmd->add_option("--out", plan_out, "output plan manifest");
  plan_cmd->add_option("--steps", plan_steps, "incremental step count");
  plan_cmd->add_option("--base-fraction", plan_fraction, "base identity fraction");
  plan_cmd->add_option("--seed", plan_seed, "plan + dataset seed");
  plan_cmd->add_option("overrides", plan_overrides, "dotted config overrides (key=value)");

  // train
  auto* train_cmd = app.add_subcommand("train", "execute a training run");
  std::string train_plan, train_config, train_run_dir, train_mode;
  long long train_seed = -1;
  bool train_resume = false;
  std::vector<std::string> train_overrides;
  train_cmd->add_option("--plan", train_plan, "plan manifest")->required();
  train_cmd->add_option("--config", train_config, "config file (JSON)");
  train_cmd->add_option("--run-dir", train_run_dir, "run directory");
  train_cmd->add_option("--mode", train_mode,
                        "clface|finetune|joint|feature_extract");
  train_cmd->add_option("--seed", train_seed, "training seed");
  train_cmd->add_flag("--resume", train_resume,
                      "resume at the first missing checkpoint");
  train_cmd->add_option("overrides", train_overrides, "dotted config overrides");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate the checkpoints of a run");
  std::string eval_run_dir, eval_config, eval_compare;
  bool eval_plot = false;
  std::vector<std::string> eval_overrides;
  eval_cmd->add_option("--run-dir", eval_run_dir, "run directory")->required();
  eval_cmd->add_option("--config", eval_config, "override the stored config");
  eval_cmd->add_flag("--plot", eval_plot, "emit accuracy-vs-step SVG charts");
  eval_cmd->add_option("--compare", eval_compare, "second run directory to overlay");
  eval_cmd->add_option("overrides", eval_overrides, "dotted config overrides");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  std::string ablate_plan, ablate_config, ablate_spec, ablate_out;
  std::vector<std::string> ablate_overrides;
  ablate_cmd->add_option("--plan", ablate_plan, "plan manifest")->required();
  ablate_cmd->add_option("--config", ablate_config, "config file (JSON)");
  ablate_cmd->add_option("--spec", ablate_spec, "ablation grid spec (JSON)")->required();
  ablate_cmd->add_option("--out-root", ablate_out, "directory for the grid's runs");
  ablate_cmd->add_option("overrides", ablate_overrides, "dotted config overrides");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*plan_cmd) {
      return cmd_plan(plan_config, plan_out, plan_steps, plan_fraction,
                      plan_seed, plan_overrides);
    }
    if (*train_cmd) {
      return cmd_train(train_plan, train_config, train_run_dir, train_mode,
                       train_seed, train_resume, train_overrides, command_line);
    }
    if (*eval_cmd) {
      return cmd_eval(eval_run_dir, eval_config, eval_plot, eval_compare,
                      eval_overrides);
    }
    if (*ablate_cmd) {
      return cmd_ablate(ablate_plan, ablate_config, ablate_spec, ablate_out,
                        ablate_overrides, command_line);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 3;
  } catch (const EvalError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
