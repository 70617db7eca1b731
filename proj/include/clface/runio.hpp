#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clface/config.hpp"
#include "clface/data.hpp"
#include "clface/eval.hpp"
#include "clface/trainer.hpp"

namespace clface {

// Run directory layout:
//   config.json      full config snapshot (replayable)
//   plan.json        the step plan the run executed
//   manifest.json    seed, mode, config hash, command line, timestamps,
//                    per-step checkpoint hashes and teacher linkage,
//                    first-batch loss breakdowns
//   step_0000.ckpt.. one checkpoint per completed step
//   ledger.csv       step,epoch,msfd,gpkd,ckd,id,total,lr,wall_clock
//   reports.csv/.json  written by evaluation
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path plan() const { return dir / "plan.json"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path ledger() const { return dir / "ledger.csv"; }
  std::filesystem::path checkpoint(int step) const;
  std::filesystem::path reports_csv() const { return dir / "reports.csv"; }
  std::filesystem::path reports_json() const { return dir / "reports.json"; }
};

nlohmann::json plan_to_json(const StepPlan& plan);
StepPlan plan_from_json(const nlohmann::json& j);
void save_plan(const StepPlan& plan, const SynthParams& dataset_params,
               const std::string& path);
// Returns the plan plus the dataset generator parameters stored with it.
std::pair<StepPlan, SynthParams> load_plan(const std::string& path);

void append_ledger_row(const std::filesystem::path& path, const LedgerRow& row);
std::vector<LedgerRow> load_ledger_csv(const std::filesystem::path& path);
void rewrite_ledger(const std::filesystem::path& path,
                    const std::vector<LedgerRow>& rows);

void write_reports_csv(const std::filesystem::path& path,
                       const std::vector<EvalReport>& reports);
void write_reports_json(const std::filesystem::path& path,
                        const std::vector<EvalReport>& reports);
std::vector<EvalReport> load_reports_json(const std::filesystem::path& path);

struct ExecuteResult {
  RunLedger ledger;
  std::vector<int> steps;  // checkpoint step indices, in order
};

/// Runs (or resumes) a full training run inside `run_dir`, persisting the
/// manifest, checkpoints and the streaming ledger. With resume=true, training
/// re-enters the schedule at the first missing or invalid checkpoint; a
/// completed run is a no-op.
ExecuteResult execute_run(const std::filesystem::path& run_dir,
                          const Config& config, const StepPlan& plan,
                          const std::string& command_line, bool resume);

}  // namespace clface
