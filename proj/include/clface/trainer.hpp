#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clface/data.hpp"
#include "clface/losses.hpp"
#include "clface/model.hpp"

namespace clface {

enum class TrainMode { clface, finetune, joint, feature_extract };
TrainMode parse_mode(const std::string& name);
std::string mode_name(TrainMode mode);

struct TrainConfig {
  int base_epochs = 20;
  int incr_epochs = 10;
  int batch_size = 256;
  double lr_base = 0.1;
  double lr_incr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Base schedule: lr divided by 10 after the 6th and 12th epochs.
  std::vector<int> base_lr_drop_epochs{6, 12};
  double base_lr_drop_factor = 0.1;
  // Incremental schedule: exponential decay, lr * gamma^(epoch-1).
  double incr_lr_gamma = 0.9;
  double grad_clip = 0.0;  // global norm; 0 disables
  uint64_t seed = 1;
  TrainMode mode = TrainMode::clface;
  double head_scale = 64.0;
  double head_margin = 0.5;

  void validate() const;
  double base_lr_at(int epoch) const;  // 1-indexed
  double incr_lr_at(int epoch) const;
};

struct LedgerRow {
  int step = 0;
  int epoch = 0;
  LossBreakdown losses;
  double lr = 0.0;
  double wall_clock = 0.0;  // seconds since run start, excluded from replay checks
};

struct CheckpointRecord {
  int step = 0;
  uint64_t content_hash = 0;
  uint64_t teacher_hash = 0;  // 0 for the base model
  std::string file;           // empty for in-memory runs
};

struct RunLedger {
  std::vector<LedgerRow> rows;
  std::vector<CheckpointRecord> checkpoints;
  // Loss breakdown of the first batch of each incremental step, evaluated
  // before any update (student == teacher at that point).
  std::map<int, LossBreakdown> first_batch_per_step;
  uint64_t seed = 0;
  std::string config_hash;
  double wall_clock_total = 0.0;
};

/// Supervised margin-loss training of the base model; the classification
/// head is discarded afterwards and the snapshot is returned frozen.
ModelSnapshot train_base(const IdentityDataset& data,
                         const std::vector<int>& identities,
                         const BackboneSpec& spec, const TrainConfig& config,
                         RunLedger* ledger = nullptr, int ledger_step = 0,
                         uint64_t seed_salt = 0);

/// One distillation-only incremental step: the student starts as a clone of
/// the frozen teacher and minimizes the weighted distillation objective on
/// unique-identity batches. Only the student is updated.
ModelSnapshot train_incremental_step(const ModelSnapshot& teacher,
                                     const IdentityDataset& data,
                                     const std::vector<int>& step_identities,
                                     const TrainConfig& config,
                                     const LossConfig& loss_config,
                                     RunLedger* ledger = nullptr);

/// Margin-loss-only update on new data (the catastrophic-forgetting lower
/// bound). The per-step head sees only this step's identities.
ModelSnapshot finetune_step(const ModelSnapshot& teacher,
                            const IdentityDataset& data,
                            const std::vector<int>& step_identities,
                            const TrainConfig& config,
                            RunLedger* ledger = nullptr);

/// Margin training on the union of base and step identities (upper bound).
ModelSnapshot run_baseline_joint(const IdentityDataset& data,
                                 const StepPlan& plan, const BackboneSpec& spec,
                                 const TrainConfig& config,
                                 RunLedger* ledger = nullptr);

struct RunHooks {
  // Called with every frozen checkpoint (base and per step).
  std::function<void(int step, const ModelSnapshot&)> on_checkpoint;
  // Evaluation hook, called after every completed step.
  std::function<void(int step, const ModelSnapshot&)> after_step;
  // Streaming ledger rows (persistence).
  std::function<void(const LedgerRow&)> on_epoch;
};

struct ResumeState {
  int next_step = 0;  // 0 = fresh run (train the base)
  std::optional<ModelSnapshot> last_checkpoint;
  RunLedger ledger;  // rows and checkpoints of completed steps
};

/// Executes the full lifelong schedule for any mode: base model first, then
/// one model per incremental step, each becoming the next teacher.
RunLedger run_lifelong(const IdentityDataset& data, const StepPlan& plan,
                       const BackboneSpec& spec, const TrainConfig& config,
                       const LossConfig& loss_config, const RunHooks& hooks = {},
                       const ResumeState& resume = {});

}  // namespace clface
