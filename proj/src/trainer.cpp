#include "clface/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <unordered_map>

#include "clface/errors.hpp"
#include "clface/rng.hpp"

namespace clface {

TrainMode parse_mode(const std::string& name) {
  if (name == "clface") return TrainMode::clface;
  if (name == "finetune") return TrainMode::finetune;
  if (name == "joint") return TrainMode::joint;
  if (name == "feature_extract") return TrainMode::feature_extract;
  throw ConfigError("unknown mode '" + name +
                    "' (expected clface|finetune|joint|feature_extract)");
}

std::string mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::clface: return "clface";
    case TrainMode::finetune: return "finetune";
    case TrainMode::joint: return "joint";
    case TrainMode::feature_extract: return "feature_extract";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (base_epochs < 1 || incr_epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (lr_base <= 0.0 || lr_incr <= 0.0) throw ConfigError("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (base_lr_drop_factor <= 0.0 || base_lr_drop_factor > 1.0) {
    throw ConfigError("lr drop factor must lie in (0, 1]");
  }
  if (incr_lr_gamma <= 0.0 || incr_lr_gamma > 1.0) {
    throw ConfigError("incremental lr gamma must lie in (0, 1]");
  }
  if (grad_clip < 0.0) throw ConfigError("grad clip must be nonnegative");
}

double TrainConfig::base_lr_at(int epoch) const {
  double lr = lr_base;
  for (int drop : base_lr_drop_epochs) {
    if (epoch > drop) lr *= base_lr_drop_factor;
  }
  return lr;
}

double TrainConfig::incr_lr_at(int epoch) const {
  return lr_incr * std::pow(incr_lr_gamma, epoch - 1);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// SGD with momentum and decoupled-from-nothing classic weight decay:
// v = mu*v + (g + wd*w); w -= lr*v.
void sgd_vec(Vec& w, const Vec& g, Vec& v, double lr, double momentum, double wd) {
  for (size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] + g[i] + wd * w[i];
    w[i] -= lr * v[i];
  }
}

struct SgdState {
  Parameters velocity;
  Vec head_velocity;
};

double grad_sq_norm(const Parameters& g, const Vec& head_grad) {
  double s = 0.0;
  for (const auto& [name, vec] : g.named()) {
    (void)name;
    for (double x : *vec) s += x * x;
  }
  for (double x : head_grad) s += x * x;
  return s;
}

void scale_grads(Parameters& g, Vec& head_grad, double scale) {
  for (auto& [name, vec] : g.named()) {
    (void)name;
    for (double& x : *vec) x *= scale;
  }
  for (double& x : head_grad) x *= scale;
}

void apply_update(ModelSnapshot& model, MarginHead* head, Parameters& grads,
                  Vec& head_grads, SgdState& state, double lr,
                  const TrainConfig& cfg) {
  if (cfg.grad_clip > 0.0) {
    const double norm = std::sqrt(grad_sq_norm(grads, head_grads));
    if (norm > cfg.grad_clip) scale_grads(grads, head_grads, cfg.grad_clip / norm);
  }
  Parameters& params = model.mutable_params();
  auto param_views = params.named();
  auto grad_views = grads.named();
  auto vel_views = state.velocity.named();
  for (size_t i = 0; i < param_views.size(); ++i) {
    sgd_vec(*param_views[i].second, *grad_views[i].second, *vel_views[i].second,
            lr, cfg.momentum, cfg.weight_decay);
  }
  if (head != nullptr) {
    sgd_vec(head->weight, head_grads, state.head_velocity, lr, cfg.momentum,
            cfg.weight_decay);
  }
}

void check_finite_loss(double loss, int step, int epoch, size_t batch) {
  if (!std::isfinite(loss)) {
    throw TrainError("non-finite loss at step " + std::to_string(step) +
                     " epoch " + std::to_string(epoch) + " batch " +
                     std::to_string(batch) +
                     "; the learning rate is probably too high");
  }
}

// Plain per-epoch shuffled batches (margin training does not need the
// unique-identity constraint); the final partial batch is kept.
std::vector<std::vector<int>> plain_batches(const std::vector<int>& sample_indices,
                                            int batch_size, uint64_t seed,
                                            int epoch) {
  std::vector<int> order = sample_indices;
  Rng rng(mix_seed(seed, 0x65706f63ULL ^ static_cast<uint64_t>(epoch)));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + i,
                         order.begin() + std::min(order.size(), i + batch_size));
  }
  return batches;
}

LossBreakdown average_breakdowns(const std::vector<LossBreakdown>& parts) {
  LossBreakdown avg;
  if (parts.empty()) return avg;
  bool has_id = false;
  double id_sum = 0.0;
  for (const auto& b : parts) {
    avg.msfd += b.msfd;
    avg.gpkd += b.gpkd;
    avg.ckd += b.ckd;
    avg.total += b.total;
    if (b.id.has_value()) {
      has_id = true;
      id_sum += *b.id;
    }
  }
  const double n = static_cast<double>(parts.size());
  avg.msfd /= n;
  avg.gpkd /= n;
  avg.ckd /= n;
  avg.total /= n;
  if (has_id) avg.id = id_sum / n;
  return avg;
}

// Shared margin-loss training loop (base, finetune steps, joint baseline).
// Trains in place; the caller decides step indices and freezing.
void train_margin_epochs(ModelSnapshot& model, const IdentityDataset& data,
                         const std::vector<int>& identities, int epochs,
                         bool base_schedule, const TrainConfig& cfg,
                         RunLedger* ledger, int ledger_step, uint64_t seed_salt,
                         Clock::time_point t0) {
  // Dense label remap over the identities this run classifies.
  std::vector<int> sorted_ids = identities;
  std::sort(sorted_ids.begin(), sorted_ids.end());
  sorted_ids.erase(std::unique(sorted_ids.begin(), sorted_ids.end()),
                   sorted_ids.end());
  if (sorted_ids.size() < 2) {
    throw ConfigError("margin training needs at least 2 identities");
  }
  std::unordered_map<int, int> label_of;
  for (size_t i = 0; i < sorted_ids.size(); ++i) {
    label_of[sorted_ids[i]] = static_cast<int>(i);
  }

  std::vector<int> sample_indices;
  for (size_t i = 0; i < data.samples.size(); ++i) {
    if (label_of.count(data.samples[i].identity_id)) {
      sample_indices.push_back(static_cast<int>(i));
    }
  }
  if (sample_indices.empty()) throw ConfigError("no samples for the given identities");

  MarginHeadConfig head_cfg;
  head_cfg.num_classes = static_cast<int>(sorted_ids.size());
  head_cfg.scale_s = cfg.head_scale;
  head_cfg.margin_m = cfg.head_margin;
  MarginHead head(head_cfg, model.spec().embedding_dim,
                  mix_seed(cfg.seed, 0x68656164ULL ^ seed_salt));

  SgdState state;
  state.velocity = Parameters::zeros_like(model.spec());
  state.head_velocity.assign(head.weight.size(), 0.0);

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const double lr = base_schedule ? cfg.base_lr_at(epoch) : cfg.incr_lr_at(epoch);
    const auto batches =
        plain_batches(sample_indices, cfg.batch_size,
                      mix_seed(cfg.seed, seed_salt), epoch);
    std::vector<LossBreakdown> epoch_losses;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      std::vector<ForwardCache> caches;
      std::vector<Vec> embeddings;
      std::vector<int> labels;
      caches.reserve(batch.size());
      for (int idx : batch) {
        caches.push_back(forward_cached(model, data.samples[idx].image));
        embeddings.push_back(caches.back().stack.embedding);
        labels.push_back(label_of.at(data.samples[idx].identity_id));
      }

      MarginLossGrads mg = margin_ce_with_grads(head, embeddings, labels);
      check_finite_loss(mg.loss, ledger_step, epoch, bi);

      Parameters grads = Parameters::zeros_like(model.spec());
      const std::vector<Tensor3> no_stage_grads;
      for (size_t i = 0; i < batch.size(); ++i) {
        backward(model, caches[i], no_stage_grads, mg.d_embeddings[i], grads);
      }
      apply_update(model, &head, grads, mg.d_weight, state, lr, cfg);

      LossBreakdown b;
      b.id = mg.loss;
      b.total = mg.loss;
      epoch_losses.push_back(b);
    }
    if (ledger != nullptr) {
      ledger->rows.push_back({ledger_step, epoch, average_breakdowns(epoch_losses),
                              lr, seconds_since(t0)});
    }
  }
  // The classification head goes out of scope here: after margin training
  // only the backbone survives.
}

}  // namespace

ModelSnapshot train_base(const IdentityDataset& data,
                         const std::vector<int>& identities,
                         const BackboneSpec& spec, const TrainConfig& config,
                         RunLedger* ledger, int ledger_step, uint64_t seed_salt) {
  config.validate();
  const auto t0 = Clock::now();
  ModelSnapshot model(spec, mix_seed(config.seed, 0x696e6974ULL));
  train_margin_epochs(model, data, identities, config.base_epochs,
                      /*base_schedule=*/true, config, ledger, ledger_step,
                      seed_salt, t0);
  model.freeze();
  return model;
}

ModelSnapshot train_incremental_step(const ModelSnapshot& teacher,
                                     const IdentityDataset& data,
                                     const std::vector<int>& step_identities,
                                     const TrainConfig& config,
                                     const LossConfig& loss_config,
                                     RunLedger* ledger) {
  config.validate();
  loss_config.validate();
  if (!teacher.frozen()) {
    throw TrainError("incremental training requires a frozen teacher");
  }
  if (step_identities.empty()) throw ConfigError("empty incremental step");

  const auto t0 = Clock::now();
  const uint64_t teacher_hash_before = teacher.checksum();
  ModelSnapshot student = clone_as_student(teacher);
  const int step = student.step_index();

  UniqueIdentityBatcher batcher(data, step_identities, config.batch_size,
                                mix_seed(config.seed, static_cast<uint64_t>(step)));

  // Optional identity supervision for ablations: a per-step head sized to
  // this step's identities, trained jointly and discarded afterwards.
  std::vector<int> sorted_ids = step_identities;
  std::sort(sorted_ids.begin(), sorted_ids.end());
  std::unordered_map<int, int> label_of;
  for (size_t i = 0; i < sorted_ids.size(); ++i) {
    label_of[sorted_ids[i]] = static_cast<int>(i);
  }
  std::optional<MarginHead> head;
  if (loss_config.include_id_loss) {
    MarginHeadConfig head_cfg;
    head_cfg.num_classes = static_cast<int>(sorted_ids.size());
    head_cfg.scale_s = config.head_scale;
    head_cfg.margin_m = config.head_margin;
    head.emplace(head_cfg, student.spec().embedding_dim,
                 mix_seed(config.seed, 0x69646864ULL ^ static_cast<uint64_t>(step)));
  }

  SgdState state;
  state.velocity = Parameters::zeros_like(student.spec());
  if (head) state.head_velocity.assign(head->weight.size(), 0.0);

  const int L = student.spec().stage_count;
  bool first_batch_logged = false;
  // A null objective has zero gradient everywhere; no update may happen
  // (weight decay only rides on an actual training signal).
  const bool null_objective = loss_config.lambda1 == 0.0 &&
                              loss_config.lambda2 == 0.0 &&
                              loss_config.lambda3 == 0.0 &&
                              !loss_config.include_id_loss;

  for (int epoch = 1; epoch <= config.incr_epochs; ++epoch) {
    const double lr = config.incr_lr_at(epoch);
    const auto batches = batcher.epoch_batches(epoch);
    std::vector<LossBreakdown> epoch_losses;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];

      std::vector<ForwardCache> caches;
      std::vector<FeatureStack> student_stacks, teacher_stacks;
      std::vector<Vec> student_embs, teacher_embs;
      std::vector<int> labels;
      for (int idx : batch) {
        caches.push_back(forward_cached(student, data.samples[idx].image));
        student_stacks.push_back(caches.back().stack);
        student_embs.push_back(caches.back().stack.embedding);
        // Teacher outputs are constants; no cache kept.
        teacher_stacks.push_back(
            forward_cached(teacher, data.samples[idx].image).stack);
        teacher_embs.push_back(teacher_stacks.back().embedding);
        labels.push_back(label_of.at(data.samples[idx].identity_id));
      }

      const size_t B = batch.size();
      double msfd = 0.0, gpkd = 0.0, ckd = 0.0;
      std::vector<std::vector<Tensor3>> msfd_grads;
      std::vector<Vec> emb_grads(B, Vec(student_embs[0].size(), 0.0));

      if (loss_config.lambda1 > 0.0) {
        msfd = msfd_loss_with_grads(student_stacks, teacher_stacks, msfd_grads,
                                    loss_config.epsilon);
      } else {
        msfd = msfd_loss(student_stacks, teacher_stacks, loss_config.epsilon);
      }
      {
        std::vector<Vec> g;
        gpkd = gpkd_loss_with_grads(student_embs, teacher_embs, g,
                                    loss_config.epsilon);
        if (loss_config.lambda2 > 0.0) {
          for (size_t i = 0; i < B; ++i) {
            for (size_t q = 0; q < g[i].size(); ++q) {
              emb_grads[i][q] += loss_config.lambda2 * g[i][q];
            }
          }
        }
      }
      {
        std::vector<Vec> g;
        ckd = ckd_loss_with_grads(student_embs, teacher_embs, loss_config.tau, g,
                                  loss_config.epsilon);
        if (loss_config.lambda3 > 0.0) {
          for (size_t i = 0; i < B; ++i) {
            for (size_t q = 0; q < g[i].size(); ++q) {
              emb_grads[i][q] += loss_config.lambda3 * g[i][q];
            }
          }
        }
      }

      std::optional<double> id_loss;
      MarginLossGrads mg;
      if (head) {
        mg = margin_ce_with_grads(*head, student_embs, labels);
        id_loss = mg.loss;
        for (size_t i = 0; i < B; ++i) {
          for (size_t q = 0; q < mg.d_embeddings[i].size(); ++q) {
            emb_grads[i][q] += mg.d_embeddings[i][q];
          }
        }
      }

      const LossBreakdown breakdown =
          total_loss(msfd, gpkd, ckd, id_loss, loss_config);
      check_finite_loss(breakdown.total, step, epoch, bi);
      if (!first_batch_logged) {
        first_batch_logged = true;
        if (ledger != nullptr) ledger->first_batch_per_step[step] = breakdown;
      }

      if (!null_objective) {
        Parameters grads = Parameters::zeros_like(student.spec());
        std::vector<Tensor3> stage_grads(L);
        for (size_t i = 0; i < B; ++i) {
          if (loss_config.lambda1 > 0.0) {
            for (int l = 0; l < L; ++l) {
              stage_grads[l] = msfd_grads[i][l];
              for (double& v : stage_grads[l].data) v *= loss_config.lambda1;
            }
          }
          backward(student, caches[i], stage_grads, emb_grads[i], grads);
        }
        Vec head_grads = head ? mg.d_weight : Vec{};
        apply_update(student, head ? &*head : nullptr, grads, head_grads, state,
                     lr, config);
      }

      epoch_losses.push_back(breakdown);
    }
    if (ledger != nullptr) {
      ledger->rows.push_back({step, epoch, average_breakdowns(epoch_losses), lr,
                              seconds_since(t0)});
    }
  }

  if (teacher.checksum() != teacher_hash_before) {
    throw TrainError("teacher parameters changed during an incremental step");
  }
  student.freeze();
  return student;
}

ModelSnapshot finetune_step(const ModelSnapshot& teacher,
                            const IdentityDataset& data,
                            const std::vector<int>& step_identities,
                            const TrainConfig& config, RunLedger* ledger) {
  config.validate();
  if (!teacher.frozen()) throw TrainError("finetune step requires a frozen teacher");
  if (step_identities.empty()) throw ConfigError("empty incremental step");

  const auto t0 = Clock::now();
  ModelSnapshot student = clone_as_student(teacher);
  train_margin_epochs(student, data, step_identities, config.incr_epochs,
                      /*base_schedule=*/false, config, ledger,
                      student.step_index(),
                      0x66740000ULL ^ static_cast<uint64_t>(student.step_index()),
                      t0);
  student.freeze();
  return student;
}

ModelSnapshot run_baseline_joint(const IdentityDataset& data,
                                 const StepPlan& plan, const BackboneSpec& spec,
                                 const TrainConfig& config, RunLedger* ledger) {
  std::set<int> ids(plan.base_identities.begin(), plan.base_identities.end());
  for (const auto& step : plan.step_identity_sets) ids.insert(step.begin(), step.end());
  return train_base(data, std::vector<int>(ids.begin(), ids.end()), spec,
                    config, ledger, /*ledger_step=*/0, /*seed_salt=*/0x6a6f696eULL);
}

RunLedger run_lifelong(const IdentityDataset& data, const StepPlan& plan,
                       const BackboneSpec& spec, const TrainConfig& config,
                       const LossConfig& loss_config, const RunHooks& hooks,
                       const ResumeState& resume) {
  config.validate();
  loss_config.validate();
  plan.validate();

  RunLedger ledger = resume.ledger;
  ledger.seed = config.seed;

  auto emit = [&](int step, const ModelSnapshot& model, uint64_t teacher_hash) {
    ledger.checkpoints.push_back({step, model.checksum(), teacher_hash, ""});
    if (hooks.on_checkpoint) hooks.on_checkpoint(step, model);
    if (hooks.after_step) hooks.after_step(step, model);
  };
  auto flush_rows = [&](size_t from_row) {
    if (hooks.on_epoch) {
      for (size_t i = from_row; i < ledger.rows.size(); ++i) {
        hooks.on_epoch(ledger.rows[i]);
      }
    }
  };

  const auto t0 = Clock::now();
  ModelSnapshot current;

  if (config.mode == TrainMode::joint) {
    // Joint training collapses the schedule into one supervised run over all
    // identities; with no incremental steps it reduces to plain base training.
    if (resume.next_step == 0) {
      const size_t row0 = ledger.rows.size();
      current = run_baseline_joint(data, plan, spec, config, &ledger);
      flush_rows(row0);
      emit(0, current, 0);
    }
    ledger.wall_clock_total = seconds_since(t0);
    return ledger;
  }

  if (resume.next_step == 0) {
    const size_t row0 = ledger.rows.size();
    current = train_base(data, plan.base_identities, spec, config, &ledger, 0, 0);
    flush_rows(row0);
    emit(0, current, 0);
  } else {
    if (!resume.last_checkpoint.has_value()) {
      throw ConfigError("resume state lacks the last completed checkpoint");
    }
    current = *resume.last_checkpoint;
    if (!current.frozen()) current.freeze();
  }

  const int first_step = std::max(1, resume.next_step);
  for (int t = first_step; t <= plan.step_count; ++t) {
    const uint64_t teacher_hash = current.checksum();
    const size_t row0 = ledger.rows.size();
    switch (config.mode) {
      case TrainMode::clface:
        current = train_incremental_step(current, data,
                                         plan.step_identity_sets[t - 1], config,
                                         loss_config, &ledger);
        break;
      case TrainMode::finetune:
        current = finetune_step(current, data, plan.step_identity_sets[t - 1],
                                config, &ledger);
        break;
      case TrainMode::feature_extract:
        // The representation stays fixed after base training; the step
        // checkpoint is the previous model re-emitted.
        break;
      case TrainMode::joint:
        break;  // handled above
    }
    flush_rows(row0);
    emit(t, current, teacher_hash);
  }

  ledger.wall_clock_total = seconds_since(t0);
  return ledger;
}

}  // namespace clface
