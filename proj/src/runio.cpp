#include "clface/runio.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clface/checkpoint.hpp"
#include "clface/errors.hpp"

namespace clface {

namespace fs = std::filesystem;

std::filesystem::path RunPaths::checkpoint(int step) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%04d.ckpt", step);
  return dir / buf;
}

nlohmann::json plan_to_json(const StepPlan& plan) {
  nlohmann::json j;
  j["base_fraction"] = plan.base_fraction;
  j["step_count"] = plan.step_count;
  j["seed"] = plan.seed;
  j["allow_overlap"] = plan.allow_overlap;
  j["class_order"] = plan.class_order;
  j["base_identities"] = plan.base_identities;
  j["step_identity_sets"] = plan.step_identity_sets;
  return j;
}

StepPlan plan_from_json(const nlohmann::json& j) {
  StepPlan plan;
  try {
    plan.base_fraction = j.at("base_fraction").get<double>();
    plan.step_count = j.at("step_count").get<int>();
    plan.seed = j.at("seed").get<uint64_t>();
    plan.allow_overlap = j.at("allow_overlap").get<bool>();
    plan.class_order = j.at("class_order").get<std::vector<int>>();
    plan.base_identities = j.at("base_identities").get<std::vector<int>>();
    plan.step_identity_sets =
        j.at("step_identity_sets").get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad plan manifest: ") + e.what());
  }
  plan.validate();
  return plan;
}

void save_plan(const StepPlan& plan, const SynthParams& dataset_params,
               const std::string& path) {
  nlohmann::json j;
  j["plan"] = plan_to_json(plan);
  j["dataset"] = {
      {"num_identities", dataset_params.num_identities},
      {"images_per_identity", dataset_params.images_per_identity},
      {"image_shape", dataset_params.image_shape},
      {"noise_sigma", dataset_params.noise_sigma},
      {"noise_rank", dataset_params.noise_rank},
      {"max_shift", dataset_params.max_shift},
      {"blob_count", dataset_params.blob_count},
      {"identity_strength", dataset_params.identity_strength},
      {"seed", dataset_params.seed},
      {"identity_offset", dataset_params.identity_offset},
      {"split_tag", dataset_params.split_tag},
  };
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write plan manifest: " + path);
  out << j.dump(2) << '\n';
}

std::pair<StepPlan, SynthParams> load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse plan manifest " + path + ": " + e.what());
  }
  StepPlan plan = plan_from_json(j.at("plan"));
  SynthParams p;
  try {
    const auto& d = j.at("dataset");
    p.num_identities = d.at("num_identities").get<int>();
    p.images_per_identity = d.at("images_per_identity").get<int>();
    auto shape = d.at("image_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw ConfigError("bad image_shape in plan");
    p.image_shape = {shape[0], shape[1], shape[2]};
    p.noise_sigma = d.at("noise_sigma").get<double>();
    p.noise_rank = d.at("noise_rank").get<int>();
    p.max_shift = d.at("max_shift").get<int>();
    p.blob_count = d.at("blob_count").get<int>();
    p.identity_strength = d.at("identity_strength").get<double>();
    p.seed = d.at("seed").get<uint64_t>();
    p.identity_offset = d.at("identity_offset").get<int>();
    p.split_tag = d.at("split_tag").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dataset block in plan: ") + e.what());
  }
  return {plan, p};
}

namespace {

constexpr char kLedgerHeader[] = "step,epoch,msfd,gpkd,ckd,id,total,lr,wall_clock";

std::string format_row(const LedgerRow& r) {
  char buf[256];
  std::string id_field;
  if (r.losses.id.has_value()) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%.12g", *r.losses.id);
    id_field = idbuf;
  }
  std::snprintf(buf, sizeof(buf), "%d,%d,%.12g,%.12g,%.12g,%s,%.12g,%.12g,%.6f",
                r.step, r.epoch, r.losses.msfd, r.losses.gpkd, r.losses.ckd,
                id_field.c_str(), r.losses.total, r.lr, r.wall_clock);
  return buf;
}

}  // namespace

void append_ledger_row(const fs::path& path, const LedgerRow& row) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw ValidationError("cannot append to ledger: " + path.string());
  if (fresh) out << kLedgerHeader << '\n';
  out << format_row(row) << '\n';
}

std::vector<LedgerRow> load_ledger_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open ledger: " + path.string());
  std::vector<LedgerRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;  // header
    }
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 9) throw ValidationError("malformed ledger row: " + line);
    LedgerRow r;
    r.step = std::stoi(fields[0]);
    r.epoch = std::stoi(fields[1]);
    r.losses.msfd = std::stod(fields[2]);
    r.losses.gpkd = std::stod(fields[3]);
    r.losses.ckd = std::stod(fields[4]);
    if (!fields[5].empty()) r.losses.id = std::stod(fields[5]);
    r.losses.total = std::stod(fields[6]);
    r.lr = std::stod(fields[7]);
    r.wall_clock = std::stod(fields[8]);
    rows.push_back(r);
  }
  return rows;
}

void rewrite_ledger(const fs::path& path, const std::vector<LedgerRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot rewrite ledger: " + path.string());
  out << kLedgerHeader << '\n';
  for (const LedgerRow& r : rows) out << format_row(r) << '\n';
}

namespace {

std::string metric_rows(const EvalReport& r, std::string* csv) {
  char buf[128];
  auto add = [&](const std::string& metric, double value) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%s,%.12g\n", r.step_index,
                  r.suite.c_str(), metric.c_str(), value);
    *csv += buf;
  };
  add("va_mean", r.va_mean);
  add("va_std", r.va_std);
  for (const auto& [far, tar] : r.tar_at_far) {
    std::snprintf(buf, sizeof(buf), "tar_at_far_%g", far);
    add(buf, tar);
  }
  for (const auto& [k, rate] : r.cmc) {
    add("cmc_rank_" + std::to_string(k), rate);
  }
  return *csv;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["step"] = r.step_index;
  j["suite"] = r.suite;
  j["domain"] = domain_name(r.domain);
  j["va_mean"] = r.va_mean;
  j["va_std"] = r.va_std;
  nlohmann::json tar = nlohmann::json::array();
  for (const auto& [far, t] : r.tar_at_far) tar.push_back({{"far", far}, {"tar", t}});
  j["tar_at_far"] = tar;
  nlohmann::json cmc = nlohmann::json::array();
  for (const auto& [k, rate] : r.cmc) cmc.push_back({{"k", k}, {"rate", rate}});
  j["cmc"] = cmc;
  return j;
}

}  // namespace

void write_reports_csv(const fs::path& path,
                       const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvalError("cannot write reports: " + path.string());
  out << "step,suite,metric,value\n";
  std::string csv;
  for (const EvalReport& r : reports) metric_rows(r, &csv);
  out << csv;
}

void write_reports_json(const fs::path& path,
                        const std::vector<EvalReport>& reports) {
  nlohmann::json j = nlohmann::json::array();
  for (const EvalReport& r : reports) j.push_back(report_to_json(r));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvalError("cannot write reports: " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<EvalReport> load_reports_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open reports: " + path.string());
  nlohmann::json j;
  in >> j;
  std::vector<EvalReport> out;
  for (const auto& e : j) {
    EvalReport r;
    r.step_index = e.at("step").get<int>();
    r.suite = e.at("suite").get<std::string>();
    r.domain = e.at("domain").get<std::string>() == "in_domain"
                   ? DomainTag::in_domain
                   : DomainTag::out_of_domain;
    r.va_mean = e.at("va_mean").get<double>();
    r.va_std = e.at("va_std").get<double>();
    for (const auto& t : e.at("tar_at_far")) {
      r.tar_at_far[t.at("far").get<double>()] = t.at("tar").get<double>();
    }
    for (const auto& c : e.at("cmc")) {
      r.cmc[c.at("k").get<int>()] = c.at("rate").get<double>();
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

nlohmann::json breakdown_to_json(const LossBreakdown& b) {
  nlohmann::json j;
  j["msfd"] = b.msfd;
  j["gpkd"] = b.gpkd;
  j["ckd"] = b.ckd;
  if (b.id.has_value()) j["id"] = *b.id;
  j["total"] = b.total;
  return j;
}

void write_manifest(const RunPaths& paths, const Config& config,
                    const std::string& command_line, const RunLedger& ledger,
                    const std::string& started, const std::string& status) {
  nlohmann::json j;
  j["version"] = "clface-0.1.0";
  j["status"] = status;
  j["seed"] = config.train.seed;
  j["mode"] = mode_name(config.train.mode);
  j["config_hash"] = config.content_hash();
  j["command_line"] = command_line;
  j["started"] = started;
  j["finished"] = status == "complete" ? now_iso8601() : "";
  nlohmann::json ckpts = nlohmann::json::array();
  for (const CheckpointRecord& c : ledger.checkpoints) {
    ckpts.push_back({{"step", c.step},
                     {"file", c.file},
                     {"content_hash", hash_hex(c.content_hash)},
                     {"teacher_hash", hash_hex(c.teacher_hash)}});
  }
  j["checkpoints"] = ckpts;
  nlohmann::json first = nlohmann::json::object();
  for (const auto& [step, b] : ledger.first_batch_per_step) {
    first[std::to_string(step)] = breakdown_to_json(b);
  }
  j["first_batch_losses"] = first;
  std::ofstream out(paths.manifest(), std::ios::trunc);
  if (!out) throw ValidationError("cannot write run manifest");
  out << j.dump(2) << '\n';
}

}  // namespace

ExecuteResult execute_run(const fs::path& run_dir, const Config& config,
                          const StepPlan& plan, const std::string& command_line,
                          bool resume) {
  RunPaths paths{run_dir};
  fs::create_directories(run_dir);
  config.save(paths.config().string());
  save_plan(plan, config.dataset, paths.plan().string());

  const IdentityDataset data = synth_identities(config.dataset);
  const BackboneSpec spec = config.backbone_spec();
  const std::string started = now_iso8601();

  // Resume: keep the longest prefix of valid checkpoints, drop everything
  // after it (including their ledger rows).
  ResumeState state;
  const int total_steps =
      config.train.mode == TrainMode::joint ? 0 : plan.step_count;
  if (resume) {
    for (int t = 0; t <= total_steps; ++t) {
      const fs::path ckpt = paths.checkpoint(t);
      if (!fs::exists(ckpt)) break;
      try {
        ModelSnapshot m = load_checkpoint(ckpt.string());
        const uint64_t teacher_hash =
            state.last_checkpoint ? state.last_checkpoint->checksum() : 0;
        state.ledger.checkpoints.push_back(
            {t, m.checksum(), teacher_hash, ckpt.filename().string()});
        state.last_checkpoint = std::move(m);
        state.next_step = t + 1;
      } catch (const ValidationError&) {
        break;  // invalid checkpoint: re-train from here
      }
    }
    if (state.next_step > 0 && fs::exists(paths.ledger())) {
      for (const LedgerRow& r : load_ledger_csv(paths.ledger())) {
        if (r.step < state.next_step) state.ledger.rows.push_back(r);
      }
    }
  }
  rewrite_ledger(paths.ledger(), state.ledger.rows);
  write_manifest(paths, config, command_line, state.ledger, started, "running");

  RunHooks hooks;
  hooks.on_epoch = [&](const LedgerRow& row) {
    append_ledger_row(paths.ledger(), row);
  };
  hooks.on_checkpoint = [&](int step, const ModelSnapshot& model) {
    // feature_extract steps re-emit the base model; copying the base file
    // keeps the step checkpoints byte-identical to it.
    const fs::path target = paths.checkpoint(step);
    if (config.train.mode == TrainMode::feature_extract && step > 0) {
      fs::copy_file(paths.checkpoint(0), target,
                    fs::copy_options::overwrite_existing);
    } else {
      save_checkpoint(model, target.string());
    }
  };

  RunLedger ledger = run_lifelong(data, plan, spec, config.train, config.loss,
                                  hooks, state);
  for (CheckpointRecord& c : ledger.checkpoints) {
    if (c.file.empty()) c.file = paths.checkpoint(c.step).filename().string();
  }
  write_manifest(paths, config, command_line, ledger, started, "complete");

  ExecuteResult result;
  result.ledger = std::move(ledger);
  for (const CheckpointRecord& c : result.ledger.checkpoints) {
    result.steps.push_back(c.step);
  }
  return result;
}

}  // namespace clface
