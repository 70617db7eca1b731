#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "clface/data.hpp"
#include "clface/eval.hpp"
#include "clface/losses.hpp"
#include "clface/trainer.hpp"

namespace clface {

/// One evaluation-suite description; the dataset is generated on demand.
struct SuiteConfig {
  std::string name = "in_domain";
  std::string domain = "in_domain";  // in_domain | out_of_domain
  int num_identities = 32;
  int images_per_identity = 6;
  double noise_sigma = -1.0;  // <0: inherit the train-set sigma
  int max_shift = -1;         // <0: inherit
  int blob_count = -1;        // <0: inherit
  uint64_t seed = 0;          // 0: derived from the dataset seed
  int genuine_per_identity = 5;
  int impostor_total = 0;  // 0: match the genuine count
};

/// Whole-experiment configuration with defaults matching the reference
/// hyperparameters; everything is overridable from JSON or dotted keys.
struct Config {
  SynthParams dataset;

  // plan
  double base_fraction = 0.5;
  int steps = 5;
  bool allow_overlap = false;
  uint64_t plan_seed = 1;

  // model
  std::vector<int> channels{16, 32, 64, 128};
  int embedding_dim = 128;

  LossConfig loss;
  TrainConfig train;

  // eval
  int folds = 10;
  std::vector<double> far_targets{1e-3, 1e-4};
  std::vector<int> ranks{1, 5};
  uint64_t pair_seed = 1;
  std::vector<SuiteConfig> suites;  // empty: default in/out-of-domain pair

  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);

  /// Throws ConfigError on missing/unparsable files.
  static Config load(const std::string& path);
  void save(const std::string& path) const;

  /// Applies a "dotted.key=value" override, e.g. "loss.lambda2=0".
  void apply_override(const std::string& dotted_kv);

  BackboneSpec backbone_spec() const;
  EvalOptions eval_options() const;
  std::vector<EvalSuite> build_suites() const;

  std::string content_hash() const;  // hash of the canonical JSON dump
};

}  // namespace clface
