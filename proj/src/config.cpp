#include "clface/config.hpp"

#include <cstdio>
#include <fstream>

#include "clface/errors.hpp"
#include "clface/rng.hpp"

namespace clface {

namespace {

// Assign dst from j[key] when present (missing keys keep defaults, so config
// files only need to state what they change).
template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

nlohmann::json synth_to_json(const SynthParams& p) {
  return {
      {"num_identities", p.num_identities},
      {"images_per_identity", p.images_per_identity},
      {"image_shape", p.image_shape},
      {"noise_sigma", p.noise_sigma},
      {"noise_rank", p.noise_rank},
      {"max_shift", p.max_shift},
      {"blob_count", p.blob_count},
      {"identity_strength", p.identity_strength},
      {"seed", p.seed},
      {"identity_offset", p.identity_offset},
      {"split_tag", p.split_tag},
  };
}

SynthParams synth_from_json(const nlohmann::json& j) {
  SynthParams p;
  maybe(j, "num_identities", p.num_identities);
  maybe(j, "images_per_identity", p.images_per_identity);
  if (j.contains("image_shape")) {
    auto v = j.at("image_shape").get<std::vector<int>>();
    if (v.size() != 3) throw ConfigError("image_shape must have 3 entries");
    p.image_shape = {v[0], v[1], v[2]};
  }
  maybe(j, "noise_sigma", p.noise_sigma);
  maybe(j, "noise_rank", p.noise_rank);
  maybe(j, "max_shift", p.max_shift);
  maybe(j, "blob_count", p.blob_count);
  maybe(j, "identity_strength", p.identity_strength);
  maybe(j, "seed", p.seed);
  maybe(j, "identity_offset", p.identity_offset);
  maybe(j, "split_tag", p.split_tag);
  return p;
}

}  // namespace

nlohmann::json Config::to_json() const {
  nlohmann::json j;
  j["dataset"] = synth_to_json(dataset);
  j["plan"] = {
      {"base_fraction", base_fraction},
      {"steps", steps},
      {"allow_overlap", allow_overlap},
      {"seed", plan_seed},
  };
  j["model"] = {
      {"channels", channels},
      {"embedding_dim", embedding_dim},
  };
  j["loss"] = {
      {"lambda1", loss.lambda1}, {"lambda2", loss.lambda2},
      {"lambda3", loss.lambda3}, {"tau", loss.tau},
      {"include_id_loss", loss.include_id_loss}, {"epsilon", loss.epsilon},
  };
  j["train"] = {
      {"mode", mode_name(train.mode)},
      {"base_epochs", train.base_epochs},
      {"incr_epochs", train.incr_epochs},
      {"batch_size", train.batch_size},
      {"lr_base", train.lr_base},
      {"lr_incr", train.lr_incr},
      {"momentum", train.momentum},
      {"weight_decay", train.weight_decay},
      {"base_lr_drop_epochs", train.base_lr_drop_epochs},
      {"base_lr_drop_factor", train.base_lr_drop_factor},
      {"incr_lr_gamma", train.incr_lr_gamma},
      {"grad_clip", train.grad_clip},
      {"seed", train.seed},
      {"head_scale", train.head_scale},
      {"head_margin", train.head_margin},
  };
  j["eval"] = {
      {"folds", folds},
      {"far_targets", far_targets},
      {"ranks", ranks},
      {"pair_seed", pair_seed},
  };
  nlohmann::json suites_json = nlohmann::json::array();
  for (const SuiteConfig& s : suites) {
    suites_json.push_back({
        {"name", s.name},
        {"domain", s.domain},
        {"num_identities", s.num_identities},
        {"images_per_identity", s.images_per_identity},
        {"noise_sigma", s.noise_sigma},
        {"max_shift", s.max_shift},
        {"blob_count", s.blob_count},
        {"seed", s.seed},
        {"genuine_per_identity", s.genuine_per_identity},
        {"impostor_total", s.impostor_total},
    });
  }
  j["eval"]["suites"] = suites_json;
  return j;
}

Config Config::from_json(const nlohmann::json& j) {
  Config c;
  try {
    if (j.contains("dataset")) c.dataset = synth_from_json(j.at("dataset"));
    if (j.contains("plan")) {
      const auto& p = j.at("plan");
      maybe(p, "base_fraction", c.base_fraction);
      maybe(p, "steps", c.steps);
      maybe(p, "allow_overlap", c.allow_overlap);
      maybe(p, "seed", c.plan_seed);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      maybe(m, "channels", c.channels);
      maybe(m, "embedding_dim", c.embedding_dim);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      maybe(l, "lambda1", c.loss.lambda1);
      maybe(l, "lambda2", c.loss.lambda2);
      maybe(l, "lambda3", c.loss.lambda3);
      maybe(l, "tau", c.loss.tau);
      maybe(l, "include_id_loss", c.loss.include_id_loss);
      maybe(l, "epsilon", c.loss.epsilon);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("mode")) c.train.mode = parse_mode(t.at("mode").get<std::string>());
      maybe(t, "base_epochs", c.train.base_epochs);
      maybe(t, "incr_epochs", c.train.incr_epochs);
      maybe(t, "batch_size", c.train.batch_size);
      maybe(t, "lr_base", c.train.lr_base);
      maybe(t, "lr_incr", c.train.lr_incr);
      maybe(t, "momentum", c.train.momentum);
      maybe(t, "weight_decay", c.train.weight_decay);
      maybe(t, "base_lr_drop_epochs", c.train.base_lr_drop_epochs);
      maybe(t, "base_lr_drop_factor", c.train.base_lr_drop_factor);
      maybe(t, "incr_lr_gamma", c.train.incr_lr_gamma);
      maybe(t, "grad_clip", c.train.grad_clip);
      maybe(t, "seed", c.train.seed);
      maybe(t, "head_scale", c.train.head_scale);
      maybe(t, "head_margin", c.train.head_margin);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      maybe(e, "folds", c.folds);
      maybe(e, "far_targets", c.far_targets);
      maybe(e, "ranks", c.ranks);
      maybe(e, "pair_seed", c.pair_seed);
      if (e.contains("suites")) {
        c.suites.clear();
        for (const auto& s : e.at("suites")) {
          SuiteConfig sc;
          maybe(s, "name", sc.name);
          maybe(s, "domain", sc.domain);
          maybe(s, "num_identities", sc.num_identities);
          maybe(s, "images_per_identity", sc.images_per_identity);
          maybe(s, "noise_sigma", sc.noise_sigma);
          maybe(s, "max_shift", sc.max_shift);
          maybe(s, "blob_count", sc.blob_count);
          maybe(s, "seed", sc.seed);
          maybe(s, "genuine_per_identity", sc.genuine_per_identity);
          maybe(s, "impostor_total", sc.impostor_total);
          c.suites.push_back(sc);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config file " + path + ": " + e.what());
  }
  return from_json(j);
}

void Config::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << to_json().dump(2) << '\n';
}

void Config::apply_override(const std::string& dotted_kv) {
  const auto eq = dotted_kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value: " + dotted_kv);
  }
  const std::string path = dotted_kv.substr(0, eq);
  const std::string value = dotted_kv.substr(eq + 1);

  nlohmann::json j = to_json();
  nlohmann::json* node = &j;
  size_t pos = 0;
  while (true) {
    const size_t dotp = path.find('.', pos);
    const std::string key = path.substr(pos, dotp - pos);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dotp == std::string::npos) {
      if (!node->contains(key)) throw ConfigError("unknown config key: " + path);
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(value);
      } catch (const nlohmann::json::exception&) {
        parsed = value;  // unquoted strings (e.g. mode=clface)
      }
      (*node)[key] = parsed;
      break;
    }
    if (!node->contains(key)) throw ConfigError("unknown config section: " + key);
    node = &(*node)[key];
    pos = dotp + 1;
  }
  *this = from_json(j);
}

BackboneSpec Config::backbone_spec() const {
  return BackboneSpec::make(dataset.image_shape, channels, embedding_dim);
}

EvalOptions Config::eval_options() const {
  EvalOptions opt;
  opt.folds = folds;
  opt.far_targets = far_targets;
  opt.ranks = ranks;
  return opt;
}

std::vector<EvalSuite> Config::build_suites() const {
  std::vector<SuiteConfig> defs = suites;
  if (defs.empty()) {
    SuiteConfig in;
    in.name = "in_domain";
    in.domain = "in_domain";
    defs.push_back(in);
    SuiteConfig out;
    out.name = "out_of_domain";
    out.domain = "out_of_domain";
    // A visibly different generator family: busier templates, more noise.
    out.blob_count = dataset.blob_count + 3;
    out.noise_sigma = dataset.noise_sigma * 1.5;
    defs.push_back(out);
  }

  std::vector<EvalSuite> out;
  int offset = dataset.identity_offset + dataset.num_identities;
  for (size_t i = 0; i < defs.size(); ++i) {
    const SuiteConfig& d = defs[i];
    SynthParams p = dataset;
    p.split_tag = "test";
    p.num_identities = d.num_identities;
    p.images_per_identity = d.images_per_identity;
    if (d.noise_sigma >= 0.0) p.noise_sigma = d.noise_sigma;
    if (d.max_shift >= 0) p.max_shift = d.max_shift;
    if (d.blob_count >= 0) p.blob_count = d.blob_count;
    // Held-out identities: a range disjoint from the train identities and
    // from every previous suite.
    p.identity_offset = offset;
    offset += d.num_identities;
    p.seed = d.seed != 0 ? d.seed
                         : mix_seed(dataset.seed, 0x73756974ULL ^ (i + 1));

    EvalSuite suite;
    suite.name = d.name;
    if (d.domain == "in_domain") suite.domain = DomainTag::in_domain;
    else if (d.domain == "out_of_domain") suite.domain = DomainTag::out_of_domain;
    else throw ConfigError("suite domain must be in_domain or out_of_domain");
    suite.dataset = synth_identities(p);
    const int impostors = d.impostor_total > 0
                              ? d.impostor_total
                              : d.genuine_per_identity * d.num_identities;
    suite.pairs = build_pairs(suite.dataset, d.genuine_per_identity, impostors,
                              mix_seed(pair_seed, 0x70727374ULL ^ i));
    out.push_back(std::move(suite));
  }
  return out;
}

std::string Config::content_hash() const {
  const std::string text = to_json().dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace clface
