#include "clface/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

#include "clface/errors.hpp"
#include "clface/rng.hpp"

namespace clface {

std::vector<SimilarityRecord> cosine_scores(const ModelSnapshot& model,
                                            const IdentityDataset& dataset,
                                            const PairList& pairs) {
  if (!model.frozen()) throw EvalError("cosine_scores needs a frozen model");

  // Collect referenced samples first so every bad reference is reported.
  std::vector<int> bad;
  std::set<int> wanted;
  const int n = static_cast<int>(dataset.samples.size());
  for (size_t i = 0; i < pairs.pairs.size(); ++i) {
    const auto& p = pairs.pairs[i];
    if (p.a < 0 || p.a >= n) bad.push_back(static_cast<int>(i));
    else wanted.insert(p.a);
    if (p.b < 0 || p.b >= n) bad.push_back(static_cast<int>(i));
    else wanted.insert(p.b);
  }
  if (!bad.empty()) {
    std::string msg = "unreadable samples in pairs:";
    for (int i : bad) msg += " #" + std::to_string(i);
    throw EvalError(msg);
  }

  std::unordered_map<int, Vec> embeddings;
  for (int idx : wanted) {
    embeddings[idx] = l2_normalize(
        forward_cached(model, dataset.samples[idx].image).stack.embedding);
  }

  std::vector<SimilarityRecord> out;
  out.reserve(pairs.pairs.size());
  for (const auto& p : pairs.pairs) {
    const double c = std::clamp(dot(embeddings[p.a], embeddings[p.b]), -1.0, 1.0);
    out.push_back({c, p.genuine});
  }
  return out;
}

namespace {

double accuracy_at(const std::vector<SimilarityRecord>& recs, double threshold) {
  if (recs.empty()) return 0.0;
  int correct = 0;
  for (const auto& r : recs) {
    const bool predicted_genuine = r.score >= threshold;
    if (predicted_genuine == r.is_genuine) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(recs.size());
}

// Midpoints of adjacent sorted unique scores plus -inf/+inf sentinels.
std::vector<double> candidate_thresholds(const std::vector<SimilarityRecord>& recs) {
  std::vector<double> scores;
  scores.reserve(recs.size());
  for (const auto& r : recs) scores.push_back(r.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());

  std::vector<double> cands;
  cands.push_back(-std::numeric_limits<double>::infinity());
  for (size_t i = 0; i + 1 < scores.size(); ++i) {
    cands.push_back(0.5 * (scores[i] + scores[i + 1]));
  }
  cands.push_back(std::numeric_limits<double>::infinity());
  return cands;
}

}  // namespace

KfoldResult verification_accuracy_kfold(
    const std::vector<SimilarityRecord>& records, int k, bool shuffle_first,
    uint64_t shuffle_seed) {
  if (k < 2) throw ConfigError("k-fold verification needs k >= 2");
  if (static_cast<int>(records.size()) < k) {
    throw ConfigError("fewer records than folds");
  }
  bool any_genuine = false, any_impostor = false;
  for (const auto& r : records) (r.is_genuine ? any_genuine : any_impostor) = true;
  if (!any_genuine || !any_impostor) {
    throw ConfigError("verification needs both genuine and impostor records");
  }

  std::vector<SimilarityRecord> recs = records;
  if (shuffle_first) {
    Rng rng(mix_seed(shuffle_seed, 0x666f6c64ULL));
    rng.shuffle(recs);
  }

  const size_t n = recs.size();
  KfoldResult result;
  for (int f = 0; f < k; ++f) {
    const size_t lo = n * f / k;
    const size_t hi = n * (f + 1) / k;
    std::vector<SimilarityRecord> held, train;
    held.reserve(hi - lo);
    train.reserve(n - (hi - lo));
    for (size_t i = 0; i < n; ++i) {
      (i >= lo && i < hi ? held : train).push_back(recs[i]);
    }

    double best_acc = -1.0, best_threshold = 0.0;
    for (double t : candidate_thresholds(train)) {
      const double acc = accuracy_at(train, t);
      if (acc > best_acc) {  // ties keep the lowest candidate
        best_acc = acc;
        best_threshold = t;
      }
    }
    result.fold_thresholds.push_back(best_threshold);
    result.fold_accuracies.push_back(accuracy_at(held, best_threshold));
  }

  double sum = 0.0;
  for (double a : result.fold_accuracies) sum += a;
  result.va_mean = sum / k;
  double var = 0.0;
  for (double a : result.fold_accuracies) {
    var += (a - result.va_mean) * (a - result.va_mean);
  }
  result.va_std = std::sqrt(var / k);
  return result;
}

std::map<double, double> tar_at_far(const std::vector<SimilarityRecord>& records,
                                    const std::vector<double>& far_targets) {
  std::vector<double> genuine, impostor;
  for (const auto& r : records) {
    (r.is_genuine ? genuine : impostor).push_back(r.score);
  }
  if (genuine.empty() || impostor.empty()) {
    throw EvalError("tar_at_far needs both genuine and impostor scores");
  }

  std::vector<double> all;
  all.reserve(records.size());
  for (const auto& r : records) all.push_back(r.score);
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::sort(impostor.begin(), impostor.end());
  std::sort(genuine.begin(), genuine.end());

  auto far_at = [&](double t) {
    // fraction of impostor scores >= t
    const auto it = std::lower_bound(impostor.begin(), impostor.end(), t);
    return static_cast<double>(impostor.end() - it) / impostor.size();
  };
  auto tar_at = [&](double t) {
    const auto it = std::lower_bound(genuine.begin(), genuine.end(), t);
    return static_cast<double>(genuine.end() - it) / genuine.size();
  };

  std::map<double, double> out;
  for (double target : far_targets) {
    if (target < 0.0 || target > 1.0) {
      throw ConfigError("FAR targets must lie in [0, 1]");
    }
    double threshold = std::numeric_limits<double>::infinity();
    for (double s : all) {  // ascending: first hit is the smallest score
      if (far_at(s) <= target) {
        threshold = s;
        break;
      }
    }
    out[target] = std::isinf(threshold) ? 0.0 : tar_at(threshold);
  }
  return out;
}

std::map<int, double> rank_k_identification(
    const std::vector<Vec>& probe_embs, const std::vector<int>& probe_labels,
    const std::vector<Vec>& gallery_embs, const std::vector<int>& gallery_labels,
    const std::vector<int>& ks) {
  if (probe_embs.empty() || gallery_embs.empty()) {
    throw ConfigError("identification needs nonempty probe and gallery sets");
  }
  if (probe_embs.size() != probe_labels.size() ||
      gallery_embs.size() != gallery_labels.size()) {
    throw ValidationError("embedding/label size mismatch");
  }
  const std::set<int> gallery_ids(gallery_labels.begin(), gallery_labels.end());
  for (int y : probe_labels) {
    if (!gallery_ids.count(y)) {
      throw ConfigError("probe identity " + std::to_string(y) +
                        " absent from gallery");
    }
  }

  std::vector<Vec> g_norm(gallery_embs.size());
  for (size_t i = 0; i < gallery_embs.size(); ++i) {
    g_norm[i] = l2_normalize(gallery_embs[i]);
  }

  std::map<int, double> cmc;
  std::vector<int> hits_at(ks.size(), 0);
  for (size_t p = 0; p < probe_embs.size(); ++p) {
    const Vec e = l2_normalize(probe_embs[p]);
    std::vector<std::pair<double, size_t>> scored(gallery_embs.size());
    for (size_t g = 0; g < gallery_embs.size(); ++g) {
      scored[g] = {dot(e, g_norm[g]), g};
    }
    // Descending score; equal scores keep gallery index order.
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    int first_correct = -1;
    for (size_t r = 0; r < scored.size(); ++r) {
      if (gallery_labels[scored[r].second] == probe_labels[p]) {
        first_correct = static_cast<int>(r);
        break;
      }
    }
    for (size_t ki = 0; ki < ks.size(); ++ki) {
      if (first_correct >= 0 && first_correct < ks[ki]) ++hits_at[ki];
    }
  }
  for (size_t ki = 0; ki < ks.size(); ++ki) {
    cmc[ks[ki]] = static_cast<double>(hits_at[ki]) / probe_embs.size();
  }
  return cmc;
}

std::string domain_name(DomainTag tag) {
  return tag == DomainTag::in_domain ? "in_domain" : "out_of_domain";
}

std::vector<EvalReport> evaluate_step(const ModelSnapshot& model,
                                      const std::vector<EvalSuite>& suites,
                                      int step_index, const EvalOptions& options) {
  if (!model.frozen()) throw EvalError("evaluate_step needs a frozen model");
  std::vector<EvalReport> reports;
  for (const EvalSuite& suite : suites) {
    if (suite.pairs.pairs.empty()) {
      throw ValidationError("evaluation suite '" + suite.name + "' has no pairs");
    }
    EvalReport report;
    report.step_index = step_index;
    report.suite = suite.name;
    report.domain = suite.domain;

    const auto records = cosine_scores(model, suite.dataset, suite.pairs);
    const auto kf = verification_accuracy_kfold(records, options.folds);
    report.va_mean = kf.va_mean;
    report.va_std = kf.va_std;
    report.tar_at_far = tar_at_far(records, options.far_targets);

    if (suite.with_identification) {
      // Gallery: first image of each identity; probes: the rest.
      std::vector<Vec> gallery, probes;
      std::vector<int> gallery_labels, probe_labels;
      auto index = suite.dataset.index_by_identity();
      for (int id : suite.dataset.identity_ids) {
        const auto& idx = index[id];
        for (size_t j = 0; j < idx.size(); ++j) {
          const Vec emb =
              forward_cached(model, suite.dataset.samples[idx[j]].image)
                  .stack.embedding;
          if (j == 0) {
            gallery.push_back(emb);
            gallery_labels.push_back(id);
          } else {
            probes.push_back(emb);
            probe_labels.push_back(id);
          }
        }
      }
      if (!probes.empty()) {
        report.cmc = rank_k_identification(probes, probe_labels, gallery,
                                           gallery_labels, options.ranks);
      }
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace clface
