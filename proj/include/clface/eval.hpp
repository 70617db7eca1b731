#pragma once

#include <map>
#include <string>
#include <vector>

#include "clface/data.hpp"
#include "clface/model.hpp"

namespace clface {

struct SimilarityRecord {
  double score = 0.0;  // cosine of two L2-normalized embeddings, in [-1, 1]
  bool is_genuine = false;
};

/// Cosine score per pair, order preserved. The model must be frozen.
std::vector<SimilarityRecord> cosine_scores(const ModelSnapshot& model,
                                            const IdentityDataset& dataset,
                                            const PairList& pairs);

struct KfoldResult {
  double va_mean = 0.0;
  double va_std = 0.0;  // population std over fold accuracies
  std::vector<double> fold_accuracies;
  std::vector<double> fold_thresholds;
};

/// k contiguous folds; each held-out fold is scored at the threshold that
/// maximizes accuracy on the other k-1 folds. Candidate thresholds are the
/// midpoints of adjacent sorted unique scores plus +-infinity sentinels; ties
/// resolve to the lowest candidate. A pair scores genuine iff score >= t.
KfoldResult verification_accuracy_kfold(
    const std::vector<SimilarityRecord>& records, int k = 10,
    bool shuffle_first = false, uint64_t shuffle_seed = 0);

/// For each target FAR: threshold = smallest observed score whose impostor
/// acceptance rate (impostors >= t) is <= target; TAR = fraction of genuine
/// scores >= threshold. Purely empirical, no interpolation; if no observed
/// score qualifies the threshold is +infinity and TAR is 0.
std::map<double, double> tar_at_far(const std::vector<SimilarityRecord>& records,
                                    const std::vector<double>& far_targets);

/// CMC over cosine similarity; gallery sorted descending per probe with ties
/// broken by gallery index. Rank-k hit iff a gallery entry of the probe's
/// identity appears in the top k.
std::map<int, double> rank_k_identification(
    const std::vector<Vec>& probe_embs, const std::vector<int>& probe_labels,
    const std::vector<Vec>& gallery_embs, const std::vector<int>& gallery_labels,
    const std::vector<int>& ks);

enum class DomainTag { in_domain, out_of_domain };
std::string domain_name(DomainTag tag);

/// One evaluation workload: a pair suite plus an optional identification
/// split (first image per identity as gallery, the rest as probes).
struct EvalSuite {
  std::string name;
  DomainTag domain = DomainTag::in_domain;
  IdentityDataset dataset;
  PairList pairs;
  bool with_identification = true;
};

struct EvalReport {
  int step_index = 0;
  std::string suite;
  DomainTag domain = DomainTag::in_domain;
  double va_mean = 0.0;
  double va_std = 0.0;
  std::map<double, double> tar_at_far;
  std::map<int, double> cmc;
};

struct EvalOptions {
  int folds = 10;
  std::vector<double> far_targets{1e-3, 1e-4};
  std::vector<int> ranks{1, 5};
};

/// Runs every suite against a frozen model. Suites with zero pairs are
/// rejected at validation.
std::vector<EvalReport> evaluate_step(const ModelSnapshot& model,
                                      const std::vector<EvalSuite>& suites,
                                      int step_index,
                                      const EvalOptions& options = {});

}  // namespace clface
