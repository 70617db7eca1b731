#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "clface/tensor.hpp"

namespace clface {

/// Generator settings for a synthetic identity dataset. Each identity owns a
/// fixed latent template image; samples are the template plus Gaussian noise
/// and a small random shift.
///
/// Templates are smooth random-blob images sharing one dataset-wide
/// component; the identity-specific component rides on top of it at
/// `identity_strength` relative amplitude. The Gaussian noise is structured:
/// a fixed bank of `noise_rank` smooth nuisance patterns is mixed with
/// i.i.d. normal coefficients per sample (a low-rank Gaussian process).
/// Shared structure plus structured nuisance is what makes verification
/// nontrivial at this scale: raw pixel statistics look alike across
/// identities and vary strongly within one, so separating identities takes
/// learned features (suppress the nuisance subspace, keep identity
/// directions) rather than generic projections.
struct SynthParams {
  int num_identities = 64;
  int images_per_identity = 6;
  std::array<int, 3> image_shape{3, 32, 32};  // (C, H, W)
  double noise_sigma = 0.8;
  int noise_rank = 8;   // nuisance patterns in the noise process
  int max_shift = 1;    // pixels, each axis, replicated border
  int blob_count = 5;   // smooth components per template part
  double identity_strength = 0.35;  // identity amplitude vs shared amplitude
  uint64_t seed = 1;
  int identity_offset = 0;  // first identity id (test splits use a disjoint range)
  std::string split_tag = "train";

  bool operator==(const SynthParams&) const = default;
};

struct Sample {
  Tensor3 image;
  int identity_id = 0;
  std::string name;  // stable "idXXXXX/imgXXX" reference used by pair files
};

struct IdentityDataset {
  std::vector<Sample> samples;
  std::vector<int> identity_ids;  // sorted, unique
  std::string split_tag;
  SynthParams gen_params;  // provenance metadata

  void validate() const;
  std::vector<int> indices_of(int identity) const;
  std::unordered_map<int, std::vector<int>> index_by_identity() const;
};

IdentityDataset synth_identities(const SynthParams& params);

/// Ordered schedule of base + incremental identity sets.
struct StepPlan {
  double base_fraction = 0.5;
  int step_count = 0;
  uint64_t seed = 1;
  bool allow_overlap = false;
  std::vector<int> class_order;  // permutation of the train identities
  std::vector<int> base_identities;
  std::vector<std::vector<int>> step_identity_sets;

  void validate() const;
};

/// Splits identities into a base set of floor(base_fraction*K) plus
/// step_count near-equal sets (disjoint unless allow_overlap). Deterministic
/// for a fixed seed.
StepPlan make_step_plan(const IdentityDataset& dataset, double base_fraction,
                        int step_count, uint64_t seed,
                        bool allow_overlap = false);

/// Epoch-sharded sampler whose every batch carries pairwise-distinct
/// identities. Samples are emitted at most once per epoch; leftovers smaller
/// than one full batch are dropped.
class UniqueIdentityBatcher {
 public:
  UniqueIdentityBatcher(const IdentityDataset& dataset,
                        const std::vector<int>& identities, int batch_size,
                        uint64_t seed);

  // Batches of sample indices for the given epoch; deterministic.
  std::vector<std::vector<int>> epoch_batches(int epoch) const;

  int batch_size() const { return batch_size_; }

 private:
  std::vector<std::vector<int>> samples_per_identity_;
  int batch_size_ = 0;
  uint64_t seed_ = 0;
};

struct VerificationPair {
  int a = 0;
  int b = 0;  // indices into IdentityDataset::samples
  bool genuine = false;
};

struct PairList {
  std::vector<VerificationPair> pairs;
  int skipped_single_image_identities = 0;

  void validate(const IdentityDataset& dataset) const;
};

/// Builds up to genuine_per_identity genuine pairs per identity (identities
/// with a single image are skipped and counted) plus impostor_total impostor
/// pairs, without duplicate unordered pairs, interleaved so contiguous folds
/// stay label-balanced.
PairList build_pairs(const IdentityDataset& dataset, int genuine_per_identity,
                     int impostor_total, uint64_t seed);

/// One pair per line: "name_a<TAB>name_b<TAB>{0|1}".
void save_pairs(const PairList& pairs, const IdentityDataset& dataset,
                const std::string& path);
PairList load_pairs(const IdentityDataset& dataset, const std::string& path);

}  // namespace clface
