#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "clface/tensor.hpp"

namespace clface {

/// Architecture descriptor of the multi-stage feature extractor.
///
/// Each stage is conv3x3 (pad 1) -> ReLU -> 2x average pool, so every stage
/// halves the spatial dimensions; the final stage output is globally average
/// pooled and projected to the embedding.
struct BackboneSpec {
  int stage_count = 0;
  std::vector<int> channels_per_stage;
  std::vector<std::pair<int, int>> spatial_dims_per_stage;  // (H_l, W_l) per stage output
  int embedding_dim = 0;
  std::array<int, 3> input_shape{0, 0, 0};  // (C, H, W)

  // Derives the per-stage spatial dims from the input shape and validates.
  static BackboneSpec make(std::array<int, 3> input_shape,
                           std::vector<int> channels, int embedding_dim);
  void validate() const;

  bool operator==(const BackboneSpec&) const = default;
};

/// Per-sample intermediate feature maps plus the final embedding.
struct FeatureStack {
  std::vector<Tensor3> stage_maps;
  Vec embedding;
};

struct ConvParams {
  int in_ch = 0;
  int out_ch = 0;
  Vec weight;  // (out_ch, in_ch, 3, 3)
  Vec bias;    // (out_ch)
};

struct LinearParams {
  int in_dim = 0;
  int out_dim = 0;
  Vec weight;  // (out_dim, in_dim)
  Vec bias;    // (out_dim)
};

/// Flat named parameter collection for one backbone.
struct Parameters {
  std::vector<ConvParams> stages;
  LinearParams fc;

  static Parameters zeros_like(const BackboneSpec& spec);

  size_t count() const;

  // Named views in a fixed canonical order (stage1.weight, stage1.bias, ...,
  // fc.weight, fc.bias). The order defines checkpoint layout and checksums.
  std::vector<std::pair<std::string, Vec*>> named();
  std::vector<std::pair<std::string, const Vec*>> named() const;
};

/// A model with parameters, a step counter and a freeze flag. Frozen
/// snapshots refuse mutable parameter access, which is what makes the
/// teacher side of distillation trustworthy.
class ModelSnapshot {
 public:
  ModelSnapshot() = default;

  // Variance-scaled random init (He for convs, 1/sqrt(fan_in) for the fc).
  ModelSnapshot(const BackboneSpec& spec, uint64_t init_seed);

  static ModelSnapshot from_parts(BackboneSpec spec, Parameters params,
                                  int step_index, bool frozen);

  const BackboneSpec& spec() const { return spec_; }
  int step_index() const { return step_index_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  const Parameters& params() const { return params_; }
  Parameters& mutable_params();  // throws TrainError when frozen

  // FNV-1a over the parameter payload in canonical order.
  uint64_t checksum() const;

 private:
  BackboneSpec spec_;
  Parameters params_;
  int step_index_ = 0;
  bool frozen_ = false;
};

/// Copy of the teacher with frozen = false and step_index + 1.
ModelSnapshot clone_as_student(const ModelSnapshot& teacher);

/// Runs the backbone over a batch. Deterministic for fixed parameters.
/// Throws ShapeError on input-shape mismatch, ValidationError on non-finite
/// input.
std::vector<FeatureStack> forward(const ModelSnapshot& model,
                                  const std::vector<Tensor3>& batch);

/// Forward pass for a single sample with the intermediate state needed by
/// backward().
struct ForwardCache {
  Tensor3 input;
  std::vector<Tensor3> conv_pre;  // pre-activation per stage
  FeatureStack stack;             // post-pool stage maps + embedding
  Vec pooled;                     // globally pooled final stage (fc input)
};
ForwardCache forward_cached(const ModelSnapshot& model, const Tensor3& image);

/// Accumulates parameter gradients for one sample into `grad`.
/// `stage_grads[l]` is dL/d(stage map l); an empty (default) tensor means
/// zero. `emb_grad` is dL/d(embedding) and may be empty.
void backward(const ModelSnapshot& model, const ForwardCache& cache,
              const std::vector<Tensor3>& stage_grads, const Vec& emb_grad,
              Parameters& grad);

// ---------------------------------------------------------------------------
// Margin classification head (used for base training and baselines only).
// ---------------------------------------------------------------------------

struct MarginHeadConfig {
  int num_classes = 0;
  double scale_s = 64.0;
  double margin_m = 0.5;  // radians, applied to the target-class angle only
  void validate() const;
};

struct MarginHead {
  MarginHeadConfig config;
  int embedding_dim = 0;
  Vec weight;  // (num_classes, embedding_dim)

  MarginHead() = default;
  MarginHead(MarginHeadConfig cfg, int embedding_dim, uint64_t seed);
};

/// Additive angular margin logits: s*cos(angle_j + m*[j == label]).
/// Embeddings and class weights are L2-normalized internally.
/// Throws std::out_of_range for labels outside [0, num_classes).
std::vector<Vec> margin_logits(const MarginHead& head,
                               const std::vector<Vec>& embeddings,
                               const std::vector<int>& labels);

/// Mean softmax cross-entropy over margin logits, with analytic gradients
/// w.r.t. the (raw) embeddings and the head weights.
struct MarginLossGrads {
  double loss = 0.0;
  std::vector<Vec> d_embeddings;
  Vec d_weight;
};
MarginLossGrads margin_ce_with_grads(const MarginHead& head,
                                     const std::vector<Vec>& embeddings,
                                     const std::vector<int>& labels);

}  // namespace clface
