#pragma once

#include <optional>
#include <vector>

#include "clface/model.hpp"
#include "clface/tensor.hpp"

namespace clface {

/// Weights and knobs of the distillation objective.
struct LossConfig {
  double lambda1 = 3.0;   // multiscale feature distillation weight
  double lambda2 = 12.0;  // geometry-preserving distillation weight
  double lambda3 = 1.0;   // contrastive distillation weight
  double tau = 2.0;       // contrastive temperature
  bool include_id_loss = false;
  double epsilon = 1e-12;  // safe-normalization guard

  void validate() const;
};

struct LossBreakdown {
  double msfd = 0.0;
  double gpkd = 0.0;
  double ckd = 0.0;
  std::optional<double> id;
  double total = 0.0;
};

/// Channel-mean map flattened to length H*W, then L2-normalized. An all-zero
/// pooled map yields the zero vector rather than NaN.
Vec pool_normalize(const Tensor3& stage_map, double eps = 1e-12);

/// Mean over samples and stages 2..L of the squared distance between
/// pool_normalize() of teacher and student maps. Stage 1 never contributes.
double msfd_loss(const std::vector<FeatureStack>& student,
                 const std::vector<FeatureStack>& teacher, double eps = 1e-12);

/// Same value; also fills d_student[i][l] = dL/d(student stage map l of
/// sample i). Stage 1 gradients are zero tensors.
double msfd_loss_with_grads(const std::vector<FeatureStack>& student,
                            const std::vector<FeatureStack>& teacher,
                            std::vector<std::vector<Tensor3>>& d_student,
                            double eps = 1e-12);

/// Mean of 1 - cos(teacher_i, student_i) over L2-normalized embeddings.
double gpkd_loss(const std::vector<Vec>& student_embs,
                 const std::vector<Vec>& teacher_embs, double eps = 1e-12);

double gpkd_loss_with_grads(const std::vector<Vec>& student_embs,
                            const std::vector<Vec>& teacher_embs,
                            std::vector<Vec>& d_student, double eps = 1e-12);

/// InfoNCE-style contrastive distillation: the teacher embedding of the same
/// row is the positive, the other teacher rows are the negatives. Embeddings
/// are L2-normalized internally; rows must hold unique identities.
/// Throws ConfigError for tau <= 0.
double ckd_loss(const std::vector<Vec>& student_embs,
                const std::vector<Vec>& teacher_embs, double tau,
                double eps = 1e-12);

double ckd_loss_with_grads(const std::vector<Vec>& student_embs,
                           const std::vector<Vec>& teacher_embs, double tau,
                           std::vector<Vec>& d_student, double eps = 1e-12);

/// Mean softmax cross-entropy over precomputed (margin) logits.
/// Throws std::out_of_range for labels outside [0, K).
double id_margin_loss(const std::vector<Vec>& logits,
                      const std::vector<int>& labels);

double id_margin_loss_with_grads(const std::vector<Vec>& logits,
                                 const std::vector<int>& labels,
                                 std::vector<Vec>& d_logits);

/// total = lambda1*msfd + lambda2*gpkd + lambda3*ckd (+ id when enabled).
LossBreakdown total_loss(double msfd, double gpkd, double ckd,
                         std::optional<double> id, const LossConfig& config);

}  // namespace clface
