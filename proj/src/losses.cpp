#include "clface/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "clface/errors.hpp"

namespace clface {

void LossConfig::validate() const {
  if (tau <= 0.0) throw ConfigError("loss temperature tau must be positive");
  if (epsilon <= 0.0) throw ConfigError("loss epsilon must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
    throw ConfigError("loss weights must be nonnegative");
  }
}

Vec pool_normalize(const Tensor3& stage_map, double eps) {
  const int C = stage_map.channels, H = stage_map.height, W = stage_map.width;
  Vec pooled(static_cast<size_t>(H) * W, 0.0);
  const double inv_c = 1.0 / C;
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        pooled[static_cast<size_t>(y) * W + x] += stage_map.at(c, y, x) * inv_c;
      }
    }
  }
  return l2_normalize(pooled, eps);
}

namespace {

void check_stacks(const std::vector<FeatureStack>& student,
                  const std::vector<FeatureStack>& teacher) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ValidationError("student/teacher stacks must be nonempty and equal-sized");
  }
  for (size_t i = 0; i < student.size(); ++i) {
    if (student[i].stage_maps.size() != teacher[i].stage_maps.size() ||
        student[i].stage_maps.size() < 2) {
      throw ValidationError("feature stacks need matching stage counts >= 2");
    }
    for (size_t l = 0; l < student[i].stage_maps.size(); ++l) {
      if (!student[i].stage_maps[l].same_shape(teacher[i].stage_maps[l])) {
        throw ValidationError("stage map shape mismatch between student and teacher");
      }
    }
  }
}

void check_embeddings(const std::vector<Vec>& student,
                      const std::vector<Vec>& teacher) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ValidationError("student/teacher embeddings must be nonempty and equal-sized");
  }
  for (size_t i = 0; i < student.size(); ++i) {
    if (student[i].size() != teacher[i].size()) {
      throw ValidationError("embedding dimension mismatch");
    }
  }
}

}  // namespace

double msfd_loss(const std::vector<FeatureStack>& student,
                 const std::vector<FeatureStack>& teacher, double eps) {
  check_stacks(student, teacher);
  const size_t N = student.size();
  const size_t L = student[0].stage_maps.size();
  double acc = 0.0;
  for (size_t i = 0; i < N; ++i) {
    for (size_t l = 1; l < L; ++l) {  // stages 2..L
      const Vec us = pool_normalize(student[i].stage_maps[l], eps);
      const Vec ut = pool_normalize(teacher[i].stage_maps[l], eps);
      for (size_t k = 0; k < us.size(); ++k) {
        const double d = ut[k] - us[k];
        acc += d * d;
      }
    }
  }
  return acc / (static_cast<double>(N) * (L - 1));
}

double msfd_loss_with_grads(const std::vector<FeatureStack>& student,
                            const std::vector<FeatureStack>& teacher,
                            std::vector<std::vector<Tensor3>>& d_student,
                            double eps) {
  check_stacks(student, teacher);
  const size_t N = student.size();
  const size_t L = student[0].stage_maps.size();
  const double scale = 1.0 / (static_cast<double>(N) * (L - 1));

  d_student.assign(N, {});
  double acc = 0.0;
  for (size_t i = 0; i < N; ++i) {
    d_student[i].resize(L);
    for (size_t l = 0; l < L; ++l) {
      const Tensor3& map = student[i].stage_maps[l];
      d_student[i][l] = Tensor3(map.channels, map.height, map.width);
      if (l == 0) continue;

      // u = normalize(flatten(channel mean)); loss term ||u_t - u_s||^2.
      const int C = map.channels, H = map.height, W = map.width;
      Vec pooled(static_cast<size_t>(H) * W, 0.0);
      const double inv_c = 1.0 / C;
      for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            pooled[static_cast<size_t>(y) * W + x] += map.at(c, y, x) * inv_c;
          }
        }
      }
      const double norm = l2_norm(pooled);
      const Vec us = l2_normalize(pooled, eps);
      const Vec ut = pool_normalize(teacher[i].stage_maps[l], eps);

      Vec g_u(us.size());
      for (size_t k = 0; k < us.size(); ++k) {
        const double d = ut[k] - us[k];
        acc += d * d;
        g_u[k] = scale * 2.0 * (us[k] - ut[k]);
      }

      // Through the normalization (constant when the pooled map is ~zero),
      // then spread the per-pixel gradient evenly over channels.
      Vec g_pooled(us.size(), 0.0);
      if (norm > eps) {
        const double u_dot_g = dot(us, g_u);
        for (size_t k = 0; k < us.size(); ++k) {
          g_pooled[k] = (g_u[k] - u_dot_g * us[k]) / norm;
        }
      }
      Tensor3& g_map = d_student[i][l];
      for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            g_map.at(c, y, x) = g_pooled[static_cast<size_t>(y) * W + x] * inv_c;
          }
        }
      }
    }
  }
  return acc * scale;
}

double gpkd_loss(const std::vector<Vec>& student_embs,
                 const std::vector<Vec>& teacher_embs, double eps) {
  check_embeddings(student_embs, teacher_embs);
  const size_t N = student_embs.size();
  double acc = 0.0;
  for (size_t i = 0; i < N; ++i) {
    acc += 1.0 - dot(l2_normalize(teacher_embs[i], eps),
                     l2_normalize(student_embs[i], eps));
  }
  return acc / static_cast<double>(N);
}

double gpkd_loss_with_grads(const std::vector<Vec>& student_embs,
                            const std::vector<Vec>& teacher_embs,
                            std::vector<Vec>& d_student, double eps) {
  check_embeddings(student_embs, teacher_embs);
  const size_t N = student_embs.size();
  d_student.assign(N, Vec(student_embs[0].size(), 0.0));
  double acc = 0.0;
  for (size_t i = 0; i < N; ++i) {
    const double s_len = l2_norm(student_embs[i]);
    const Vec s = l2_normalize(student_embs[i], eps);
    const Vec t = l2_normalize(teacher_embs[i], eps);
    const double c = dot(t, s);
    acc += 1.0 - c;
    if (s_len > eps) {
      for (size_t k = 0; k < s.size(); ++k) {
        d_student[i][k] = -(t[k] - c * s[k]) / (s_len * static_cast<double>(N));
      }
    }
  }
  return acc / static_cast<double>(N);
}

double ckd_loss(const std::vector<Vec>& student_embs,
                const std::vector<Vec>& teacher_embs, double tau, double eps) {
  if (tau <= 0.0) throw ConfigError("ckd temperature must be positive");
  check_embeddings(student_embs, teacher_embs);
  const size_t B = student_embs.size();
  std::vector<Vec> t_norm(B), s_norm(B);
  for (size_t i = 0; i < B; ++i) {
    t_norm[i] = l2_normalize(teacher_embs[i], eps);
    s_norm[i] = l2_normalize(student_embs[i], eps);
  }
  double acc = 0.0;
  for (size_t i = 0; i < B; ++i) {
    Vec z(B);
    for (size_t k = 0; k < B; ++k) z[k] = dot(s_norm[i], t_norm[k]) / tau;
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (size_t k = 0; k < B; ++k) denom += std::exp(z[k] - zmax);
    acc += std::log(denom) - (z[i] - zmax);
  }
  return acc / static_cast<double>(B);
}

double ckd_loss_with_grads(const std::vector<Vec>& student_embs,
                           const std::vector<Vec>& teacher_embs, double tau,
                           std::vector<Vec>& d_student, double eps) {
  if (tau <= 0.0) throw ConfigError("ckd temperature must be positive");
  check_embeddings(student_embs, teacher_embs);
  const size_t B = student_embs.size();
  const size_t d = student_embs[0].size();

  std::vector<Vec> t_norm(B);
  for (size_t i = 0; i < B; ++i) t_norm[i] = l2_normalize(teacher_embs[i], eps);

  d_student.assign(B, Vec(d, 0.0));
  double acc = 0.0;
  for (size_t i = 0; i < B; ++i) {
    const double s_len = l2_norm(student_embs[i]);
    const Vec s = l2_normalize(student_embs[i], eps);

    Vec z(B);
    for (size_t k = 0; k < B; ++k) z[k] = dot(s, t_norm[k]) / tau;
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (size_t k = 0; k < B; ++k) denom += std::exp(z[k] - zmax);
    acc += std::log(denom) - (z[i] - zmax);

    // d/ds_hat = (sum_k p_k t_k - t_i) / (B*tau), then through normalize.
    Vec g_hat(d, 0.0);
    for (size_t k = 0; k < B; ++k) {
      const double p = std::exp(z[k] - zmax) / denom;
      const double w = (p - (k == i ? 1.0 : 0.0)) / (tau * static_cast<double>(B));
      for (size_t q = 0; q < d; ++q) g_hat[q] += w * t_norm[k][q];
    }
    if (s_len > eps) {
      const double s_dot_g = dot(s, g_hat);
      for (size_t q = 0; q < d; ++q) {
        d_student[i][q] = (g_hat[q] - s_dot_g * s[q]) / s_len;
      }
    }
  }
  return acc / static_cast<double>(B);
}

namespace {
void check_logit_labels(const std::vector<Vec>& logits,
                        const std::vector<int>& labels) {
  if (logits.empty() || logits.size() != labels.size()) {
    throw ValidationError("logits/labels must be nonempty and equal-sized");
  }
  const size_t K = logits[0].size();
  for (size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != K) throw ValidationError("ragged logits");
    if (labels[i] < 0 || labels[i] >= static_cast<int>(K)) {
      throw std::out_of_range("label out of range");
    }
  }
}
}  // namespace

double id_margin_loss(const std::vector<Vec>& logits,
                      const std::vector<int>& labels) {
  check_logit_labels(logits, labels);
  const size_t B = logits.size();
  double acc = 0.0;
  for (size_t i = 0; i < B; ++i) {
    const double zmax = *std::max_element(logits[i].begin(), logits[i].end());
    double denom = 0.0;
    for (double z : logits[i]) denom += std::exp(z - zmax);
    acc += std::log(denom) - (logits[i][labels[i]] - zmax);
  }
  return acc / static_cast<double>(B);
}

double id_margin_loss_with_grads(const std::vector<Vec>& logits,
                                 const std::vector<int>& labels,
                                 std::vector<Vec>& d_logits) {
  check_logit_labels(logits, labels);
  const size_t B = logits.size();
  const size_t K = logits[0].size();
  d_logits.assign(B, Vec(K, 0.0));
  double acc = 0.0;
  for (size_t i = 0; i < B; ++i) {
    const double zmax = *std::max_element(logits[i].begin(), logits[i].end());
    double denom = 0.0;
    for (double z : logits[i]) denom += std::exp(z - zmax);
    acc += std::log(denom) - (logits[i][labels[i]] - zmax);
    for (size_t j = 0; j < K; ++j) {
      const double p = std::exp(logits[i][j] - zmax) / denom;
      d_logits[i][j] =
          (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / B;
    }
  }
  return acc / static_cast<double>(B);
}

LossBreakdown total_loss(double msfd, double gpkd, double ckd,
                         std::optional<double> id, const LossConfig& config) {
  config.validate();
  LossBreakdown b;
  b.msfd = msfd;
  b.gpkd = gpkd;
  b.ckd = ckd;
  b.id = id;
  b.total = config.lambda1 * msfd + config.lambda2 * gpkd + config.lambda3 * ckd;
  if (id.has_value()) b.total += *id;
  return b;
}

}  // namespace clface
