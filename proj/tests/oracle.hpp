#pragma once

// Unvectorized scalar-loop reference implementations, written directly from
// the loss definitions and kept independent of the library code paths they
// check. Everything here trades speed for obviousness.

#include <cmath>
#include <vector>

#include "clface/model.hpp"
#include "clface/tensor.hpp"

namespace oracle {

inline std::vector<double> pool_normalize_ref(const clface::Tensor3& map,
                                              double eps = 1e-12) {
  std::vector<double> pooled(static_cast<size_t>(map.height) * map.width, 0.0);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      double s = 0.0;
      for (int c = 0; c < map.channels; ++c) s += map.at(c, y, x);
      pooled[static_cast<size_t>(y) * map.width + x] = s / map.channels;
    }
  }
  double norm = 0.0;
  for (double v : pooled) norm += v * v;
  norm = std::sqrt(norm);
  const double denom = norm > eps ? norm : eps;
  for (double& v : pooled) v /= denom;
  return pooled;
}

inline double msfd_ref(const std::vector<clface::FeatureStack>& student,
                       const std::vector<clface::FeatureStack>& teacher) {
  const size_t N = student.size();
  const size_t L = student[0].stage_maps.size();
  double total = 0.0;
  for (size_t i = 0; i < N; ++i) {
    for (size_t l = 1; l < L; ++l) {
      const auto us = pool_normalize_ref(student[i].stage_maps[l]);
      const auto ut = pool_normalize_ref(teacher[i].stage_maps[l]);
      double d2 = 0.0;
      for (size_t k = 0; k < us.size(); ++k) {
        d2 += (ut[k] - us[k]) * (ut[k] - us[k]);
      }
      total += d2;
    }
  }
  return total / (static_cast<double>(N) * static_cast<double>(L - 1));
}

inline std::vector<double> normalize_ref(const std::vector<double>& v,
                                         double eps = 1e-12) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  const double denom = norm > eps ? norm : eps;
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / denom;
  return out;
}

inline double gpkd_ref(const std::vector<clface::Vec>& student,
                       const std::vector<clface::Vec>& teacher) {
  double total = 0.0;
  for (size_t i = 0; i < student.size(); ++i) {
    const auto s = normalize_ref(student[i]);
    const auto t = normalize_ref(teacher[i]);
    double cos = 0.0;
    for (size_t k = 0; k < s.size(); ++k) cos += s[k] * t[k];
    total += 1.0 - cos;
  }
  return total / static_cast<double>(student.size());
}

// Plain double loop straight from the definition; no max-subtraction, which
// is fine at the oracle's tau range.
inline double ckd_ref(const std::vector<clface::Vec>& student,
                      const std::vector<clface::Vec>& teacher, double tau) {
  const size_t B = student.size();
  double total = 0.0;
  for (size_t i = 0; i < B; ++i) {
    const auto si = normalize_ref(student[i]);
    const auto ti = normalize_ref(teacher[i]);
    double pos = 0.0;
    for (size_t k = 0; k < si.size(); ++k) pos += si[k] * ti[k];
    double denom = 0.0;
    for (size_t j = 0; j < B; ++j) {
      const auto tj = normalize_ref(teacher[j]);
      double sim = 0.0;
      for (size_t k = 0; k < si.size(); ++k) sim += si[k] * tj[k];
      denom += std::exp(sim / tau);
    }
    total += -std::log(std::exp(pos / tau) / denom);
  }
  return total / static_cast<double>(B);
}

inline double softmax_ce_ref(const std::vector<clface::Vec>& logits,
                             const std::vector<int>& labels) {
  double total = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double denom = 0.0;
    for (double z : logits[i]) denom += std::exp(z);
    total += -std::log(std::exp(logits[i][labels[i]]) / denom);
  }
  return total / static_cast<double>(logits.size());
}

}  // namespace oracle
