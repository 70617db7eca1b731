#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace clface {

// Dense (channels, height, width) array, row-major, double precision.
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w)
      : channels(c),
        height(h),
        width(w),
        data(static_cast<size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }

  size_t size() const { return data.size(); }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const Vec& v) { return std::sqrt(dot(v, v)); }

// v / max(||v||, eps); an all-zero vector stays zero instead of producing NaN.
inline Vec l2_normalize(const Vec& v, double eps = 1e-12) {
  const double denom = std::max(l2_norm(v), eps);
  Vec out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / denom;
  return out;
}

inline bool all_finite(const Vec& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace clface
