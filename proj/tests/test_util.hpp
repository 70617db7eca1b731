#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "clface/model.hpp"
#include "clface/rng.hpp"
#include "clface/tensor.hpp"

namespace testutil {

inline clface::Tensor3 random_tensor(clface::Rng& rng, int c, int h, int w,
                                     double scale = 1.0) {
  clface::Tensor3 t(c, h, w);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

inline clface::Vec random_vec(clface::Rng& rng, int n, double scale = 1.0) {
  clface::Vec v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Central finite difference over every coordinate of `x`, compared against
// `analytic` with relative error |a-n| / max(|a|, |n|, floor).
struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t worst_index = 0;
};

inline GradCheckResult fd_check(std::vector<double>& x,
                                const clface::Vec& analytic,
                                const std::function<double()>& eval,
                                double h = 1e-5, double floor = 1e-3) {
  GradCheckResult r;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = eval();
    x[i] = orig - h;
    const double fm = eval();
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom =
        std::max({std::fabs(numeric), std::fabs(analytic[i]), floor});
    const double rel = std::fabs(numeric - analytic[i]) / denom;
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace testutil
