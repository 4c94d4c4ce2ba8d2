// Shared helpers for the test suites: random tensors, finite-difference
// oracles, and scalar reference implementations kept independent of the
// library paths they check.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dst/random.hpp"
#include "dst/tensor.hpp"

namespace testutil {

inline dst::Tensor random_tensor(dst::Shape shape, dst::Rng& rng, double lo = -1.0, double hi = 1.0) {
  dst::Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Central finite differences of f with respect to x, all coordinates.
inline dst::Tensor finite_diff(const std::function<double(const dst::Tensor&)>& f, dst::Tensor x,
                               double step = 1e-6) {
  dst::Tensor g(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) {
    double orig = x.data[i];
    x.data[i] = orig + step;
    double up = f(x);
    x.data[i] = orig - step;
    double down = f(x);
    x.data[i] = orig;
    g.data[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double max_rel_err(const dst::Tensor& a, const dst::Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double scale = std::max({std::abs(a.data[i]), std::abs(b.data[i]), 1e-2});
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / scale);
  }
  return worst;
}

// Normalized random probability rows (strictly positive entries).
inline dst::Tensor random_prob_rows(int64_t b, int64_t k, dst::Rng& rng) {
  dst::Tensor t({b, k});
  for (int64_t i = 0; i < b; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      double v = 0.05 + rng.uniform();
      t.at2(i, j) = v;
      sum += v;
    }
    for (int64_t j = 0; j < k; ++j) t.at2(i, j) /= sum;
  }
  return t;
}

}  // namespace testutil
