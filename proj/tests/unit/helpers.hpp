#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "illusion/linalg.hpp"
#include "illusion/synthdata.hpp"

namespace testing {

using illusion::Mat;
using illusion::Vec;

inline Vec random_vec(std::mt19937_64& rng, int n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline Mat random_mat(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = g(rng);
  return m;
}

/// Central differences of a scalar function.
inline Vec numeric_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const Vec& a, const Vec& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-300});
}

/// Small dataset shared by the tests that need fitted models.
inline const illusion::Dataset& small_dataset() {
  static const illusion::Dataset d = [] {
    illusion::DataConfig cfg;
    cfg.num_classes = 6;
    cfg.height = 8;
    cfg.width = 8;
    cfg.embed_dim = 16;
    cfg.train_per_class = 20;
    cfg.eval_per_class = 3;
    cfg.prototype_smoothing_std = 1.0;
    return illusion::generate_dataset(cfg);
  }();
  return d;
}

inline const illusion::Dataset& desk_dataset() {
  static const illusion::Dataset d = illusion::generate_dataset(illusion::DataConfig{});
  return d;
}

}  // namespace testing
