#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "bilevel/linalg.hpp"

namespace testing {

using bilevel::Index;
using bilevel::Matrix;
using bilevel::Vector;

inline Vector random_vector(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

inline Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j) {
    for (Index i = 0; i < r; ++i) m(i, j) = g(rng);
  }
  return m;
}

inline Matrix random_spd(Index n, std::mt19937_64& rng) {
  const Matrix g = random_matrix(n, n, rng);
  return g * g.transpose() / static_cast<double>(n) + 0.5 * Matrix::Identity(n, n);
}

/// Central difference of a scalar function along coordinate i.
inline double fd_partial(const std::function<double(const Vector&)>& f, const Vector& x, Index i,
                         double h) {
  Vector a = x;
  Vector b = x;
  a(i) += h;
  b(i) -= h;
  return (f(a) - f(b)) / (2.0 * h);
}

inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                          double h) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) g(i) = fd_partial(f, x, i, h);
  return g;
}

inline double rel_err(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1e-300, b.norm());
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(b));
}

}  // namespace testing
