#include "bilevel/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace bilevel {

namespace {

void require_same_size(Index a, Index b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": size " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

constexpr double kPivotFloor = 1e-12;

// LU with scaled partial pivoting; rows of `lu` are permuted in place.
struct LuFactor {
  Matrix lu;
  std::vector<Index> perm;

  explicit LuFactor(const Matrix& a) : lu(a), perm(static_cast<std::size_t>(a.rows())) {
    const Index n = a.rows();
    if (a.cols() != n) {
      throw DimensionError("solve_linear: matrix is " + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()));
    }
    if (!a.allFinite()) throw NonFiniteError("solve_linear: matrix has non-finite entries");
    Vector scale(n);
    for (Index i = 0; i < n; ++i) {
      perm[static_cast<std::size_t>(i)] = i;
      scale(i) = lu.row(i).cwiseAbs().maxCoeff();
      if (scale(i) == 0.0) {
        throw SingularSystemError("solve_linear: zero row " + std::to_string(i), 0.0,
                                  static_cast<std::size_t>(i));
      }
    }
    for (Index k = 0; k < n; ++k) {
      Index best = k;
      double best_val = -1.0;
      for (Index i = k; i < n; ++i) {
        const double v = std::abs(lu(i, k)) / scale(i);
        if (v > best_val) {
          best_val = v;
          best = i;
        }
      }
      if (best_val <= kPivotFloor) {
        throw SingularSystemError("solve_linear: scaled pivot " + std::to_string(best_val) +
                                      " at column " + std::to_string(k),
                                  best_val, static_cast<std::size_t>(k));
      }
      if (best != k) {
        lu.row(k).swap(lu.row(best));
        std::swap(scale(k), scale(best));
        std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(best)]);
      }
      for (Index i = k + 1; i < n; ++i) {
        const double f = lu(i, k) / lu(k, k);
        lu(i, k) = f;
        if (f != 0.0) lu.row(i).tail(n - k - 1) -= f * lu.row(k).tail(n - k - 1);
      }
    }
  }

  Vector solve(const Vector& b) const {
    const Index n = lu.rows();
    Vector x(n);
    for (Index i = 0; i < n; ++i) x(i) = b(perm[static_cast<std::size_t>(i)]);
    for (Index i = 0; i < n; ++i) {
      x(i) -= lu.row(i).head(i).dot(x.head(i));
    }
    for (Index i = n - 1; i >= 0; --i) {
      x(i) -= lu.row(i).tail(n - i - 1).dot(x.tail(n - i - 1));
      x(i) /= lu(i, i);
    }
    return x;
  }
};

Vector solve_refined(const LuFactor& f, const Matrix& a, const Vector& b) {
  Vector x = f.solve(b);
  const double target = 1e-8 * std::max(1.0, b.norm());
  for (int pass = 0; pass < 2; ++pass) {
    const Vector r = b - a * x;
    if (r.norm() <= 1e-3 * target) break;
    x += f.solve(r);
  }
  return x;
}

}  // namespace

LinearOperator::LinearOperator(Index rows, Index cols, Apply apply)
    : rows_(rows), cols_(cols), apply_(std::move(apply)) {
  if (rows < 0 || cols < 0) throw DimensionError("LinearOperator: negative dimension");
}

LinearOperator LinearOperator::from_matrix(Matrix m) {
  const Index r = m.rows();
  const Index c = m.cols();
  return LinearOperator(r, c, [m = std::move(m)](const Vector& v) -> Vector { return m * v; });
}

LinearOperator LinearOperator::identity(Index n) {
  return LinearOperator(n, n, [](const Vector& v) { return v; });
}

LinearOperator LinearOperator::zero(Index rows, Index cols) {
  return LinearOperator(rows, cols, [rows](const Vector&) -> Vector { return Vector::Zero(rows); });
}

Vector LinearOperator::operator()(const Vector& v) const {
  require_same_size(v.size(), cols_, "LinearOperator apply");
  Vector out = apply_(v);
  require_same_size(out.size(), rows_, "LinearOperator result");
  return out;
}

Matrix LinearOperator::to_dense() const {
  Matrix m(rows_, cols_);
  Vector e = Vector::Zero(cols_);
  for (Index j = 0; j < cols_; ++j) {
    e(j) = 1.0;
    m.col(j) = (*this)(e);
    e(j) = 0.0;
  }
  return m;
}

LinearOperator LinearOperator::scaled(double t) const {
  return LinearOperator(rows_, cols_, [inner = apply_, t](const Vector& v) -> Vector {
    return t * inner(v);
  });
}

ProjectionSet ProjectionSet::box(Vector lo, Vector hi) {
  require_same_size(lo.size(), hi.size(), "box bounds");
  for (Index i = 0; i < lo.size(); ++i) {
    if (!(lo(i) <= hi(i))) {
      throw std::invalid_argument("box: lo > hi at index " + std::to_string(i));
    }
  }
  return ProjectionSet(Box{std::move(lo), std::move(hi)});
}

ProjectionSet ProjectionSet::ball(Vector center, double radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw std::invalid_argument("ball: radius must be positive and finite");
  }
  return ProjectionSet(Ball{std::move(center), radius});
}

ProjectionSet ProjectionSet::affine(Matrix B, Vector rhs) {
  require_same_size(B.rows(), rhs.size(), "affine constraint rows");
  return ProjectionSet(Affine{std::move(B), std::move(rhs)});
}

bool ProjectionSet::contains(const Vector& p, double slack) const {
  return std::visit(
      [&](const auto& s) -> bool {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, AllSpace>) {
          return true;
        } else if constexpr (std::is_same_v<T, Box>) {
          return ((p - s.lo).array() >= -slack).all() && ((s.hi - p).array() >= -slack).all();
        } else if constexpr (std::is_same_v<T, Ball>) {
          return (p - s.center).norm() <= s.radius + slack;
        } else {
          return (s.B * p - s.rhs).norm() <= slack * std::max(1.0, s.rhs.norm());
        }
      },
      set_);
}

std::string_view to_string(CgStatus s) {
  switch (s) {
    case CgStatus::converged:
      return "converged";
    case CgStatus::max_iter:
      return "max_iter";
    case CgStatus::nonpositive_curvature:
      return "nonpositive_curvature";
  }
  return "unknown";
}

CgResult cg_solve(const LinearOperator& H, const Vector& rhs, double tol, int max_iter) {
  if (!H.square()) throw DimensionError("cg_solve: operator is not square");
  require_same_size(rhs.size(), H.cols(), "cg_solve rhs");
  if (!(tol > 0.0)) throw std::invalid_argument("cg_solve: tol must be positive");
  if (max_iter < 1) throw std::invalid_argument("cg_solve: max_iter must be positive");
  require_finite(rhs, "cg_solve rhs");

  CgResult out;
  out.solution = Vector::Zero(rhs.size());
  Vector r = rhs;
  const double stop = tol * std::max(1.0, rhs.norm());
  double rr = r.squaredNorm();
  out.residual_norm = std::sqrt(rr);
  if (out.residual_norm <= stop) return out;

  Vector p = r;
  for (int it = 0; it < max_iter; ++it) {
    const Vector hp = H(p);
    const double curvature = p.dot(hp);
    if (!std::isfinite(curvature)) throw NonFiniteError("cg_solve: non-finite curvature");
    if (curvature <= kCurvatureFloor * p.squaredNorm()) {
      out.status = CgStatus::nonpositive_curvature;
      return out;
    }
    const double step = rr / curvature;
    out.solution += step * p;
    r -= step * hp;
    out.iterations = it + 1;
    const double rr_next = r.squaredNorm();
    out.residual_norm = std::sqrt(rr_next);
    if (out.residual_norm <= stop) {
      out.status = CgStatus::converged;
      return out;
    }
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  out.status = CgStatus::max_iter;
  return out;
}

Vector solve_linear(const Matrix& A, const Vector& b) {
  require_same_size(A.rows(), b.size(), "solve_linear rhs");
  require_finite(b, "solve_linear rhs");
  const LuFactor f(A);
  Vector x = solve_refined(f, A, b);
  require_finite(x, "solve_linear solution");
  return x;
}

Matrix solve_linear(const Matrix& A, const Matrix& B) {
  require_same_size(A.rows(), B.rows(), "solve_linear rhs");
  const LuFactor f(A);
  Matrix X(A.cols(), B.cols());
  for (Index j = 0; j < B.cols(); ++j) {
    const Vector b = B.col(j);
    require_finite(b, "solve_linear rhs");
    X.col(j) = solve_refined(f, A, b);
  }
  if (!X.allFinite()) throw NonFiniteError("solve_linear: non-finite solution");
  return X;
}

Vector project(const Vector& p, const ProjectionSet& set) {
  return std::visit(
      [&](const auto& s) -> Vector {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, AllSpace>) {
          return p;
        } else if constexpr (std::is_same_v<T, Box>) {
          require_same_size(p.size(), s.lo.size(), "project box");
          return p.cwiseMax(s.lo).cwiseMin(s.hi);
        } else if constexpr (std::is_same_v<T, Ball>) {
          require_same_size(p.size(), s.center.size(), "project ball");
          const Vector offset = p - s.center;
          const double dist = offset.norm();
          if (dist <= s.radius) return p;
          return s.center + (s.radius / dist) * offset;
        } else {
          require_same_size(p.size(), s.B.cols(), "project affine");
          const Vector viol = s.B * p - s.rhs;
          const Matrix gram = s.B * s.B.transpose();
          return p - s.B.transpose() * solve_linear(gram, viol);
        }
      },
      set.variant());
}

void require_finite(const Vector& v, std::string_view what) {
  if (!v.allFinite()) throw NonFiniteError(std::string(what) + ": non-finite entry");
}

}  // namespace bilevel
