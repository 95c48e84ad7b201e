#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string_view>
#include <variant>

#include "bilevel/errors.hpp"

namespace bilevel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Matrix-free linear map R^cols -> R^rows.
///
/// Square operators stand for Hessian blocks (H_yy); rectangular ones for
/// cross blocks such as v -> H_xy v. Linearity is the producer's contract.
class LinearOperator {
 public:
  using Apply = std::function<Vector(const Vector&)>;

  LinearOperator() = default;
  LinearOperator(Index rows, Index cols, Apply apply);

  static LinearOperator from_matrix(Matrix m);
  static LinearOperator identity(Index n);
  static LinearOperator zero(Index rows, Index cols);

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  /// Throws DimensionError when `v.size() != cols()`.
  Vector operator()(const Vector& v) const;

  /// Dense materialization, one apply per column.
  Matrix to_dense() const;

  /// t * A as a new operator.
  LinearOperator scaled(double t) const;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  Apply apply_;
};

struct AllSpace {};

struct Box {
  Vector lo;
  Vector hi;
};

struct Ball {
  Vector center;
  double radius = 1.0;
};

/// {y : B y = rhs}; B must have full row rank.
struct Affine {
  Matrix B;
  Vector rhs;
};

/// Closed convex set used for P_X and P_Y(x).
class ProjectionSet {
 public:
  ProjectionSet() = default;

  static ProjectionSet all_space() { return ProjectionSet{}; }
  static ProjectionSet box(Vector lo, Vector hi);
  static ProjectionSet ball(Vector center, double radius);
  static ProjectionSet affine(Matrix B, Vector rhs);

  bool is_all_space() const { return std::holds_alternative<AllSpace>(set_); }
  const std::variant<AllSpace, Box, Ball, Affine>& variant() const { return set_; }

  /// Membership up to an absolute slack.
  bool contains(const Vector& p, double slack = 1e-10) const;

 private:
  explicit ProjectionSet(std::variant<AllSpace, Box, Ball, Affine> s) : set_(std::move(s)) {}

  std::variant<AllSpace, Box, Ball, Affine> set_;
};

enum class CgStatus { converged, max_iter, nonpositive_curvature };

std::string_view to_string(CgStatus s);

struct CgResult {
  Vector solution;
  CgStatus status = CgStatus::converged;
  int iterations = 0;
  double residual_norm = 0.0;
};

/// Curvature along p counts as non-positive when p'Hp <= this * |p|^2.
inline constexpr double kCurvatureFloor = 1e-12;

/// Linear CG from x0 = 0 on H x = rhs.
///
/// Stops when |H x - rhs| <= tol * max(1, |rhs|), after `max_iter` steps, or
/// when a search direction p has p'Hp <= kCurvatureFloor * |p|^2. In the last
/// case the iterate built before p is returned (zero if p was the first
/// direction).
CgResult cg_solve(const LinearOperator& H, const Vector& rhs, double tol, int max_iter);

/// Scaled partial pivoting elimination. Throws SingularSystemError when a
/// scaled pivot falls to 1e-12 or below.
Vector solve_linear(const Matrix& A, const Vector& b);

/// Column-by-column solve_linear with a single factorization.
Matrix solve_linear(const Matrix& A, const Matrix& B);

/// Euclidean projection onto `set`.
Vector project(const Vector& p, const ProjectionSet& set);

/// Throws NonFiniteError naming `what` if any entry is NaN/Inf.
void require_finite(const Vector& v, std::string_view what);

}  // namespace bilevel
