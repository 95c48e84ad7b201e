#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "bilevel/problem.hpp"

namespace bilevel {

/// f_u(x, y) = 1/2 x'Px + 1/2 |y|^2,  f_l(x, y) = 1/2 |y - A'x|^2,
/// optionally subject to B y = C x in the lower level. P is diagonal and
/// defaults to the identity; a singular P gives a convex but not strongly
/// convex reduced function.
///
/// A draw of b points adds independent N(0, noise_std^2 / b) noise to each
/// sampled gradient entry; a full draw is noise free. Hessians are exact.
class QuadraticBilevel final : public Problem {
 public:
  struct Options {
    Matrix A;  // n x m
    double noise_std = 0.0;
    /// Diagonal of P (size n); identity when empty.
    Vector ul_weights;
    /// Equality constraints B y = C x; both empty for the unconstrained case.
    Matrix B;  // p x m
    Matrix C;  // p x n
    /// Nominal number of data points behind each expectation.
    std::size_t nominal_size = std::size_t{1} << 20;
    /// Starting x; ones when empty. Starting y is A'x0 projected onto Y(x0).
    Vector x0;
    ProjectionSet x_set = ProjectionSet::all_space();
  };

  explicit QuadraticBilevel(Options opts);

  std::string name() const override { return constrained() ? "quadratic_eq" : "quadratic"; }
  Dims dims() const override { return Dims{a_.rows(), a_.cols()}; }
  DatasetSizes dataset_sizes() const override { return DatasetSizes{nominal_, nominal_}; }
  bool has_hessians() const override { return true; }

  Draw draw(Side side, std::size_t size, std::mt19937_64& engine) const override;
  using Problem::draw;

  LevelEval ul_eval(const Iterate& it, const Draw& w) const override;
  LevelEval ll_eval(const Iterate& it, const Draw& w) const override;
  Vector ll_grad_y(const Iterate& it, const Draw& w) const override;
  Vector ll_grad_x(const Iterate& it, const Draw& w) const override;
  LowerHessians ll_hessians(const Iterate& it, const Draw& w) const override;
  LowerSolve ll_solve_accurate(const Vector& x, double tol) const override;

  ProjectionSet projection_x() const override { return x_set_; }
  ProjectionSet projection_y(const Vector& x) const override;
  const ConstraintSet* constraints() const override { return constrained() ? &cons_ : nullptr; }
  Iterate initial_iterate(StreamSet& streams) const override;

  bool constrained() const { return b_.rows() > 0; }
  const Matrix& A() const { return a_; }
  const Vector& ul_weights() const { return p_; }
  double noise_std() const { return noise_; }

  /// Hessian of the unconstrained reduced function, P + AA'.
  Matrix reduced_hessian() const;

 private:
  Matrix a_;
  Vector p_;
  double noise_;
  Matrix b_;
  Matrix c_;
  std::size_t nominal_;
  Vector x0_;
  ProjectionSet x_set_;
  ConstraintSet cons_;
};

struct QuadClosedForm {
  Vector y;
  double f = 0.0;
  Vector grad;
};

/// y(x) = A'x, f(x) = 1/2 x'Px + 1/2 |A'x|^2, grad f = (P + AA')x.
/// Throws UnsupportedConstraintError on a constrained instance.
QuadClosedForm quad_closed_form(const QuadraticBilevel& q, const Vector& x);

}  // namespace bilevel
