#include "bilevel/instances/quadratic.hpp"

#include <cmath>

namespace bilevel {

namespace {

Vector noise_part(const Draw& w, Index offset, Index len) {
  if (w.noise.size() == 0) return Vector::Zero(len);
  return w.noise.segment(offset, len);
}

}  // namespace

QuadraticBilevel::QuadraticBilevel(Options opts)
    : a_(std::move(opts.A)),
      p_(std::move(opts.ul_weights)),
      noise_(opts.noise_std),
      b_(std::move(opts.B)),
      c_(std::move(opts.C)),
      nominal_(opts.nominal_size),
      x0_(std::move(opts.x0)),
      x_set_(std::move(opts.x_set)) {
  const Index n = a_.rows();
  const Index m = a_.cols();
  if (n < 1 || m < 1) throw DimensionError("QuadraticBilevel: A must be non-empty");
  if (!a_.allFinite()) throw NonFiniteError("QuadraticBilevel: A has non-finite entries");
  if (!(noise_ >= 0.0) || !std::isfinite(noise_)) {
    throw std::invalid_argument("QuadraticBilevel: noise_std must be >= 0");
  }
  if (nominal_ < 1) throw std::invalid_argument("QuadraticBilevel: nominal_size must be >= 1");
  if (p_.size() == 0) p_ = Vector::Ones(n);
  if (p_.size() != n) throw DimensionError("QuadraticBilevel: ul_weights must have size n");
  if ((p_.array() < 0.0).any()) {
    throw std::invalid_argument("QuadraticBilevel: ul_weights must be nonnegative");
  }
  if (x0_.size() == 0) x0_ = Vector::Ones(n);
  if (x0_.size() != n) throw DimensionError("QuadraticBilevel: x0 must have size n");

  if (b_.rows() > 0 || c_.rows() > 0) {
    if (b_.rows() != c_.rows() || b_.cols() != m || c_.cols() != n) {
      throw DimensionError("QuadraticBilevel: B must be p x m and C p x n");
    }
    if (b_.rows() >= m) {
      throw std::invalid_argument("QuadraticBilevel: need fewer constraints than m");
    }
    std::vector<Constraint> items;
    for (Index i = 0; i < b_.rows(); ++i) {
      Constraint c;
      c.kind = ConstraintKind::equality;
      c.eval = [brow = Vector(b_.row(i).transpose()), crow = Vector(c_.row(i).transpose())](
                   const Vector& x, const Vector& y) {
        return ConstraintEval{brow.dot(y) - crow.dot(x), -crow, brow};
      };
      items.push_back(std::move(c));
    }
    cons_ = ConstraintSet(std::move(items), n, m);
    if (!cons_.licq_holds(x0_, Vector::Zero(m))) {
      throw std::invalid_argument("QuadraticBilevel: B must have full row rank");
    }
  }
}

Draw QuadraticBilevel::draw(Side, std::size_t size, std::mt19937_64& engine) const {
  if (size == 0) throw std::invalid_argument("draw: batch size must be positive");
  Draw d;
  if (size >= nominal_) {
    d.size = nominal_;
    d.full = true;
    return d;
  }
  d.size = size;
  const Index len = a_.rows() + a_.cols();
  d.noise.resize(len);
  if (noise_ == 0.0) {
    d.noise.setZero();
    return d;
  }
  std::normal_distribution<double> normal(0.0, noise_ / std::sqrt(static_cast<double>(size)));
  for (Index i = 0; i < len; ++i) d.noise(i) = normal(engine);
  return d;
}

LevelEval QuadraticBilevel::ul_eval(const Iterate& it, const Draw& w) const {
  const Index n = a_.rows();
  const Index m = a_.cols();
  LevelEval e;
  e.value = 0.5 * it.x.dot(p_.cwiseProduct(it.x)) + 0.5 * it.y.squaredNorm();
  e.gx = p_.cwiseProduct(it.x) + noise_part(w, 0, n);
  e.gy = it.y + noise_part(w, n, m);
  return e;
}

LevelEval QuadraticBilevel::ll_eval(const Iterate& it, const Draw& w) const {
  const Index n = a_.rows();
  const Index m = a_.cols();
  const Vector r = it.y - a_.transpose() * it.x;
  LevelEval e;
  e.value = 0.5 * r.squaredNorm();
  e.gx = -(a_ * r) + noise_part(w, 0, n);
  e.gy = r + noise_part(w, n, m);
  return e;
}

Vector QuadraticBilevel::ll_grad_y(const Iterate& it, const Draw& w) const {
  Vector g = it.y - a_.transpose() * it.x;
  if (w.noise.size() > 0) g += w.noise.tail(a_.cols());
  return g;
}

Vector QuadraticBilevel::ll_grad_x(const Iterate& it, const Draw& w) const {
  Vector g = -(a_ * (it.y - a_.transpose() * it.x));
  if (w.noise.size() > 0) g += w.noise.head(a_.rows());
  return g;
}

LowerHessians QuadraticBilevel::ll_hessians(const Iterate&, const Draw&) const {
  return LowerHessians{LinearOperator::identity(a_.cols()), LinearOperator::from_matrix(-a_)};
}

LowerSolve QuadraticBilevel::ll_solve_accurate(const Vector& x, double tol) const {
  if (!(tol > 0.0)) throw std::invalid_argument("ll_solve_accurate: tol must be positive");
  if (x.size() != a_.rows()) throw DimensionError("ll_solve_accurate: x has wrong size");
  LowerSolve s;
  const Vector target = a_.transpose() * x;
  if (!constrained()) {
    s.y = target;
    return s;
  }
  // min 1/2 |y - A'x|^2 s.t. By = Cx through its KKT system.
  const Index m = a_.cols();
  const Index p = b_.rows();
  Matrix kkt = Matrix::Zero(m + p, m + p);
  kkt.topLeftCorner(m, m).setIdentity();
  kkt.topRightCorner(m, p) = b_.transpose();
  kkt.bottomLeftCorner(p, m) = b_;
  Vector rhs(m + p);
  rhs << target, c_ * x;
  const Vector sol = solve_linear(kkt, rhs);
  s.y = sol.head(m);
  s.residual = (b_ * s.y - c_ * x).norm();
  s.iterations = 1;
  return s;
}

ProjectionSet QuadraticBilevel::projection_y(const Vector& x) const {
  if (!constrained()) return ProjectionSet::all_space();
  return ProjectionSet::affine(b_, c_ * x);
}

Iterate QuadraticBilevel::initial_iterate(StreamSet&) const {
  const Vector x = project(x0_, x_set_);
  return Iterate{x, project(Vector(a_.transpose() * x), projection_y(x))};
}

Matrix QuadraticBilevel::reduced_hessian() const {
  Matrix h = a_ * a_.transpose();
  h.diagonal() += p_;
  return h;
}

QuadClosedForm quad_closed_form(const QuadraticBilevel& q, const Vector& x) {
  if (q.constrained()) {
    throw UnsupportedConstraintError("quad_closed_form: constrained instance, use true_f");
  }
  if (x.size() != q.A().rows()) throw DimensionError("quad_closed_form: x has wrong size");
  QuadClosedForm out;
  out.y = q.A().transpose() * x;
  out.f = 0.5 * x.dot(q.ul_weights().cwiseProduct(x)) + 0.5 * out.y.squaredNorm();
  out.grad = q.ul_weights().cwiseProduct(x) + q.A() * out.y;
  return out;
}

}  // namespace bilevel
