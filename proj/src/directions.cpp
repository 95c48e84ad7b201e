#include "bilevel/directions.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace bilevel {

namespace {

constexpr std::array<std::pair<Engine, std::string_view>, 5> kEngineNames{{
    {Engine::adjoint_exact, "adjoint_exact"},
    {Engine::bsg_h, "bsg_h"},
    {Engine::bsg_1, "bsg_1"},
    {Engine::darts, "darts"},
    {Engine::lq, "lq"},
}};

constexpr double kCostTie = 1e-12;

}  // namespace

std::string_view to_string(Engine e) {
  for (const auto& [engine, name] : kEngineNames) {
    if (engine == e) return name;
  }
  return "unknown";
}

Engine parse_engine(std::string_view name) {
  for (const auto& [engine, n] : kEngineNames) {
    if (n == name) return engine;
  }
  throw std::invalid_argument("unknown engine '" + std::string(name) +
                              "' (expected adjoint_exact, bsg_h, bsg_1, darts, lq)");
}

Vector adjoint_direction(const OracleSample& s, const DirectionSpec& spec) {
  if (!s.hess_yy || !s.hess_xy) {
    throw CapabilityError("adjoint direction needs Hessian actions in the sample");
  }
  const Vector rhs = -s.guy;
  Vector lambda;
  if (spec.engine == Engine::adjoint_exact) {
    lambda = solve_linear(s.hess_yy->to_dense(), rhs);
  } else {
    // Partial lambda on a curvature exit; zero when it trips on the first direction.
    lambda = cg_solve(*s.hess_yy, rhs, spec.cg_tol, spec.cg_max_iter).solution;
  }
  Vector d = -(s.gux + (*s.hess_xy)(lambda));
  require_finite(d, "adjoint_direction");
  return d;
}

Vector bsg1_direction(const OracleSample& s, const DirectionSpec& spec) {
  if (s.gly.size() != s.guy.size() || s.glx.size() != s.gux.size()) {
    throw DimensionError("bsg1_direction: gradient dimensions disagree");
  }
  const double denom = s.gly.squaredNorm();
  if (denom < spec.denom_floor) return -s.gux;
  const double rho = s.gly.dot(s.guy) / denom;
  Vector d = -(s.gux - rho * s.glx);
  require_finite(d, "bsg1_direction");
  return d;
}

Vector fd_cross_product(const Problem& p, const Vector& x, const Vector& y, const Vector& v,
                        const Draw& ll, double radius, SampleEvent* used) {
  const double vnorm = v.norm();
  if (!(vnorm > 0.0)) throw std::invalid_argument("fd_cross_product: zero probe direction");
  const double eps = radius / vnorm;
  const Vector plus = p.ll_grad_x(Iterate{x, y + eps * v}, ll);
  const Vector minus = p.ll_grad_x(Iterate{x, y - eps * v}, ll);
  if (used) used->ll_gradient += 2 * ll.size;
  return (plus - minus) / (2.0 * eps);
}

DartsDirection darts_direction(const Problem& p, const Vector& x, const Vector& y,
                               const Vector& y_tilde, const Batch& batch,
                               const DirectionSpec& spec) {
  DartsDirection out;
  const Iterate at_tilde{x, y_tilde};
  const LevelEval upper = p.ul_eval(at_tilde, batch.ul);
  out.used.ul_gradient += batch.ul.size;
  out.d = -upper.gx;

  Vector v = upper.gy;
  if (spec.darts_scale_curvature) {
    const Vector gly = p.ll_grad_y(at_tilde, batch.ll);
    out.used.ll_gradient += batch.ll.size;
    const double curvature = gly.squaredNorm();
    if (curvature < spec.denom_floor) return out;
    v /= curvature;
  }
  if (v.norm() < spec.denom_floor) return out;

  const double eta = spec.darts_eta_one ? 1.0 : spec.darts_eta;
  const Vector cross = fd_cross_product(p, x, y, v, batch.ll, spec.darts_fd_radius, &out.used);
  out.d += eta * cross;
  require_finite(out.d, "darts_direction");
  return out;
}

LQResult lq_direction(const Problem& p, const Vector& x, const Vector& y, const Batch& batch) {
  const ConstraintSet* cs = p.constraints();
  if (cs && !cs->equality_only()) {
    throw UnsupportedConstraintError("LQ direction handles equality constraints only");
  }
  if (!p.has_hessians()) throw CapabilityError(p.name() + ": LQ direction needs Hessians");

  const OracleSample s = sample(p, Iterate{x, y}, batch);
  const Index n = x.size();
  const Index m = y.size();
  const Index k = cs ? static_cast<Index>(cs->size()) : 0;

  Matrix hyy = s.hess_yy->to_dense();
  Matrix hxy = s.hess_xy->to_dense();  // n x m
  Matrix gx(k, n);
  Matrix gy(k, m);
  Vector z = Vector::Zero(k);
  if (k > 0) {
    if (!cs->licq_holds(x, y)) throw std::domain_error("LQ direction: LICQ fails at (x, y)");
    std::tie(gx, gy) = cs->jacobians(x, y);
    // grad_y f_l + G_y' z = 0 in the least-squares sense.
    z = -solve_linear(Matrix(gy * gy.transpose()), Vector(gy * s.gly));
    const Vector zero_x = Vector::Zero(n);
    Vector e = Vector::Zero(m);
    for (Index j = 0; j < m; ++j) {
      e(j) = 1.0;
      auto [cx, cy] = cs->curvature_apply(x, y, z, zero_x, e);
      hxy.col(j) += cx;
      hyy.col(j) += cy;
      e(j) = 0.0;
    }
  }
  hyy = 0.5 * (hyy + hyy.transpose()).eval();

  // Positive definiteness of H_yy on null(G_y).
  Matrix basis = Matrix::Identity(m, m);
  if (k > 0) {
    const Eigen::JacobiSVD<Matrix> svd(gy, Eigen::ComputeFullV);
    basis = svd.matrixV().rightCols(m - k);
  }
  if (basis.cols() > 0) {
    const Matrix reduced = basis.transpose() * hyy * basis;
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(reduced, Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, hyy.cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() <= kCurvatureFloor * scale) {
      throw std::domain_error("LQ direction: H_yy not positive definite on the constraint null space");
    }
  }

  Matrix kkt = Matrix::Zero(m + k, m + k);
  kkt.topLeftCorner(m, m) = hyy;
  if (k > 0) {
    kkt.topRightCorner(m, k) = gy.transpose();
    kkt.bottomLeftCorner(k, m) = gy;
  }
  Matrix rhs(m + k, n);
  rhs.topRows(m) = -hxy.transpose();
  if (k > 0) rhs.bottomRows(k) = -gx;
  const Matrix sol = solve_linear(kkt, rhs);
  const Matrix dy_of_dx = sol.topRows(m);
  const Matrix mult_of_dx = sol.bottomRows(k);

  LQResult out;
  out.effective_cost = s.gux + dy_of_dx.transpose() * s.guy;
  out.dx = Vector::Zero(n);
  for (Index i = 0; i < n; ++i) {
    const double c = out.effective_cost(i);
    if (std::abs(c) > kCostTie) out.dx(i) = c > 0.0 ? -1.0 : 1.0;
  }
  out.dy = dy_of_dx * out.dx;
  out.multipliers = mult_of_dx * out.dx;
  out.ll_multipliers = z;
  out.ul_value = s.fu_value;
  out.used.ul_gradient = batch.ul.size;
  out.used.ll_gradient = batch.ll.size;
  out.used.ll_hessian = batch.ll.size;
  return out;
}

}  // namespace bilevel
