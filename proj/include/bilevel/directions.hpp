#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "bilevel/linalg.hpp"
#include "bilevel/problem.hpp"

namespace bilevel {

enum class Engine { adjoint_exact, bsg_h, bsg_1, darts, lq };

std::string_view to_string(Engine e);
/// Throws std::invalid_argument on unknown names.
Engine parse_engine(std::string_view name);

struct DirectionSpec {
  Engine engine = Engine::bsg_1;
  /// LL stepsize folded into the DARTS correction term.
  double darts_eta = 0.01;
  /// Divide the FD probe direction by |g_y^l(x, y~)|^2.
  bool darts_scale_curvature = false;
  /// Use 1 instead of darts_eta in the correction term only.
  bool darts_eta_one = false;
  /// Probe displacement length: eps = darts_fd_radius / |v|.
  double darts_fd_radius = 0.01;
  double cg_tol = 1e-10;
  int cg_max_iter = 200;
  double denom_floor = 1e-12;
};

/// Stochastic adjoint step d = -(g_x^u + H_xy lambda), H_yy lambda = -g_y^u.
///
/// bsg_h solves for lambda with CG and keeps the partial solution on a
/// non-positive curvature exit (lambda = 0 if the first direction fails, so
/// d = -g_x^u). adjoint_exact materializes H_yy and solves directly.
/// Throws CapabilityError when the sample carries no Hessian actions.
Vector adjoint_direction(const OracleSample& s, const DirectionSpec& spec);

/// Rank-1 (Gauss-Newton style) replacement of the LL Hessians:
///   d = -(g_x^u - rho g_x^l),  rho = <g_y^l, g_y^u> / <g_y^l, g_y^l>,
/// with d = -g_x^u when the denominator is below spec.denom_floor.
Vector bsg1_direction(const OracleSample& s, const DirectionSpec& spec);

/// Central difference for H_xy v along the probe y +/- eps v on a fixed LL
/// draw, eps = radius / |v|. Records the two probe evaluations in `used`.
Vector fd_cross_product(const Problem& p, const Vector& x, const Vector& y, const Vector& v,
                        const Draw& ll, double radius, SampleEvent* used = nullptr);

struct DartsDirection {
  Vector d;
  SampleEvent used;
};

/// DARTS step direction at (x_k, y_k) with y~ = one LL SG step from y_k.
/// UL gradients are taken at (x, y~) on batch.ul; the FD probes sit around y
/// and reuse batch.ll.
DartsDirection darts_direction(const Problem& p, const Vector& x, const Vector& y,
                               const Vector& y_tilde, const Batch& batch,
                               const DirectionSpec& spec);

struct LQResult {
  Vector dx;
  Vector dy;
  /// Multipliers of the linearized LL constraints in the LQ lower level.
  Vector multipliers;
  /// c^ with c_u'dx + c_y'dy = c^'dx on the LL solution manifold dy = M dx.
  Vector effective_cost;
  /// LL multipliers z estimated at (x, y) (least squares on the LL stationarity).
  Vector ll_multipliers;
  /// Sampled UL objective value at (x, y).
  double ul_value = 0.0;
  SampleEvent used;
};

/// Steepest-descent direction from the linear-quadratic bilevel subproblem at
/// (x, y), equality-constrained lower levels only. The LL QP is replaced by
/// its KKT system, which is linear in dx: dy = M dx. The remaining LP over
/// |dx|_inf <= 1 is solved by sign: dx_i = -sign(c^_i), 0 when |c^_i| <= 1e-12.
///
/// Throws UnsupportedConstraintError for inequality constraints,
/// CapabilityError without Hessians, SingularSystemError on a singular KKT
/// matrix, std::domain_error when H_yy is not positive definite on the
/// constraint null space or LICQ fails.
LQResult lq_direction(const Problem& p, const Vector& x, const Vector& y, const Batch& batch);

}  // namespace bilevel
