#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/linalg.hpp"

namespace bilevel {

/// Paired upper-level (x, dim n) and lower-level (y, dim m) variables.
struct Iterate {
  Vector x;
  Vector y;
};

struct Dims {
  Index n = 0;
  Index m = 0;
};

/// Number of data points behind the upper and lower expectations.
struct DatasetSizes {
  std::size_t ul = 0;
  std::size_t ll = 0;
};

enum class Stream : std::size_t { ul_sampling = 0, ll_sampling, init, shuffle, eval };

/// Named, independent RNG streams spawned from one master seed. Two StreamSets
/// built from the same seed produce identical draws stream by stream, so
/// solver comparisons share data draws.
class StreamSet {
 public:
  explicit StreamSet(std::uint64_t master_seed);

  std::mt19937_64& operator[](Stream s) { return engines_[static_cast<std::size_t>(s)]; }
  std::uint64_t master_seed() const { return master_; }

 private:
  std::uint64_t master_;
  std::array<std::mt19937_64, 5> engines_;
};

/// Engine for a derived purpose (per-seed synthetic data, shuffles).
std::mt19937_64 derived_engine(std::uint64_t key, std::uint64_t salt);

struct BatchSpec {
  std::size_t ul_batch = 1;
  std::size_t ll_batch = 1;

  /// Clip both sizes to the dataset; throws std::invalid_argument on zero.
  BatchSpec clipped(const DatasetSizes& sizes) const;
};

enum class Side { upper, lower };

/// One realization w of the data for one level: a set of rows drawn without
/// replacement (empty with `full` set when the whole dataset is used), or for
/// instances whose randomness is additive, the noise itself.
struct Draw {
  std::size_t size = 0;
  bool full = false;
  std::vector<std::size_t> rows;
  Vector noise;
};

/// xi = (w_u, w_l).
struct Batch {
  Draw ul;
  Draw ll;
};

/// Stochastic data D(x, y, xi): the four gradient estimates, optional Hessian
/// actions (present iff the instance has Hessian capability), and the sampled
/// objective values.
struct OracleSample {
  Vector gux;
  Vector guy;
  Vector glx;
  Vector gly;
  /// v -> H_yy v on R^m.
  std::optional<LinearOperator> hess_yy;
  /// v -> H_xy v, mapping R^m to R^n.
  std::optional<LinearOperator> hess_xy;
  double fu_value = 0.0;
  double fl_value = 0.0;
};

struct LevelEval {
  double value = 0.0;
  Vector gx;
  Vector gy;
};

struct LowerHessians {
  LinearOperator yy;
  LinearOperator xy;
};

struct LowerSolve {
  Vector y;
  bool converged = true;
  double residual = 0.0;
  int iterations = 0;
};

enum class ConstraintKind { equality, inequality };

struct ConstraintEval {
  double value = 0.0;
  Vector grad_x;
  Vector grad_y;
};

/// One lower-level constraint f_i(x, y) (= 0 or <= 0).
struct Constraint {
  ConstraintKind kind = ConstraintKind::equality;
  std::function<ConstraintEval(const Vector& x, const Vector& y)> eval;
  /// (dx, dy) -> Hessian of f_i applied to (dx, dy), returned as (hx, hy).
  /// Left empty for constraints affine in (x, y).
  std::function<std::pair<Vector, Vector>(const Vector& x, const Vector& y, const Vector& dx,
                                          const Vector& dy)>
      hessian_apply;
};

/// Lower-level feasible set Y(x).
class ConstraintSet {
 public:
  ConstraintSet() = default;
  ConstraintSet(std::vector<Constraint> items, Index n, Index m);

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  bool equality_only() const;
  const Constraint& operator[](std::size_t i) const { return items_[i]; }

  /// Rows are grad_x f_i' (G_x, |I| x n) and grad_y f_i' (G_y, |I| x m).
  std::pair<Matrix, Matrix> jacobians(const Vector& x, const Vector& y) const;

  /// sum_i z_i * Hessian(f_i) applied to (dx, dy).
  std::pair<Vector, Vector> curvature_apply(const Vector& x, const Vector& y, const Vector& z,
                                            const Vector& dx, const Vector& dy) const;

  /// Numerical rank of G_y equals |I| and |I| < m.
  bool licq_holds(const Vector& x, const Vector& y, double rel_tol = 1e-10) const;

 private:
  std::vector<Constraint> items_;
  Index n_ = 0;
  Index m_ = 0;
};

/// A stochastic bilevel problem
///   min_x E[f_u(x, y(x), w_u)]  s.t. x in X,  y(x) = argmin_{y in Y(x)} E[f_l(x, y, w_l)].
///
/// Implementations are immutable after construction; all randomness comes in
/// through Draw objects produced from caller-owned StreamSets, which makes
/// evaluation deterministic given (iterate, draw) and safe to share across
/// threads.
class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string name() const = 0;
  virtual Dims dims() const = 0;
  virtual DatasetSizes dataset_sizes() const = 0;
  virtual bool has_hessians() const { return false; }

  /// Draw `size` data points for one level from `engine`. The default samples
  /// rows without replacement; a size at or above the dataset size yields a
  /// full draw.
  virtual Draw draw(Side side, std::size_t size, std::mt19937_64& engine) const;

  /// Draw from the level's own sampling stream.
  Draw draw(Side side, std::size_t size, StreamSet& streams) const;

  virtual LevelEval ul_eval(const Iterate& it, const Draw& w) const = 0;
  virtual LevelEval ll_eval(const Iterate& it, const Draw& w) const = 0;
  virtual Vector ll_grad_y(const Iterate& it, const Draw& w) const { return ll_eval(it, w).gy; }
  virtual Vector ll_grad_x(const Iterate& it, const Draw& w) const { return ll_eval(it, w).gx; }
  /// Throws CapabilityError unless has_hessians().
  virtual LowerHessians ll_hessians(const Iterate& it, const Draw& w) const;

  virtual double ul_value_full(const Iterate& it) const;
  virtual double ll_value_full(const Iterate& it) const;

  /// High-accuracy y(x). `tol` bounds the LL optimality residual.
  virtual LowerSolve ll_solve_accurate(const Vector& x, double tol) const = 0;

  virtual ProjectionSet projection_x() const { return ProjectionSet::all_space(); }
  virtual ProjectionSet projection_y(const Vector& /*x*/) const {
    return ProjectionSet::all_space();
  }
  virtual const ConstraintSet* constraints() const { return nullptr; }

  /// Starting point (x0, y0); default is zero.
  virtual Iterate initial_iterate(StreamSet& streams) const;

  Draw full_draw(Side side) const;
};

Batch draw_batch(const Problem& p, const BatchSpec& spec, StreamSet& streams);

/// Evaluate D(x, y, xi) on an already drawn batch. Hessian actions use the
/// same lower-level rows as the lower-level gradients.
OracleSample sample(const Problem& p, const Iterate& it, const Batch& batch);

/// Draw, then evaluate.
OracleSample sample(const Problem& p, const Iterate& it, const BatchSpec& spec,
                    StreamSet& streams);

/// Full-data D(x, y).
OracleSample sample_full(const Problem& p, const Iterate& it);

/// What one oracle call consumed, in data points.
struct SampleEvent {
  std::size_t ul_gradient = 0;
  std::size_t ll_gradient = 0;
  std::size_t ll_hessian = 0;
};

/// Running count of accessed data points: every gradient and Hessian sample
/// counts its batch size once.
class AccessCounter {
 public:
  void record(const SampleEvent& e) { total_ += e.ul_gradient + e.ll_gradient + e.ll_hessian; }
  std::uint64_t total() const { return total_; }

 private:
  std::uint64_t total_ = 0;
};

struct ReducedValue {
  double f = 0.0;
  Vector y;
  bool converged = true;
};

/// f(x) = f_u(x, y~) with y~ from an accurate lower-level solve at `tol`.
ReducedValue true_f(const Problem& p, const Vector& x, double tol);

}  // namespace bilevel
