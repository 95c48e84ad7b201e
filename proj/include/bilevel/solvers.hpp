#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bilevel/directions.hpp"
#include "bilevel/linalg.hpp"
#include "bilevel/problem.hpp"

namespace bilevel {

class StepsizeSchedule {
 public:
  struct Fixed {
    double alpha;
  };
  /// c0 / k
  struct Harmonic {
    double c0;
  };
  /// 2 / (c (k + 1))
  struct StronglyConvex {
    double c;
  };
  /// alpha_bar / sqrt(k)
  struct SqrtDecay {
    double alpha_bar;
  };

  /// Parameters must be positive and finite (std::invalid_argument otherwise).
  static StepsizeSchedule fixed(double alpha);
  static StepsizeSchedule harmonic(double c0);
  static StepsizeSchedule strongly_convex(double c);
  static StepsizeSchedule sqrt_decay(double alpha_bar);

  /// "fixed:0.1", "harmonic:10", "strongly_convex:2", "sqrt_decay:1".
  static StepsizeSchedule parse(const std::string& text);
  std::string to_string() const;

  /// k >= 1.
  double at(std::int64_t k) const;
  bool is_fixed() const { return std::holds_alternative<Fixed>(v_); }

  StepsizeSchedule() : v_(Fixed{0.01}) {}

 private:
  explicit StepsizeSchedule(std::variant<Fixed, Harmonic, StronglyConvex, SqrtDecay> v)
      : v_(v) {}
  std::variant<Fixed, Harmonic, StronglyConvex, SqrtDecay> v_;
};

double stepsize_at(const StepsizeSchedule& s, std::int64_t k);

enum class InnerKind { one_step, inc_acc, k_squared };

std::string_view to_string(InnerKind k);
InnerKind parse_inner_kind(std::string_view name);

struct InnerPolicy {
  InnerKind kind = InnerKind::one_step;
  /// Per-step LL stepsize for one_step and inc_acc, evaluated at the outer k.
  StepsizeSchedule ll_stepsize = StepsizeSchedule::fixed(0.1);
  double inc_acc_threshold = 1e-4;
  /// Compare full-batch UL values at consecutive recorded iterations instead
  /// of the mini-batch values of consecutive iterations.
  bool inc_acc_full_batch = false;
  /// beta_i = gamma / i for k_squared.
  double gamma = 1.0;
  bool hotstart = true;
  /// Upper bound on steps per inner solve; 0 means unbounded.
  std::int64_t max_steps = 0;
};

struct InnerResult {
  Vector y;
  std::uint64_t accessed = 0;
  std::int64_t steps = 0;
};

/// Inner SG on the LL problem at fixed x:
///   y^{i+1} = P_Y(x)(y^i - beta_i g_y^l(x, y^i, w_i)),
/// each step on a fresh LL draw of `ll_batch` points. `current_steps` is the
/// inc_acc step count.
InnerResult inner_solve(const Problem& p, const Vector& x, const Vector& y_start,
                        const InnerPolicy& policy, std::int64_t k, std::int64_t current_steps,
                        std::size_t ll_batch, StreamSet& streams);

/// Number of inner steps the policy takes at outer iteration k.
std::int64_t inner_step_count(const InnerPolicy& policy, std::int64_t k,
                              std::int64_t current_steps);

/// current_steps + 1 when |fu_cur - fu_prev| < threshold.
std::int64_t inc_acc_update(std::int64_t current_steps, double fu_prev, double fu_cur,
                            double threshold);

/// Smallest b in [1, cap] with sigma sqrt(q) / sqrt(b) <= c_d alpha, starting
/// from ceil((sigma sqrt(q) / (c_d alpha))^2); cap when no such b exists.
std::size_t dynamic_batch_size(double c_d, double alpha, double sigma, std::int64_t q,
                               std::size_t cap);

struct SamplingPolicy {
  enum class Kind { fixed_batch, dynamic, fraction };

  Kind kind = Kind::fixed_batch;
  BatchSpec batch;
  double c_d = 1.0;
  double sigma = 1.0;
  std::int64_t q = 1;
  std::size_t cap = 1024;
  /// Batch sizes as fractions of the current dataset sizes (at least 1 point).
  double ul_fraction = 0.005;
  double ll_fraction = 0.001;

  static SamplingPolicy fixed(std::size_t ul_batch, std::size_t ll_batch);
  static SamplingPolicy dynamic(double c_d, double sigma, std::int64_t q, std::size_t cap);
  static SamplingPolicy fractions(double ul, double ll);

  /// Batch for a step of size alpha, clipped to the dataset sizes.
  BatchSpec at(double alpha, const DatasetSizes& sizes) const;
};

struct SolverConfig {
  DirectionSpec direction;
  StepsizeSchedule ul_stepsize = StepsizeSchedule::fixed(0.01);
  InnerPolicy inner;
  SamplingPolicy sampling;
  std::int64_t max_iters = 100;
  std::uint64_t master_seed = 0;
  std::int64_t eval_every = 10;
  double eval_tol = 1e-8;
  /// Compute f_true at records (NaN otherwise).
  bool eval_true_f = true;
  /// Evaluation batches as fractions of the datasets; full data when unset.
  std::optional<std::pair<double, double>> eval_fractions;
  /// Record |grad f| by central differences of true_f (costly diagnostic).
  bool record_grad_norm_fd = false;
  std::optional<Iterate> start;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

struct TraceRecord {
  std::int64_t k = 0;
  std::uint64_t accessed = 0;
  double wall_seconds = 0.0;
  double f_true = 0.0;
  double ul_value_eval = 0.0;
  double ll_value_eval = 0.0;
  std::optional<double> grad_norm_fd;
};

struct RunTrace {
  std::string instance;
  std::string solver;
  std::uint64_t seed = 0;
  std::vector<TraceRecord> records;
  Iterate final_iterate;
  std::uint64_t accessed_total = 0;
  double wall_total = 0.0;
  /// Global iteration index at which each stage begins (staged runs).
  std::vector<std::int64_t> stage_starts;
  /// Index into records of each stage's first record (staged runs).
  std::vector<std::size_t> stage_first_record;
  /// Inner step count used at each outer iteration.
  std::vector<std::int64_t> inner_steps;
};

/// Capability and configuration checks done before iteration 1.
void check_capabilities(const Problem& p, const SolverConfig& config);

/// Algorithm 1 with engine adjoint_exact, bsg_h, bsg_1 or lq.
RunTrace run_bsg(const Problem& p, const SolverConfig& config);
RunTrace run_bsg(const Problem& p, const SolverConfig& config, StreamSet& streams);

/// DARTS: y~ = y - eta g_y^l(x, y), x <- P_X(x + alpha d_DARTS), y <- y~.
/// eta follows config.inner.ll_stepsize.
RunTrace run_darts(const Problem& p, const SolverConfig& config);
RunTrace run_darts(const Problem& p, const SolverConfig& config, StreamSet& streams);

/// Dispatch on config.direction.engine.
RunTrace run_solver(const Problem& p, const SolverConfig& config);
RunTrace run_solver(const Problem& p, const SolverConfig& config, StreamSet& streams);

/// Builds the problem for stage t (0-based) given the UL variables carried
/// over from the previous stage (nullptr for the first stage).
using StageFactory =
    std::function<std::unique_ptr<Problem>(std::size_t stage, const Vector* carried_x)>;

/// Runs the stages back to back on one stream set; iteration counts,
/// accessed points and wall time continue across stages.
RunTrace run_stages(const StageFactory& factory, std::size_t stage_count,
                    const SolverConfig& config);

}  // namespace bilevel
