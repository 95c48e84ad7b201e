#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/bench/config.hpp"
#include "bilevel/bench/traces.hpp"
#include "bilevel/solvers.hpp"

namespace bilevel::bench {

struct RunResult {
  std::string label;
  std::uint64_t seed = 0;
  RunTrace trace;
  /// Misclassification rate at the final iterate (logreg: UL hyperplane on
  /// the superset; continual: final-stage validation union).
  std::optional<double> final_error;
};

struct FStar {
  std::optional<double> value;
  /// config, closed_form, reference_run or none.
  std::string source = "none";
};

/// Minimum of the reduced function by a long deterministic full-batch run:
/// gradient descent on true f with the exact adjoint gradient and Armijo
/// backtracking. Needs Hessian capability and an unconstrained LL.
double reference_f_star(const Problem& p, int iterations = 300);

FStar resolve_f_star(const BenchConfig& cfg, const InstanceHandle& inst);

/// Runs every (solver, seed) pair on up to cfg.workers threads. When
/// trace_dir is non-empty each trace is written there by its worker.
std::vector<RunResult> execute(const BenchConfig& cfg, const InstanceHandle& inst,
                               const std::string& trace_dir = "");

std::string trace_filename(const std::string& label, std::uint64_t seed);

struct BenchOutcome {
  std::vector<RunResult> results;
  std::vector<SummaryRow> summary;
  std::string hash;
  FStar f_star;
};

/// Build, execute, and write traces/, summary.csv and manifest.json under
/// cfg.output_dir.
BenchOutcome run_bench(const BenchConfig& cfg, std::ostream* log = nullptr);

/// Traces of a finished run directory, identified through its manifest.
std::vector<LabeledTrace> load_run_dir(const std::string& dir);

struct StageJumps {
  /// Stages whose first record sits more than the threshold above the
  /// stage's later minimum and (after the first stage) above the previous
  /// stage's last record.
  std::size_t boundary_jumps = 0;
  /// Rises of more than the threshold between consecutive records of one stage.
  std::size_t interior_jumps = 0;
};

/// Jumps of ul_value_eval around the stage starts of a staged run.
StageJumps count_stage_jumps(const RunTrace& trace, double threshold);

}  // namespace bilevel::bench
