#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/instances/continual.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/solvers.hpp"

namespace bilevel::bench {

/// Invalid configuration; the message names the offending section.key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct InstanceSpec {
  /// quadratic, quadratic_eq, logreg, continual
  std::string kind = "quadratic";
  std::uint64_t data_seed = 0;

  // quadratic family
  Index n = 5;
  Index m = 5;
  double noise_std = 0.1;
  double coupling = 1.0;
  /// Zero first UL weight and first row of A: convex, not strongly convex.
  bool convex_only = false;
  Index constraints = 2;
  double x0_scale = 1.0;

  // logreg
  std::string csv;
  std::size_t features = 20;
  std::size_t rows = 3750;
  std::size_t n_t1 = 3000;
  std::size_t n_t2 = 750;
  double separation = 2.0;
  double lambda_reg = 0.1;
  bool ul_superset_in_x = false;

  // continual
  std::size_t stages = 5;
  std::size_t classes_per_stage = 2;
  std::size_t train_per_class = 3000;
  std::size_t val_per_class = 1000;
  Index hidden = 16;
  double radius = 4.0;
  double spread = 0.7;
};

struct SolverEntry {
  std::string label;
  SolverConfig config;
};

struct BenchConfig {
  InstanceSpec instance;
  std::vector<SolverEntry> solvers;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "bench_out";
  std::size_t workers = 1;
  std::optional<double> f_star;
};

/// INI text: [instance], [run] and one [solver.<label>] section per solver.
/// Unknown sections or keys, bad values and duplicates throw ConfigError
/// (ParseError for syntax errors, with the line number).
BenchConfig parse_config(std::istream& in);
BenchConfig parse_config_text(const std::string& text);
BenchConfig load_config(const std::string& path);

/// Every resolved field as sorted "section.key=value" lines.
std::string canonical_text(const BenchConfig& cfg);
/// SHA-256 hex digest of canonical_text.
std::string config_hash(const BenchConfig& cfg);
std::string sha256_hex(const std::string& data);

/// A built instance: a single problem, or a task sequence for staged runs.
struct InstanceHandle {
  std::string name;
  std::shared_ptr<const Problem> problem;
  std::shared_ptr<const ContinualLearningSeq> sequence;
  /// Minimum value of the reduced function when known in closed form.
  std::optional<double> closed_form_f_star;
};

/// Throws ConfigError when the instance and solvers are incompatible (for
/// example a Hessian engine on the continual instance).
InstanceHandle build_instance(const InstanceSpec& spec);
void check_solvers(const InstanceHandle& inst, const std::vector<SolverEntry>& solvers);

}  // namespace bilevel::bench
