#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/solvers.hpp"

namespace bilevel::bench {

/// Trace CSV header, in column order.
inline constexpr const char* kTraceHeader = "k,accessed,wall_seconds,f_true,ul_value_eval,ll_value_eval";

/// One RFC 4180 field: quoted when it holds a comma, quote or line break.
std::string csv_field(const std::string& s);
std::string format_number(double v);

void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& records);
void write_trace_csv(const std::string& path, const std::vector<TraceRecord>& records);

/// ParseError (with line) on a wrong header or malformed row.
std::vector<TraceRecord> read_trace_csv(std::istream& in);
std::vector<TraceRecord> read_trace_csv(const std::string& path);

/// A trace with its identity, as stored by a run.
struct LabeledTrace {
  std::string solver;
  std::uint64_t seed = 0;
  std::string instance;
  std::vector<TraceRecord> records;
};

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::pair<std::int64_t, std::int64_t> window{0, 0};
  std::size_t points = 0;
  /// Set when the window had to shrink around nonpositive gaps.
  std::string warning;
};

/// Least squares of log10(gap) on log10(k) over records with k in the window
/// (k >= 1), gap_k = min_{s <= k} f_true(s) - f_star. A nonpositive gap ends
/// the window just before it (with a warning); fewer than 10 usable points
/// throws std::invalid_argument.
RateFit fit_rate(const std::vector<TraceRecord>& records, double f_star,
                 std::pair<std::int64_t, std::int64_t> window);

/// Record-wise mean of f_true, ul_value_eval, ll_value_eval, accessed and
/// wall time over traces that share the same k column.
std::vector<TraceRecord> average_traces(const std::vector<std::vector<TraceRecord>>& traces);

/// "a:b" -> (a, b) with a < b.
std::pair<std::int64_t, std::int64_t> parse_window(const std::string& text);

struct SummaryRow {
  std::string solver;
  std::size_t seeds = 0;
  double final_f_true_mean = 0.0;
  double final_f_true_min = 0.0;
  double final_ul_value_mean = 0.0;
  double accessed_mean = 0.0;
  double wall_seconds_mean = 0.0;
  /// Competition rank by final_f_true_mean (ties share a rank).
  std::size_t rank = 0;
};

/// Per-solver summary of the final records. Throws std::invalid_argument on
/// mixed instances, on a solver missing seeds that others have (listing
/// them), or on an empty trace.
std::vector<SummaryRow> compare_table(const std::vector<LabeledTrace>& traces);

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);

}  // namespace bilevel::bench
