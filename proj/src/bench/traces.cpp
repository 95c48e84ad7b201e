#include "bilevel/bench/traces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace bilevel::bench {

namespace {

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  out.push_back(cur);
  return out;
}

double parse_cell(const std::string& s, std::size_t line_no, const char* column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(std::string(column) + ": '" + s + "' is not a number", line_no);
}

}  // namespace

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& records) {
  out << kTraceHeader << '\n';
  for (const auto& r : records) {
    out << r.k << ',' << r.accessed << ',' << format_number(r.wall_seconds) << ','
        << format_number(r.f_true) << ',' << format_number(r.ul_value_eval) << ','
        << format_number(r.ll_value_eval) << '\n';
  }
}

void write_trace_csv(const std::string& path, const std::vector<TraceRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_trace_csv(out, records);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<TraceRecord> read_trace_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty trace file", 0);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTraceHeader) {
    throw ParseError("trace header must be '" + std::string(kTraceHeader) + "'", line_no);
  }
  std::vector<TraceRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line, line_no);
    if (cells.size() != 6) {
      throw ParseError("expected 6 columns, found " + std::to_string(cells.size()), line_no);
    }
    TraceRecord r;
    const double k = parse_cell(cells[0], line_no, "k");
    const double accessed = parse_cell(cells[1], line_no, "accessed");
    if (k < 0 || k != std::floor(k) || accessed < 0 || accessed != std::floor(accessed)) {
      throw ParseError("k and accessed must be nonnegative integers", line_no);
    }
    r.k = static_cast<std::int64_t>(k);
    r.accessed = static_cast<std::uint64_t>(accessed);
    r.wall_seconds = parse_cell(cells[2], line_no, "wall_seconds");
    r.f_true = parse_cell(cells[3], line_no, "f_true");
    r.ul_value_eval = parse_cell(cells[4], line_no, "ul_value_eval");
    r.ll_value_eval = parse_cell(cells[5], line_no, "ll_value_eval");
    out.push_back(r);
  }
  return out;
}

std::vector<TraceRecord> read_trace_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trace '" + path + "'");
  return read_trace_csv(in);
}

RateFit fit_rate(const std::vector<TraceRecord>& records, double f_star,
                 std::pair<std::int64_t, std::int64_t> window) {
  if (window.first < 1 || window.second <= window.first) {
    throw std::invalid_argument("fit_rate: window must satisfy 1 <= a < b");
  }
  RateFit fit;
  fit.window = window;
  std::vector<double> lx;
  std::vector<double> ly;
  double running = std::numeric_limits<double>::infinity();
  std::int64_t prev_k = std::numeric_limits<std::int64_t>::min();
  for (const auto& r : records) {
    if (r.k < prev_k) throw std::invalid_argument("fit_rate: records not sorted by k");
    prev_k = r.k;
    if (!std::isnan(r.f_true)) running = std::min(running, r.f_true);
    if (r.k < window.first || r.k > window.second) continue;
    const double gap = running - f_star;
    if (!(gap > 0.0)) {
      fit.warning = "nonpositive gap at k = " + std::to_string(r.k) + "; window shrunk to [" +
                    std::to_string(window.first) + ", " + std::to_string(r.k - 1) + "]";
      fit.window.second = r.k - 1;
      break;
    }
    lx.push_back(std::log10(static_cast<double>(r.k)));
    ly.push_back(std::log10(gap));
  }
  fit.points = lx.size();
  if (fit.points < 10) {
    throw std::invalid_argument("fit_rate: " + std::to_string(fit.points) +
                                " usable points in window, need at least 10" +
                                (fit.warning.empty() ? "" : " (" + fit.warning + ")"));
  }
  const auto n = static_cast<double>(fit.points);
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < fit.points; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < fit.points; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("fit_rate: all points share one k");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

std::vector<TraceRecord> average_traces(const std::vector<std::vector<TraceRecord>>& traces) {
  if (traces.empty()) throw std::invalid_argument("average_traces: no traces");
  const std::size_t len = traces.front().size();
  for (const auto& t : traces) {
    if (t.size() != len) throw std::invalid_argument("average_traces: traces differ in length");
  }
  std::vector<TraceRecord> out(len);
  const auto count = static_cast<double>(traces.size());
  for (std::size_t i = 0; i < len; ++i) {
    TraceRecord r;
    r.k = traces.front()[i].k;
    double accessed = 0.0;
    for (const auto& t : traces) {
      if (t[i].k != r.k) throw std::invalid_argument("average_traces: k columns differ");
      accessed += static_cast<double>(t[i].accessed);
      r.wall_seconds += t[i].wall_seconds;
      r.f_true += t[i].f_true;
      r.ul_value_eval += t[i].ul_value_eval;
      r.ll_value_eval += t[i].ll_value_eval;
    }
    r.accessed = static_cast<std::uint64_t>(std::llround(accessed / count));
    r.wall_seconds /= count;
    r.f_true /= count;
    r.ul_value_eval /= count;
    r.ll_value_eval /= count;
    out[i] = r;
  }
  return out;
}

std::pair<std::int64_t, std::int64_t> parse_window(const std::string& text) {
  const auto colon = text.find(':');
  auto bad = [&] { return std::invalid_argument("window '" + text + "': expected a:b with a < b"); };
  if (colon == std::string::npos) throw bad();
  try {
    std::size_t ua = 0;
    std::size_t ub = 0;
    const std::string a = text.substr(0, colon);
    const std::string b = text.substr(colon + 1);
    const long long va = std::stoll(a, &ua);
    const long long vb = std::stoll(b, &ub);
    if (ua != a.size() || ub != b.size() || va >= vb || va < 1) throw bad();
    return {va, vb};
  } catch (const std::invalid_argument&) {
    throw bad();
  } catch (const std::out_of_range&) {
    throw bad();
  }
}

std::vector<SummaryRow> compare_table(const std::vector<LabeledTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("compare: no traces");
  const std::string& instance = traces.front().instance;
  std::vector<std::string> order;
  std::map<std::string, std::vector<const LabeledTrace*>> by_solver;
  std::set<std::uint64_t> all_seeds;
  for (const auto& t : traces) {
    if (t.instance != instance) {
      throw std::invalid_argument("compare: mixed instances '" + instance + "' and '" +
                                  t.instance + "'");
    }
    if (t.records.empty()) {
      throw std::invalid_argument("compare: empty trace for " + t.solver + " seed " +
                                  std::to_string(t.seed));
    }
    if (!by_solver.count(t.solver)) order.push_back(t.solver);
    for (const auto* other : by_solver[t.solver]) {
      if (other->seed == t.seed) {
        throw std::invalid_argument("compare: duplicate trace for " + t.solver + " seed " +
                                    std::to_string(t.seed));
      }
    }
    by_solver[t.solver].push_back(&t);
    all_seeds.insert(t.seed);
  }

  std::string missing;
  for (const auto& name : order) {
    std::set<std::uint64_t> have;
    for (const auto* t : by_solver[name]) have.insert(t->seed);
    for (auto s : all_seeds) {
      if (!have.count(s)) missing += " " + name + ":seed" + std::to_string(s);
    }
  }
  if (!missing.empty()) throw std::invalid_argument("compare: missing traces:" + missing);

  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    SummaryRow row;
    row.solver = name;
    const auto& group = by_solver[name];
    row.seeds = group.size();
    row.final_f_true_min = std::numeric_limits<double>::infinity();
    for (const auto* t : group) {
      const TraceRecord& last = t->records.back();
      row.final_f_true_mean += last.f_true;
      row.final_f_true_min = std::min(row.final_f_true_min, last.f_true);
      row.final_ul_value_mean += last.ul_value_eval;
      row.accessed_mean += static_cast<double>(last.accessed);
      row.wall_seconds_mean += last.wall_seconds;
    }
    const auto n = static_cast<double>(group.size());
    row.final_f_true_mean /= n;
    row.final_ul_value_mean /= n;
    row.accessed_mean /= n;
    row.wall_seconds_mean /= n;
    rows.push_back(row);
  }

  auto key = [](double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : v; };
  auto tied = [&](double a, double b) {
    const double ka = key(a);
    const double kb = key(b);
    if (ka == kb) return true;
    return std::abs(ka - kb) <= 1e-12 * std::max(1.0, std::abs(ka));
  };
  for (auto& row : rows) {
    std::size_t better = 0;
    for (const auto& other : rows) {
      if (!tied(other.final_f_true_mean, row.final_f_true_mean) &&
          key(other.final_f_true_mean) < key(row.final_f_true_mean)) {
        ++better;
      }
    }
    row.rank = better + 1;
  }
  return rows;
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "solver,seeds,final_f_true_mean,final_f_true_min,final_ul_value_eval_mean,"
         "accessed_mean,wall_seconds_mean,rank\n";
  for (const auto& r : rows) {
    out << csv_field(r.solver) << ',' << r.seeds << ',' << format_number(r.final_f_true_mean)
        << ',' << format_number(r.final_f_true_min) << ','
        << format_number(r.final_ul_value_mean) << ',' << format_number(r.accessed_mean) << ','
        << format_number(r.wall_seconds_mean) << ',' << r.rank << '\n';
  }
}

}  // namespace bilevel::bench
