#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bilevel/bench/config.hpp"
#include "bilevel/bench/demos.hpp"
#include "bilevel/bench/runner.hpp"
#include "bilevel/bench/traces.hpp"
#include "bilevel/errors.hpp"
#include "doctest.h"

using namespace bilevel;
using namespace bilevel::bench;

namespace {

const char* kSmall = R"ini(
[instance]
kind = quadratic
n = 3
m = 4
noise_std = 0.1
data_seed = 2

[run]
seeds = 0,1
output_dir = unused
workers = 2

[solver.a]
engine = bsg_1
ul_stepsize = harmonic:0.5
max_iters = 40
eval_every = 10

[solver.b]
engine = darts
ul_stepsize = fixed:0.1
ll_stepsize = fixed:0.5
max_iters = 40
eval_every = 10
)ini";

std::string message_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

std::vector<TraceRecord> power_trace(double c, double p, std::int64_t kmax) {
  std::vector<TraceRecord> out;
  for (std::int64_t k = 0; k <= kmax; ++k) {
    TraceRecord r;
    r.k = k;
    r.accessed = static_cast<std::uint64_t>(k);
    r.f_true = k == 0 ? c : c * std::pow(static_cast<double>(k), -p);
    out.push_back(r);
  }
  return out;
}

LabeledTrace labeled(std::string solver, std::uint64_t seed, double final_f,
                     std::string instance = "quadratic") {
  TraceRecord r;
  r.k = 10;
  r.accessed = 100 + seed;
  r.f_true = final_f;
  r.ul_value_eval = 2 * final_f;
  r.wall_seconds = 0.5;
  return LabeledTrace{std::move(solver), seed, std::move(instance), {r}};
}

}  // namespace

TEST_CASE("config parsing") {
  const BenchConfig c = parse_config_text(kSmall);
  CHECK(c.instance.n == 3);
  CHECK(c.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(c.workers == 2);
  REQUIRE(c.solvers.size() == 2);
  CHECK(c.solvers[0].label == "a");
  CHECK(c.solvers[1].config.direction.engine == Engine::darts);
  CHECK(c.solvers[0].config.max_iters == 40);
}

TEST_CASE("config errors name the offending key") {
  const std::string base = kSmall;
  CHECK(message_of(base + "bogus = 1\n").find("bogus") != std::string::npos);
  CHECK_THROWS_AS(parse_config_text(base + "bogus = 1\n"), ConfigError);
  const std::string extra = base + "[solver.c]\nengine = bsg_1\n";
  const std::string bad_value = message_of(extra + "max_iters = many\n");
  CHECK(bad_value.find("max_iters") != std::string::npos);
  CHECK(message_of("[instance]\nkind = quadratic\nfeatures = 3\n[solver.a]\nengine = bsg_1\n")
            .find("instance.features") != std::string::npos);
  CHECK(message_of("[instance]\nkind = tiles\n[solver.a]\nengine = bsg_1\n").find("tiles") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config_text("[instance]\nkind = quadratic\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[solver.a]\nengine = bsg_1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(base + "[solver.a]\nengine = bsg_1\n"), std::exception);
  CHECK_THROWS_AS(parse_config_text(base + "[extra]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(base + "[solver.c]\nengine = newton\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(extra + "ul_stepsize = harmonic:-1\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("config hash changes exactly when a field changes") {
  const BenchConfig c = parse_config_text(kSmall);
  const std::string h = config_hash(c);
  CHECK(h.size() == 64);
  CHECK(config_hash(parse_config_text(kSmall)) == h);
  // Reordering and spacing do not change the resolved fields.
  std::string spaced = kSmall;
  spaced.replace(spaced.find("n = 3\nm = 4"), 11, "m=4\nn  =  3");
  CHECK(config_hash(parse_config_text(spaced)) == h);
  // An explicit default changes nothing either.
  CHECK(config_hash(parse_config_text(std::string(kSmall) + "eval_true_f = true\n")) == h);

  BenchConfig d = c;
  d.instance.noise_std = 0.2;
  CHECK(config_hash(d) != h);
  d = c;
  d.solvers[1].config.inner.ll_stepsize = StepsizeSchedule::fixed(0.25);
  CHECK(config_hash(d) != h);
  d = c;
  d.seeds = {0, 2};
  CHECK(config_hash(d) != h);
  d = c;
  d.solvers[0].label = "c";
  CHECK(config_hash(d) != h);
  CHECK(canonical_text(c).find("solver.a.engine=bsg_1") != std::string::npos);
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("every demo config parses and names its output directory") {
  for (const auto& name : demo_names()) {
    const BenchConfig c = parse_config_text(demo_config(name));
    CHECK_FALSE(c.solvers.empty());
    CHECK_NOTHROW(check_solvers(build_instance(c.instance), c.solvers));
  }
  CHECK_THROWS_AS(demo_config("nope"), std::invalid_argument);
}

TEST_CASE("incompatible solver and instance are rejected") {
  BenchConfig c = parse_config_text(
      "[instance]\nkind = continual\nstages = 2\ntrain_per_class = 10\nval_per_class = 5\n"
      "[solver.h]\nengine = bsg_h\n");
  CHECK_THROWS_AS(check_solvers(build_instance(c.instance), c.solvers), ConfigError);
}

TEST_CASE("trace CSV round trip") {
  std::vector<TraceRecord> recs = power_trace(3.0, 0.5, 20);
  recs[3].ul_value_eval = 1.0 / 3.0;
  recs[4].ll_value_eval = std::nan("");
  recs[5].wall_seconds = 1e-300;
  std::stringstream io;
  write_trace_csv(io, recs);
  CHECK(io.str().rfind(std::string(kTraceHeader) + "\n", 0) == 0);
  const std::vector<TraceRecord> back = read_trace_csv(io);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].k == recs[i].k);
    CHECK(back[i].accessed == recs[i].accessed);
    CHECK(back[i].f_true == recs[i].f_true);
    CHECK(back[i].wall_seconds == recs[i].wall_seconds);
  }
  CHECK(back[3].ul_value_eval == 1.0 / 3.0);
  CHECK(std::isnan(back[4].ll_value_eval));

  std::istringstream bad_header("k,accessed\n1,2\n");
  CHECK_THROWS_AS(read_trace_csv(bad_header), ParseError);
  std::istringstream bad_row(std::string(kTraceHeader) + "\n1,2,0,1,1,1\n2,x,0,1,1,1\n");
  try {
    read_trace_csv(bad_row);
    FAIL("no error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("CSV fields are quoted per RFC 4180") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
  std::ostringstream out;
  write_summary_csv(out, compare_table({labeled("x,y", 0, 1.0)}));
  CHECK(out.str().find("\"x,y\"") != std::string::npos);
}

TEST_CASE("rate fits recover exact power laws") {
  const RateFit f1 = fit_rate(power_trace(7.0, 1.0, 1000), 0.0, {10, 1000});
  CHECK(f1.slope == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(f1.intercept == doctest::Approx(std::log10(7.0)).epsilon(1e-9));
  CHECK(f1.r2 >= 0.999999);
  CHECK(f1.points == 991);
  CHECK(f1.warning.empty());
  const RateFit f2 = fit_rate(power_trace(3.0, 0.5, 1000), 0.0, {1, 1000});
  CHECK(f2.slope == doctest::Approx(-0.5).epsilon(1e-6));
  // A shifted optimum is subtracted first.
  const RateFit f3 = fit_rate(power_trace(3.0, 0.5, 1000), -2.0, {1, 1000});
  CHECK(f3.slope > -0.5);
}

TEST_CASE("rate fits use the running minimum and shrink at nonpositive gaps") {
  std::vector<TraceRecord> recs = power_trace(1.0, 1.0, 100);
  std::vector<TraceRecord> held = recs;
  held[50].f_true = held[49].f_true;
  recs[50].f_true = 5.0;  // a spike does not raise the running minimum
  CHECK(fit_rate(recs, 0.0, {1, 100}).slope == fit_rate(held, 0.0, {1, 100}).slope);
  recs[60].f_true = -1.0;
  const RateFit f = fit_rate(recs, 0.0, {1, 100});
  CHECK_FALSE(f.warning.empty());
  CHECK(f.window.second == 59);
  CHECK(f.points == 59);
  recs[5].f_true = -1.0;
  CHECK_THROWS_AS(fit_rate(recs, 0.0, {1, 100}), std::invalid_argument);
  CHECK_THROWS_AS(fit_rate(power_trace(1.0, 1.0, 8), 0.0, {1, 8}), std::invalid_argument);
  CHECK_THROWS_AS(fit_rate(recs, 0.0, {0, 100}), std::invalid_argument);
}

TEST_CASE("window parsing") {
  CHECK(parse_window("10:500") == std::make_pair<std::int64_t, std::int64_t>(10, 500));
  CHECK_THROWS_AS(parse_window("500:10"), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("10"), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("a:b"), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("0:5"), std::invalid_argument);
}

TEST_CASE("trace averaging") {
  const auto a = power_trace(1.0, 1.0, 20);
  const auto b = power_trace(3.0, 1.0, 20);
  const auto m = average_traces({a, b});
  CHECK(m[4].f_true == doctest::Approx(0.5));
  CHECK(m[4].k == 4);
  CHECK_THROWS_AS(average_traces({a, power_trace(1.0, 1.0, 10)}), std::invalid_argument);
  CHECK_THROWS_AS(average_traces({}), std::invalid_argument);
}

TEST_CASE("compare table") {
  const std::vector<LabeledTrace> ts{labeled("s1", 0, 1.0), labeled("s1", 1, 3.0),
                                     labeled("s2", 0, 2.0), labeled("s2", 1, 2.0),
                                     labeled("s3", 0, 0.5), labeled("s3", 1, 0.7)};
  const auto rows = compare_table(ts);
  REQUIRE(rows.size() == 3);
  std::map<std::string, SummaryRow> by;
  for (const auto& r : rows) by[r.solver] = r;
  CHECK(by["s3"].rank == 1);
  CHECK(by["s1"].rank == 2);
  CHECK(by["s2"].rank == 2);
  CHECK(by["s1"].final_f_true_mean == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(by["s1"].final_f_true_min == 1.0);
  CHECK(by["s3"].final_ul_value_mean == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(by["s1"].accessed_mean == doctest::Approx(100.5).epsilon(1e-12));
  CHECK(by["s1"].seeds == 2);

  auto missing = ts;
  missing.pop_back();
  try {
    compare_table(missing);
    FAIL("no error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("s3") != std::string::npos);
  }
  auto mixed = ts;
  mixed[0].instance = "logreg";
  CHECK_THROWS_AS(compare_table(mixed), std::invalid_argument);
  CHECK_THROWS_AS(compare_table({}), std::invalid_argument);
}

TEST_CASE("bench runs write a loadable run directory") {
  const auto dir = std::filesystem::temp_directory_path() / "bilevel_bench_test";
  std::filesystem::remove_all(dir);
  BenchConfig c = parse_config_text(kSmall);
  c.output_dir = dir.string();
  std::ostringstream log;
  const BenchOutcome out = run_bench(c, &log);
  CHECK(out.results.size() == 4);
  CHECK(out.f_star.source == "closed_form");
  CHECK(*out.f_star.value == 0.0);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "summary.csv"));
  CHECK(std::filesystem::exists(dir / "traces" / "a__seed1.csv"));

  const auto loaded = load_run_dir(dir.string());
  REQUIRE(loaded.size() == 4);
  for (const auto& t : loaded) {
    bool found = false;
    for (const auto& r : out.results) {
      if (r.label != t.solver || r.seed != t.seed) continue;
      found = true;
      REQUIRE(r.trace.records.size() == t.records.size());
      for (std::size_t i = 0; i < t.records.size(); ++i) {
        CHECK(t.records[i].f_true == r.trace.records[i].f_true);
        CHECK(t.records[i].accessed == r.trace.records[i].accessed);
      }
    }
    CHECK(found);
  }
  // Summary means agree with a recomputation from the traces.
  const auto rows = compare_table(loaded);
  for (const auto& row : rows) {
    double sum = 0.0;
    for (const auto& r : out.results) {
      if (r.label == row.solver) sum += r.trace.records.back().f_true;
    }
    CHECK(std::abs(row.final_f_true_mean - sum / 2.0) <= 1e-12 * std::max(1.0, std::abs(sum)));
  }

  // One worker or two: identical traces.
  BenchConfig serial = c;
  serial.workers = 1;
  const auto again = execute(serial, build_instance(serial.instance));
  for (std::size_t i = 0; i < again.size(); ++i) {
    CHECK(again[i].trace.final_iterate.x == out.results[i].trace.final_iterate.x);
  }
  CHECK_THROWS_AS(load_run_dir((dir / "traces").string()), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage jump counting") {
  RunTrace t;
  const double vals[] = {1.0, 0.5, 0.4, 1.5, 0.6, 0.5, 1.6, 0.7, 0.65};
  for (int i = 0; i < 9; ++i) {
    TraceRecord r;
    r.k = i;
    r.ul_value_eval = vals[i];
    t.records.push_back(r);
  }
  t.stage_first_record = {0, 3, 6};
  StageJumps j = count_stage_jumps(t, 0.3);
  CHECK(j.boundary_jumps == 3);
  CHECK(j.interior_jumps == 0);
  t.records[7].ul_value_eval = 0.6;
  t.records[8].ul_value_eval = 1.2;
  j = count_stage_jumps(t, 0.3);
  CHECK(j.interior_jumps == 1);
  j = count_stage_jumps(t, 2.0);
  CHECK(j.boundary_jumps == 0);
}
