#include "bilevel/bench/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include "json.hpp"
#include <ostream>
#include <thread>

#include "bilevel/instances/continual.hpp"
#include "bilevel/instances/logreg.hpp"

namespace bilevel::bench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Job {
  std::size_t solver;
  std::uint64_t seed;
};

RunResult run_job(const SolverEntry& entry, std::uint64_t seed, const InstanceHandle& inst) {
  SolverConfig cfg = entry.config;
  cfg.master_seed = seed;
  RunResult r;
  r.label = entry.label;
  r.seed = seed;
  if (inst.problem) {
    r.trace = run_solver(*inst.problem, cfg);
    if (const auto* lr = dynamic_cast<const LogRegBilevel*>(inst.problem.get())) {
      r.final_error = lr->error_rate(r.trace.final_iterate.x);
    }
  } else {
    const auto& seq = *inst.sequence;
    StageFactory factory = [&seq](std::size_t t, const Vector* carried) {
      return seq.stage_problem(t, carried);
    };
    r.trace = run_stages(factory, seq.stages(), cfg);
    const auto last = seq.stage_problem(seq.stages() - 1, &r.trace.final_iterate.x);
    r.final_error = cl_validation_error(*last, r.trace.final_iterate.x, r.trace.final_iterate.y);
  }
  r.trace.solver = entry.label;
  return r;
}

json optional_number(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace

double reference_f_star(const Problem& p, int iterations) {
  if (!p.has_hessians()) throw CapabilityError(p.name() + ": reference run needs Hessians");
  if (p.constraints() && !p.constraints()->empty()) {
    throw CapabilityError(p.name() + ": reference run needs an unconstrained lower level");
  }
  constexpr double kTol = 1e-10;
  StreamSet streams(0);
  Vector x = project(p.initial_iterate(streams).x, p.projection_x());
  const ProjectionSet xs = p.projection_x();
  DirectionSpec spec;
  spec.engine = Engine::adjoint_exact;
  double f = true_f(p, x, kTol).f;
  double step = 1.0;
  for (int it = 0; it < iterations; ++it) {
    const ReducedValue rv = true_f(p, x, kTol);
    const Vector d = adjoint_direction(sample_full(p, Iterate{x, rv.y}), spec);
    if (d.norm() < 1e-10) break;
    step = std::min(1.0, step * 2.0);
    bool moved = false;
    while (step > 1e-12) {
      const Vector cand = project(x + step * d, xs);
      const double fc = true_f(p, cand, kTol).f;
      if (fc <= f - 1e-4 * step * d.squaredNorm()) {
        x = cand;
        f = fc;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  return f;
}

FStar resolve_f_star(const BenchConfig& cfg, const InstanceHandle& inst) {
  FStar out;
  if (cfg.f_star) {
    out.value = cfg.f_star;
    out.source = "config";
  } else if (inst.closed_form_f_star) {
    out.value = inst.closed_form_f_star;
    out.source = "closed_form";
  } else if (inst.problem && inst.problem->has_hessians()) {
    out.value = reference_f_star(*inst.problem);
    out.source = "reference_run";
  }
  return out;
}

std::string trace_filename(const std::string& label, std::uint64_t seed) {
  return label + "__seed" + std::to_string(seed) + ".csv";
}

std::vector<RunResult> execute(const BenchConfig& cfg, const InstanceHandle& inst,
                               const std::string& trace_dir) {
  check_solvers(inst, cfg.solvers);
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < cfg.solvers.size(); ++s) {
    for (auto seed : cfg.seeds) jobs.push_back(Job{s, seed});
  }
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        const SolverEntry& entry = cfg.solvers[jobs[i].solver];
        results[i] = run_job(entry, jobs[i].seed, inst);
        if (!trace_dir.empty()) {
          write_trace_csv((fs::path(trace_dir) / trace_filename(entry.label, jobs[i].seed)).string(),
                          results[i].trace.records);
        }
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.workers, jobs.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

BenchOutcome run_bench(const BenchConfig& cfg, std::ostream* log) {
  const InstanceHandle inst = build_instance(cfg.instance);
  check_solvers(inst, cfg.solvers);

  const fs::path out_dir(cfg.output_dir);
  const fs::path trace_dir = out_dir / "traces";
  fs::create_directories(trace_dir);

  BenchOutcome outcome;
  outcome.hash = config_hash(cfg);
  outcome.f_star = resolve_f_star(cfg, inst);
  if (log) {
    *log << "instance " << inst.name << ", " << cfg.solvers.size() << " solvers x "
         << cfg.seeds.size() << " seeds, config " << outcome.hash.substr(0, 12) << "\n";
  }
  outcome.results = execute(cfg, inst, trace_dir.string());

  std::vector<LabeledTrace> labeled;
  for (const auto& r : outcome.results) {
    labeled.push_back(LabeledTrace{r.label, r.seed, inst.name, r.trace.records});
  }
  outcome.summary = compare_table(labeled);
  {
    std::ofstream out(out_dir / "summary.csv", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write summary.csv in " + out_dir.string());
    write_summary_csv(out, outcome.summary);
  }

  json manifest;
  manifest["config_hash"] = outcome.hash;
  manifest["instance"] = inst.name;
  manifest["seeds"] = cfg.seeds;
  manifest["f_star"] = optional_number(outcome.f_star.value);
  manifest["f_star_source"] = outcome.f_star.source;
  json solvers = json::array();
  for (const auto& s : cfg.solvers) {
    solvers.push_back({{"label", s.label}, {"engine", std::string(to_string(s.config.direction.engine))}});
  }
  manifest["solvers"] = solvers;
  json runs = json::array();
  for (const auto& r : outcome.results) {
    runs.push_back({{"solver", r.label},
                    {"seed", r.seed},
                    {"trace", "traces/" + trace_filename(r.label, r.seed)},
                    {"accessed_total", r.trace.accessed_total},
                    {"final_error", optional_number(r.final_error)},
                    {"stage_starts", r.trace.stage_starts}});
  }
  manifest["runs"] = runs;
  json config_lines = json::array();
  std::istringstream canon(canonical_text(cfg));
  for (std::string line; std::getline(canon, line);) config_lines.push_back(line);
  manifest["config"] = config_lines;
  {
    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write manifest.json in " + out_dir.string());
    out << manifest.dump(2) << '\n';
  }

  if (log) {
    for (const auto& row : outcome.summary) {
      *log << "  [" << row.rank << "] " << row.solver
           << "  final f_true " << format_number(row.final_f_true_mean)
           << "  accessed " << format_number(row.accessed_mean) << "\n";
    }
    *log << "wrote " << out_dir.string() << "\n";
  }
  return outcome;
}

std::vector<LabeledTrace> load_run_dir(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in '" + dir + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest.json in '" + dir + "': " + e.what());
  }
  std::vector<LabeledTrace> out;
  const std::string instance = manifest.at("instance").get<std::string>();
  for (const auto& run : manifest.at("runs")) {
    LabeledTrace t;
    t.solver = run.at("solver").get<std::string>();
    t.seed = run.at("seed").get<std::uint64_t>();
    t.instance = instance;
    t.records = read_trace_csv((root / run.at("trace").get<std::string>()).string());
    out.push_back(std::move(t));
  }
  return out;
}

StageJumps count_stage_jumps(const RunTrace& trace, double threshold) {
  StageJumps out;
  const auto& recs = trace.records;
  const auto& firsts = trace.stage_first_record;
  for (std::size_t t = 0; t < firsts.size(); ++t) {
    const std::size_t b = firsts[t];
    const std::size_t e = t + 1 < firsts.size() ? firsts[t + 1] : recs.size();
    if (b >= e) continue;
    double low = recs[b].ul_value_eval;
    for (std::size_t i = b + 1; i < e; ++i) {
      low = std::min(low, recs[i].ul_value_eval);
      if (recs[i].ul_value_eval - recs[i - 1].ul_value_eval > threshold) ++out.interior_jumps;
    }
    const bool above_later = recs[b].ul_value_eval - low > threshold;
    const bool above_prev = t == 0 || recs[b].ul_value_eval - recs[b - 1].ul_value_eval > threshold;
    if (above_later && above_prev) ++out.boundary_jumps;
  }
  return out;
}

}  // namespace bilevel::bench
