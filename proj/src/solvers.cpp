#include "bilevel/solvers.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace bilevel {

namespace {

double positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::invalid_argument(std::string(what) + " must be positive and finite");
  }
  return v;
}

constexpr std::array<std::pair<InnerKind, std::string_view>, 3> kInnerNames{{
    {InnerKind::one_step, "one_step"},
    {InnerKind::inc_acc, "inc_acc"},
    {InnerKind::k_squared, "k_squared"},
}};

std::size_t fraction_of(double frac, std::size_t population) {
  const auto b = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(population)));
  return std::max<std::size_t>(1, std::min(b, population));
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double fd_grad_norm(const Problem& p, const Vector& x, double tol) {
  Vector probe = x;
  double sq = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(x(i)));
    probe(i) = x(i) + h;
    const double up = true_f(p, probe, tol).f;
    probe(i) = x(i) - h;
    const double down = true_f(p, probe, tol).f;
    probe(i) = x(i);
    const double g = (up - down) / (2.0 * h);
    sq += g * g;
  }
  return std::sqrt(sq);
}

TraceRecord evaluate(const Problem& p, const SolverConfig& cfg, std::int64_t k,
                     const Iterate& it, std::uint64_t accessed, double wall, StreamSet& streams) {
  TraceRecord r;
  r.k = k;
  r.accessed = accessed;
  r.wall_seconds = wall;
  if (cfg.eval_fractions) {
    const DatasetSizes sizes = p.dataset_sizes();
    auto& engine = streams[Stream::eval];
    const Draw ul = p.draw(Side::upper, fraction_of(cfg.eval_fractions->first, sizes.ul), engine);
    const Draw ll = p.draw(Side::lower, fraction_of(cfg.eval_fractions->second, sizes.ll), engine);
    r.ul_value_eval = p.ul_eval(it, ul).value;
    r.ll_value_eval = p.ll_eval(it, ll).value;
  } else {
    r.ul_value_eval = p.ul_value_full(it);
    r.ll_value_eval = p.ll_value_full(it);
  }
  r.f_true = cfg.eval_true_f ? true_f(p, it.x, cfg.eval_tol).f
                             : std::numeric_limits<double>::quiet_NaN();
  if (cfg.record_grad_norm_fd) r.grad_norm_fd = fd_grad_norm(p, it.x, cfg.eval_tol);
  return r;
}

Iterate starting_point(const Problem& p, const SolverConfig& cfg, StreamSet& streams) {
  Iterate start = cfg.start ? *cfg.start : p.initial_iterate(streams);
  const Dims d = p.dims();
  if (start.x.size() != d.n || start.y.size() != d.m) {
    throw DimensionError("starting point does not match problem dimensions");
  }
  require_finite(start.x, "starting x");
  require_finite(start.y, "starting y");
  start.x = project(start.x, p.projection_x());
  return start;
}

OracleSample first_order_sample(const Problem& p, const Iterate& it, const Batch& batch) {
  const LevelEval u = p.ul_eval(it, batch.ul);
  const LevelEval l = p.ll_eval(it, batch.ll);
  OracleSample s;
  s.gux = u.gx;
  s.guy = u.gy;
  s.glx = l.gx;
  s.gly = l.gy;
  s.fu_value = u.value;
  s.fl_value = l.value;
  return s;
}

bool has_constraints(const Problem& p) {
  const ConstraintSet* cs = p.constraints();
  return cs && !cs->empty();
}

}  // namespace

StepsizeSchedule StepsizeSchedule::fixed(double alpha) {
  return StepsizeSchedule(Fixed{positive(alpha, "fixed stepsize")});
}

StepsizeSchedule StepsizeSchedule::harmonic(double c0) {
  return StepsizeSchedule(Harmonic{positive(c0, "harmonic c0")});
}

StepsizeSchedule StepsizeSchedule::strongly_convex(double c) {
  return StepsizeSchedule(StronglyConvex{positive(c, "strong convexity constant c")});
}

StepsizeSchedule StepsizeSchedule::sqrt_decay(double alpha_bar) {
  return StepsizeSchedule(SqrtDecay{positive(alpha_bar, "sqrt_decay alpha_bar")});
}

StepsizeSchedule StepsizeSchedule::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("stepsize '" + text + "': expected <kind>:<value>");
  }
  const std::string kind = text.substr(0, colon);
  const std::string value = text.substr(colon + 1);
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("stepsize '" + text + "': bad number '" + value + "'");
  }
  if (kind == "fixed") return fixed(v);
  if (kind == "harmonic") return harmonic(v);
  if (kind == "strongly_convex") return strongly_convex(v);
  if (kind == "sqrt_decay") return sqrt_decay(v);
  throw std::invalid_argument("stepsize '" + text +
                              "': kind must be fixed, harmonic, strongly_convex or sqrt_decay");
}

std::string StepsizeSchedule::to_string() const {
  std::ostringstream out;
  out.precision(17);
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Fixed>) {
          out << "fixed:" << s.alpha;
        } else if constexpr (std::is_same_v<T, Harmonic>) {
          out << "harmonic:" << s.c0;
        } else if constexpr (std::is_same_v<T, StronglyConvex>) {
          out << "strongly_convex:" << s.c;
        } else {
          out << "sqrt_decay:" << s.alpha_bar;
        }
      },
      v_);
  return out.str();
}

double StepsizeSchedule::at(std::int64_t k) const {
  if (k < 1) throw std::invalid_argument("stepsize index k must be >= 1");
  const auto kd = static_cast<double>(k);
  return std::visit(
      [&](const auto& s) -> double {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Fixed>) {
          return s.alpha;
        } else if constexpr (std::is_same_v<T, Harmonic>) {
          return s.c0 / kd;
        } else if constexpr (std::is_same_v<T, StronglyConvex>) {
          return 2.0 / (s.c * (kd + 1.0));
        } else {
          return s.alpha_bar / std::sqrt(kd);
        }
      },
      v_);
}

double stepsize_at(const StepsizeSchedule& s, std::int64_t k) { return s.at(k); }

std::string_view to_string(InnerKind k) {
  for (const auto& [kind, name] : kInnerNames) {
    if (kind == k) return name;
  }
  return "unknown";
}

InnerKind parse_inner_kind(std::string_view name) {
  for (const auto& [kind, n] : kInnerNames) {
    if (n == name) return kind;
  }
  throw std::invalid_argument("unknown inner policy '" + std::string(name) +
                              "' (expected one_step, inc_acc, k_squared)");
}

std::int64_t inner_step_count(const InnerPolicy& policy, std::int64_t k,
                              std::int64_t current_steps) {
  std::int64_t steps = 1;
  switch (policy.kind) {
    case InnerKind::one_step:
      steps = 1;
      break;
    case InnerKind::inc_acc:
      steps = current_steps;
      break;
    case InnerKind::k_squared:
      steps = k * k;
      break;
  }
  if (policy.max_steps > 0) steps = std::min(steps, policy.max_steps);
  return std::max<std::int64_t>(steps, 1);
}

InnerResult inner_solve(const Problem& p, const Vector& x, const Vector& y_start,
                        const InnerPolicy& policy, std::int64_t k, std::int64_t current_steps,
                        std::size_t ll_batch, StreamSet& streams) {
  if (k < 1) throw std::invalid_argument("inner_solve: k must be >= 1");
  if (current_steps < 1) throw std::invalid_argument("inner_solve: step count must be >= 1");
  const ProjectionSet ys = p.projection_y(x);
  const bool constrained = !ys.is_all_space();
  const double fixed_beta = policy.kind == InnerKind::k_squared ? 0.0 : policy.ll_stepsize.at(k);

  InnerResult out;
  out.steps = inner_step_count(policy, k, current_steps);
  Iterate it{x, y_start};
  for (std::int64_t i = 1; i <= out.steps; ++i) {
    const double beta =
        policy.kind == InnerKind::k_squared ? policy.gamma / static_cast<double>(i) : fixed_beta;
    const Draw w = p.draw(Side::lower, ll_batch, streams);
    it.y -= beta * p.ll_grad_y(it, w);
    if (constrained) it.y = project(it.y, ys);
    out.accessed += w.size;
  }
  require_finite(it.y, "inner_solve");
  out.y = std::move(it.y);
  return out;
}

std::int64_t inc_acc_update(std::int64_t current_steps, double fu_prev, double fu_cur,
                            double threshold) {
  if (current_steps < 1) throw std::invalid_argument("inc_acc_update: step count must be >= 1");
  return std::abs(fu_cur - fu_prev) < threshold ? current_steps + 1 : current_steps;
}

std::size_t dynamic_batch_size(double c_d, double alpha, double sigma, std::int64_t q,
                               std::size_t cap) {
  positive(c_d, "C_D");
  positive(alpha, "alpha");
  positive(sigma, "sigma");
  if (q < 1) throw std::invalid_argument("q must be positive");
  if (cap < 1) throw std::invalid_argument("cap must be positive");
  const double noise = sigma * std::sqrt(static_cast<double>(q));
  const double target = c_d * alpha;
  const double ratio = noise / target;
  const double want = std::ceil(ratio * ratio);
  if (!(want < static_cast<double>(cap))) return cap;
  auto b = std::max<std::size_t>(1, static_cast<std::size_t>(want));
  // Guard the rounding of the square so the bound holds as evaluated.
  while (b < cap && noise / std::sqrt(static_cast<double>(b)) > target) ++b;
  while (b > 1 && noise / std::sqrt(static_cast<double>(b - 1)) <= target) --b;
  return b;
}

SamplingPolicy SamplingPolicy::fixed(std::size_t ul_batch, std::size_t ll_batch) {
  SamplingPolicy s;
  s.kind = Kind::fixed_batch;
  s.batch = BatchSpec{ul_batch, ll_batch};
  return s;
}

SamplingPolicy SamplingPolicy::dynamic(double c_d, double sigma, std::int64_t q,
                                       std::size_t cap) {
  SamplingPolicy s;
  s.kind = Kind::dynamic;
  s.c_d = positive(c_d, "C_D");
  s.sigma = positive(sigma, "sigma");
  if (q < 1) throw std::invalid_argument("q must be positive");
  if (cap < 1) throw std::invalid_argument("cap must be positive");
  s.q = q;
  s.cap = cap;
  return s;
}

SamplingPolicy SamplingPolicy::fractions(double ul, double ll) {
  SamplingPolicy s;
  s.kind = Kind::fraction;
  if (!(ul > 0.0 && ul <= 1.0) || !(ll > 0.0 && ll <= 1.0)) {
    throw std::invalid_argument("batch fractions must lie in (0, 1]");
  }
  s.ul_fraction = ul;
  s.ll_fraction = ll;
  return s;
}

BatchSpec SamplingPolicy::at(double alpha, const DatasetSizes& sizes) const {
  switch (kind) {
    case Kind::fixed_batch:
      return batch.clipped(sizes);
    case Kind::dynamic: {
      const std::size_t b = dynamic_batch_size(c_d, alpha, sigma, q, cap);
      return BatchSpec{b, b}.clipped(sizes);
    }
    case Kind::fraction:
      return BatchSpec{fraction_of(ul_fraction, sizes.ul), fraction_of(ll_fraction, sizes.ll)};
  }
  return batch.clipped(sizes);
}

void SolverConfig::validate() const {
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  positive(eval_tol, "eval_tol");
  positive(direction.darts_eta, "darts_eta");
  positive(direction.darts_fd_radius, "darts_fd_radius");
  positive(direction.cg_tol, "cg_tol");
  positive(direction.denom_floor, "denom_floor");
  if (direction.cg_max_iter < 1) throw std::invalid_argument("cg_max_iter must be >= 1");
  positive(inner.inc_acc_threshold, "inc_acc threshold");
  positive(inner.gamma, "gamma");
  if (inner.max_steps < 0) throw std::invalid_argument("inner max_steps must be >= 0");
  if (sampling.kind == SamplingPolicy::Kind::fixed_batch &&
      (sampling.batch.ul_batch == 0 || sampling.batch.ll_batch == 0)) {
    throw std::invalid_argument("batch sizes must be positive");
  }
  if (eval_fractions) {
    const auto [u, l] = *eval_fractions;
    if (!(u > 0.0 && u <= 1.0) || !(l > 0.0 && l <= 1.0)) {
      throw std::invalid_argument("evaluation fractions must lie in (0, 1]");
    }
  }
}

void check_capabilities(const Problem& p, const SolverConfig& config) {
  config.validate();
  const Engine e = config.direction.engine;
  const bool constrained = has_constraints(p);
  const std::string who = p.name() + ": engine " + std::string(to_string(e));
  switch (e) {
    case Engine::adjoint_exact:
    case Engine::bsg_h:
      if (!p.has_hessians()) throw CapabilityError(who + " needs Hessian capability");
      [[fallthrough]];
    case Engine::bsg_1:
    case Engine::darts:
      if (constrained) throw CapabilityError(who + " does not handle a constrained lower level");
      break;
    case Engine::lq:
      if (!p.has_hessians()) throw CapabilityError(who + " needs Hessian capability");
      if (constrained && !p.constraints()->equality_only()) {
        throw UnsupportedConstraintError(who + " handles equality constraints only");
      }
      break;
  }
}

RunTrace run_bsg(const Problem& p, const SolverConfig& config) {
  StreamSet streams(config.master_seed);
  return run_bsg(p, config, streams);
}

RunTrace run_bsg(const Problem& p, const SolverConfig& cfg, StreamSet& streams) {
  check_capabilities(p, cfg);
  const Engine engine = cfg.direction.engine;
  if (engine == Engine::darts) throw std::invalid_argument("run_bsg: use run_darts for darts");

  RunTrace trace;
  trace.instance = p.name();
  trace.solver = std::string(to_string(engine));
  trace.seed = streams.master_seed();

  const Iterate start = starting_point(p, cfg, streams);
  const ProjectionSet xs = p.projection_x();
  const DatasetSizes sizes = p.dataset_sizes();
  const bool inc_acc = cfg.inner.kind == InnerKind::inc_acc;
  Vector x = start.x;
  Vector y_tilde = start.y;
  std::int64_t steps = 1;
  std::optional<double> prev_fu;
  std::uint64_t accessed = 0;
  double wall = 0.0;

  trace.records.push_back(evaluate(p, cfg, 0, Iterate{x, y_tilde}, accessed, wall, streams));
  for (std::int64_t k = 1; k <= cfg.max_iters; ++k) {
    const auto t0 = Clock::now();
    const double alpha = cfg.ul_stepsize.at(k);
    const BatchSpec spec = cfg.sampling.at(alpha, sizes);

    const Vector& y_start = cfg.inner.hotstart ? y_tilde : start.y;
    InnerResult inner =
        inner_solve(p, x, y_start, cfg.inner, k, steps, spec.ll_batch, streams);
    accessed += inner.accessed;
    trace.inner_steps.push_back(inner.steps);
    y_tilde = std::move(inner.y);

    const Batch batch = draw_batch(p, spec, streams);
    const Iterate at{x, y_tilde};
    Vector d;
    double fu = 0.0;
    if (engine == Engine::lq) {
      LQResult r = lq_direction(p, x, y_tilde, batch);
      accessed += r.used.ul_gradient + r.used.ll_gradient + r.used.ll_hessian;
      d = std::move(r.dx);
      fu = r.ul_value;
    } else if (engine == Engine::bsg_1) {
      const OracleSample s = first_order_sample(p, at, batch);
      accessed += batch.ul.size + batch.ll.size;
      d = bsg1_direction(s, cfg.direction);
      fu = s.fu_value;
    } else {
      const OracleSample s = sample(p, at, batch);
      accessed += batch.ul.size + 2 * batch.ll.size;
      d = adjoint_direction(s, cfg.direction);
      fu = s.fu_value;
    }
    x = project(x + alpha * d, xs);
    require_finite(x, "run_bsg iterate");

    if (inc_acc && !cfg.inner.inc_acc_full_batch) {
      if (prev_fu) steps = inc_acc_update(steps, *prev_fu, fu, cfg.inner.inc_acc_threshold);
      prev_fu = fu;
    }
    wall += seconds_since(t0);

    if (k % cfg.eval_every == 0) {
      TraceRecord rec = evaluate(p, cfg, k, Iterate{x, y_tilde}, accessed, wall, streams);
      if (inc_acc && cfg.inner.inc_acc_full_batch) {
        steps = inc_acc_update(steps, trace.records.back().ul_value_eval, rec.ul_value_eval,
                               cfg.inner.inc_acc_threshold);
      }
      trace.records.push_back(rec);
    }
  }
  trace.final_iterate = Iterate{x, y_tilde};
  trace.accessed_total = accessed;
  trace.wall_total = wall;
  return trace;
}

RunTrace run_darts(const Problem& p, const SolverConfig& config) {
  StreamSet streams(config.master_seed);
  return run_darts(p, config, streams);
}

RunTrace run_darts(const Problem& p, const SolverConfig& cfg, StreamSet& streams) {
  check_capabilities(p, cfg);
  if (cfg.direction.engine != Engine::darts) {
    throw std::invalid_argument("run_darts: engine must be darts");
  }

  RunTrace trace;
  trace.instance = p.name();
  trace.solver = "darts";
  trace.seed = streams.master_seed();

  const Iterate start = starting_point(p, cfg, streams);
  const ProjectionSet xs = p.projection_x();
  const DatasetSizes sizes = p.dataset_sizes();
  Vector x = start.x;
  Vector y = start.y;
  std::uint64_t accessed = 0;
  double wall = 0.0;
  DirectionSpec dspec = cfg.direction;

  trace.records.push_back(evaluate(p, cfg, 0, Iterate{x, y}, accessed, wall, streams));
  for (std::int64_t k = 1; k <= cfg.max_iters; ++k) {
    const auto t0 = Clock::now();
    const double alpha = cfg.ul_stepsize.at(k);
    const double eta = cfg.inner.ll_stepsize.at(k);
    const BatchSpec spec = cfg.sampling.at(alpha, sizes);
    const Batch batch = draw_batch(p, spec, streams);

    Vector y_tilde = y - eta * p.ll_grad_y(Iterate{x, y}, batch.ll);
    accessed += batch.ll.size;

    dspec.darts_eta = eta;
    const DartsDirection r = darts_direction(p, x, y, y_tilde, batch, dspec);
    accessed += r.used.ul_gradient + r.used.ll_gradient + r.used.ll_hessian;
    x = project(x + alpha * r.d, xs);
    require_finite(x, "run_darts iterate");
    y = std::move(y_tilde);
    require_finite(y, "run_darts lower iterate");
    trace.inner_steps.push_back(1);
    wall += seconds_since(t0);

    if (k % cfg.eval_every == 0) {
      trace.records.push_back(evaluate(p, cfg, k, Iterate{x, y}, accessed, wall, streams));
    }
  }
  trace.final_iterate = Iterate{x, y};
  trace.accessed_total = accessed;
  trace.wall_total = wall;
  return trace;
}

RunTrace run_solver(const Problem& p, const SolverConfig& config) {
  StreamSet streams(config.master_seed);
  return run_solver(p, config, streams);
}

RunTrace run_solver(const Problem& p, const SolverConfig& config, StreamSet& streams) {
  if (config.direction.engine == Engine::darts) return run_darts(p, config, streams);
  return run_bsg(p, config, streams);
}

RunTrace run_stages(const StageFactory& factory, std::size_t stage_count,
                    const SolverConfig& config) {
  if (stage_count == 0) throw std::invalid_argument("run_stages: no stages");
  StreamSet streams(config.master_seed);
  RunTrace out;
  out.seed = config.master_seed;
  std::optional<Vector> carried;
  std::int64_t k_offset = 0;
  for (std::size_t t = 0; t < stage_count; ++t) {
    const std::unique_ptr<Problem> p = factory(t, carried ? &*carried : nullptr);
    if (!p) throw std::invalid_argument("run_stages: factory returned no problem");
    SolverConfig cfg = config;
    if (t > 0) cfg.start.reset();
    RunTrace tr = run_solver(*p, cfg, streams);
    if (t == 0) {
      out.instance = tr.instance;
      out.solver = tr.solver;
    }
    out.stage_starts.push_back(k_offset);
    out.stage_first_record.push_back(out.records.size());
    for (TraceRecord r : tr.records) {
      r.k += k_offset;
      r.accessed += out.accessed_total;
      r.wall_seconds += out.wall_total;
      out.records.push_back(r);
    }
    out.inner_steps.insert(out.inner_steps.end(), tr.inner_steps.begin(), tr.inner_steps.end());
    k_offset += cfg.max_iters;
    out.accessed_total += tr.accessed_total;
    out.wall_total += tr.wall_total;
    carried = tr.final_iterate.x;
    out.final_iterate = std::move(tr.final_iterate);
  }
  return out;
}

}  // namespace bilevel
