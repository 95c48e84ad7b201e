#include "bilevel/bench/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "bilevel/instances/logreg.hpp"
#include "bilevel/instances/quadratic.hpp"

namespace bilevel::bench {

namespace {

constexpr std::uint64_t kQuadSalt = 0x71756164ULL;

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("'" + s + "' is not a number");
  }
  if (used != s.size() || !std::isfinite(v)) throw ConfigError("'" + s + "' is not a number");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("'" + s + "' is not a nonnegative integer");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError("'" + s + "' is out of range");
  }
}

std::int64_t to_i64(const std::string& s) {
  const std::uint64_t v = to_u64(s);
  if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
    throw ConfigError("'" + s + "' is out of range");
  }
  return static_cast<std::int64_t>(v);
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("'" + s + "' is not a boolean (true/false)");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(seeds[i]);
  }
  return out;
}

std::vector<std::uint64_t> to_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError("empty entry in seed list");
    out.push_back(to_u64(item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw ConfigError("seed list is empty");
  std::set<std::uint64_t> uniq(out.begin(), out.end());
  if (uniq.size() != out.size()) throw ConfigError("seed list has duplicates");
  return out;
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  /// Instance kinds the key applies to; empty for all.
  std::vector<std::string> kinds;
};

template <class T>
Field num_field(std::string key, T& ref, std::vector<std::string> kinds = {}) {
  Field f;
  f.key = std::move(key);
  f.kinds = std::move(kinds);
  if constexpr (std::is_same_v<T, double>) {
    f.set = [&ref](const std::string& v) { ref = to_double(v); };
    f.get = [&ref] { return fmt(ref); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.set = [&ref](const std::string& v) { ref = to_bool(v); };
    f.get = [&ref] { return fmt_bool(ref); };
  } else if constexpr (std::is_signed_v<T>) {
    f.set = [&ref](const std::string& v) { ref = static_cast<T>(to_i64(v)); };
    f.get = [&ref] { return std::to_string(ref); };
  } else {
    f.set = [&ref](const std::string& v) { ref = static_cast<T>(to_u64(v)); };
    f.get = [&ref] { return std::to_string(ref); };
  }
  return f;
}

const std::vector<std::string> kQuad{"quadratic", "quadratic_eq"};
const std::vector<std::string> kKinds{"quadratic", "quadratic_eq", "logreg", "continual"};

std::vector<Field> instance_fields(InstanceSpec& s) {
  std::vector<Field> f;
  f.push_back(Field{"kind",
                    [&s](const std::string& v) {
                      if (std::find(kKinds.begin(), kKinds.end(), v) == kKinds.end()) {
                        throw ConfigError("unknown kind '" + v +
                                          "' (quadratic, quadratic_eq, logreg, continual)");
                      }
                      s.kind = v;
                    },
                    [&s] { return s.kind; },
                    {}});
  f.push_back(num_field("data_seed", s.data_seed));
  f.push_back(num_field("n", s.n, kQuad));
  f.push_back(num_field("m", s.m, kQuad));
  f.push_back(num_field("noise_std", s.noise_std, kQuad));
  f.push_back(num_field("coupling", s.coupling, kQuad));
  f.push_back(num_field("convex_only", s.convex_only, {"quadratic"}));
  f.push_back(num_field("constraints", s.constraints, {"quadratic_eq"}));
  f.push_back(num_field("x0_scale", s.x0_scale, kQuad));
  f.push_back(Field{"csv", [&s](const std::string& v) { s.csv = v; }, [&s] { return s.csv; },
                    {"logreg"}});
  f.push_back(num_field("features", s.features, {"logreg"}));
  f.push_back(num_field("rows", s.rows, {"logreg"}));
  f.push_back(num_field("n_t1", s.n_t1, {"logreg"}));
  f.push_back(num_field("n_t2", s.n_t2, {"logreg"}));
  f.push_back(num_field("separation", s.separation, {"logreg"}));
  f.push_back(num_field("lambda_reg", s.lambda_reg, {"logreg"}));
  f.push_back(num_field("ul_superset_in_x", s.ul_superset_in_x, {"logreg"}));
  f.push_back(num_field("stages", s.stages, {"continual"}));
  f.push_back(num_field("classes_per_stage", s.classes_per_stage, {"continual"}));
  f.push_back(num_field("train_per_class", s.train_per_class, {"continual"}));
  f.push_back(num_field("val_per_class", s.val_per_class, {"continual"}));
  f.push_back(num_field("hidden", s.hidden, {"continual"}));
  f.push_back(num_field("radius", s.radius, {"continual"}));
  f.push_back(num_field("spread", s.spread, {"continual"}));
  return f;
}

std::vector<Field> run_fields(BenchConfig& c) {
  std::vector<Field> f;
  f.push_back(Field{"seeds", [&c](const std::string& v) { c.seeds = to_seeds(v); },
                    [&c] { return fmt_seeds(c.seeds); }, {}});
  f.push_back(Field{"output_dir", [&c](const std::string& v) { c.output_dir = v; },
                    [&c] { return c.output_dir; }, {}});
  f.push_back(Field{"workers",
                    [&c](const std::string& v) {
                      c.workers = static_cast<std::size_t>(to_u64(v));
                      if (c.workers < 1) throw ConfigError("workers must be >= 1");
                    },
                    [&c] { return std::to_string(c.workers); }, {}});
  f.push_back(Field{"f_star",
                    [&c](const std::string& v) {
                      if (v == "auto") {
                        c.f_star.reset();
                      } else {
                        c.f_star = to_double(v);
                      }
                    },
                    [&c] { return c.f_star ? fmt(*c.f_star) : std::string("auto"); }, {}});
  return f;
}

std::string sampling_name(SamplingPolicy::Kind k) {
  switch (k) {
    case SamplingPolicy::Kind::fixed_batch:
      return "fixed";
    case SamplingPolicy::Kind::dynamic:
      return "dynamic";
    case SamplingPolicy::Kind::fraction:
      return "fraction";
  }
  return "fixed";
}

std::vector<Field> solver_fields(SolverConfig& c) {
  std::vector<Field> f;
  auto& d = c.direction;
  auto& in = c.inner;
  auto& s = c.sampling;
  f.push_back(Field{"engine", [&d](const std::string& v) { d.engine = parse_engine(v); },
                    [&d] { return std::string(to_string(d.engine)); }, {}});
  f.push_back(Field{"ul_stepsize",
                    [&c](const std::string& v) { c.ul_stepsize = StepsizeSchedule::parse(v); },
                    [&c] { return c.ul_stepsize.to_string(); }, {}});
  f.push_back(Field{"inner", [&in](const std::string& v) { in.kind = parse_inner_kind(v); },
                    [&in] { return std::string(to_string(in.kind)); }, {}});
  f.push_back(Field{"ll_stepsize",
                    [&in](const std::string& v) { in.ll_stepsize = StepsizeSchedule::parse(v); },
                    [&in] { return in.ll_stepsize.to_string(); }, {}});
  f.push_back(num_field("inc_acc_threshold", in.inc_acc_threshold));
  f.push_back(num_field("inc_acc_full_batch", in.inc_acc_full_batch));
  f.push_back(num_field("gamma", in.gamma));
  f.push_back(num_field("hotstart", in.hotstart));
  f.push_back(num_field("max_inner_steps", in.max_steps));
  f.push_back(Field{"sampling",
                    [&s](const std::string& v) {
                      if (v == "fixed") {
                        s.kind = SamplingPolicy::Kind::fixed_batch;
                      } else if (v == "dynamic") {
                        s.kind = SamplingPolicy::Kind::dynamic;
                      } else if (v == "fraction") {
                        s.kind = SamplingPolicy::Kind::fraction;
                      } else {
                        throw ConfigError("sampling must be fixed, dynamic or fraction");
                      }
                    },
                    [&s] { return sampling_name(s.kind); }, {}});
  f.push_back(num_field("ul_batch", s.batch.ul_batch));
  f.push_back(num_field("ll_batch", s.batch.ll_batch));
  f.push_back(num_field("c_d", s.c_d));
  f.push_back(num_field("sigma", s.sigma));
  f.push_back(num_field("q", s.q));
  f.push_back(num_field("cap", s.cap));
  f.push_back(num_field("ul_fraction", s.ul_fraction));
  f.push_back(num_field("ll_fraction", s.ll_fraction));
  f.push_back(num_field("max_iters", c.max_iters));
  f.push_back(num_field("eval_every", c.eval_every));
  f.push_back(num_field("eval_tol", c.eval_tol));
  f.push_back(num_field("eval_true_f", c.eval_true_f));
  f.push_back(Field{"eval_fractions",
                    [&c](const std::string& v) {
                      if (v == "full") {
                        c.eval_fractions.reset();
                        return;
                      }
                      const auto comma = v.find(',');
                      if (comma == std::string::npos) {
                        throw ConfigError("eval_fractions must be 'full' or '<ul>,<ll>'");
                      }
                      c.eval_fractions = std::make_pair(to_double(v.substr(0, comma)),
                                                        to_double(v.substr(comma + 1)));
                    },
                    [&c] {
                      return c.eval_fractions ? fmt(c.eval_fractions->first) + "," +
                                                    fmt(c.eval_fractions->second)
                                              : std::string("full");
                    },
                    {}});
  f.push_back(num_field("record_grad_norm_fd", c.record_grad_norm_fd));
  f.push_back(num_field("darts_scale_curvature", d.darts_scale_curvature));
  f.push_back(num_field("darts_eta_one", d.darts_eta_one));
  f.push_back(num_field("darts_fd_radius", d.darts_fd_radius));
  f.push_back(num_field("cg_tol", d.cg_tol));
  f.push_back(num_field("cg_max_iter", d.cg_max_iter));
  f.push_back(num_field("denom_floor", d.denom_floor));
  return f;
}

bool applies(const Field& f, const std::string& kind) {
  return f.kinds.empty() || std::find(f.kinds.begin(), f.kinds.end(), kind) != f.kinds.end();
}

void apply_section(const std::string& section, const boost::property_tree::ptree& tree,
                   std::vector<Field>& fields, const std::string* kind) {
  for (const auto& [key, node] : tree) {
    if (!node.empty()) throw ConfigError(section + "." + key + ": nested keys are not allowed");
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&key = key](const Field& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("unknown key " + section + "." + key);
    if (kind && !applies(*it, *kind)) {
      throw ConfigError(section + "." + key + " does not apply to kind " + *kind);
    }
    try {
      it->set(node.data());
    } catch (const ConfigError& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    }
  }
}

bool valid_label(const std::string& label) {
  return !label.empty() && std::all_of(label.begin(), label.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-';
  });
}

}  // namespace

BenchConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(e.message(), e.line());
  }

  BenchConfig cfg;
  bool have_instance = false;
  // The instance kind decides which instance keys apply, so read it first.
  for (const auto& [name, node] : tree) {
    if (node.empty() && !node.data().empty()) {
      throw ConfigError("key '" + name + "' outside of any section");
    }
    if (name == "instance") {
      have_instance = true;
      if (auto kind = node.get_optional<std::string>("kind")) {
        auto fields = instance_fields(cfg.instance);
        fields.front().set(*kind);
      }
    }
  }
  if (!have_instance) throw ConfigError("missing [instance] section");

  std::set<std::string> labels;
  for (const auto& [name, node] : tree) {
    if (name == "instance") {
      auto fields = instance_fields(cfg.instance);
      apply_section(name, node, fields, &cfg.instance.kind);
    } else if (name == "run") {
      auto fields = run_fields(cfg);
      apply_section(name, node, fields, nullptr);
    } else if (name.rfind("solver.", 0) == 0) {
      SolverEntry entry;
      entry.label = name.substr(7);
      if (!valid_label(entry.label)) {
        throw ConfigError("section [" + name + "]: labels use letters, digits, '_' and '-'");
      }
      if (!labels.insert(entry.label).second) {
        throw ConfigError("duplicate solver label '" + entry.label + "'");
      }
      auto fields = solver_fields(entry.config);
      apply_section(name, node, fields, nullptr);
      try {
        entry.config.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(name + ": " + e.what());
      }
      cfg.solvers.push_back(std::move(entry));
    } else {
      throw ConfigError("unknown section [" + name + "]");
    }
  }
  if (cfg.solvers.empty()) throw ConfigError("no [solver.<label>] sections");
  return cfg;
}

BenchConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

BenchConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

std::string canonical_text(const BenchConfig& original) {
  BenchConfig cfg = original;
  std::vector<std::string> lines;
  for (const Field& f : instance_fields(cfg.instance)) {
    if (applies(f, cfg.instance.kind)) lines.push_back("instance." + f.key + "=" + f.get());
  }
  for (const Field& f : run_fields(cfg)) lines.push_back("run." + f.key + "=" + f.get());
  for (auto& s : cfg.solvers) {
    for (const Field& f : solver_fields(s.config)) {
      lines.push_back("solver." + s.label + "." + f.key + "=" + f.get());
    }
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string config_hash(const BenchConfig& cfg) { return sha256_hex(canonical_text(cfg)); }

InstanceHandle build_instance(const InstanceSpec& spec) {
  InstanceHandle h;
  h.name = spec.kind;
  if (spec.kind == "quadratic" || spec.kind == "quadratic_eq") {
    if (spec.n < 1 || spec.m < 1) throw ConfigError("instance: n and m must be positive");
    auto engine = derived_engine(spec.data_seed, kQuadSalt);
    std::normal_distribution<double> normal(0.0, 1.0);
    QuadraticBilevel::Options o;
    const double scale = spec.coupling / std::sqrt(static_cast<double>(std::max(spec.n, spec.m)));
    o.A = Matrix(spec.n, spec.m);
    for (Index i = 0; i < spec.n; ++i) {
      for (Index j = 0; j < spec.m; ++j) o.A(i, j) = scale * normal(engine);
    }
    o.noise_std = spec.noise_std;
    o.x0 = Vector::Constant(spec.n, spec.x0_scale);
    if (spec.kind == "quadratic" && spec.convex_only) {
      o.ul_weights = Vector::Ones(spec.n);
      o.ul_weights(0) = 0.0;
      o.A.row(0).setZero();
    }
    if (spec.kind == "quadratic_eq") {
      if (spec.constraints < 1 || spec.constraints >= spec.m) {
        throw ConfigError("instance.constraints must lie in [1, m)");
      }
      o.B = Matrix(spec.constraints, spec.m);
      o.C = Matrix(spec.constraints, spec.n);
      for (Index i = 0; i < spec.constraints; ++i) {
        for (Index j = 0; j < spec.m; ++j) o.B(i, j) = normal(engine);
        for (Index j = 0; j < spec.n; ++j) o.C(i, j) = normal(engine);
      }
    }
    h.problem = std::make_shared<QuadraticBilevel>(std::move(o));
    h.closed_form_f_star = 0.0;
  } else if (spec.kind == "logreg") {
    const LabeledData data = spec.csv.empty()
                                 ? synth_logreg(spec.features, spec.rows, spec.separation,
                                                spec.data_seed)
                                 : logreg_load_csv(spec.csv);
    LogRegBilevel::Options o;
    o.lambda_reg = spec.lambda_reg;
    o.ul_superset_in_x = spec.ul_superset_in_x;
    try {
      h.problem = std::make_shared<LogRegBilevel>(
          logreg_split(data, spec.n_t1, spec.n_t2, spec.data_seed), o);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("instance: ") + e.what());
    }
  } else if (spec.kind == "continual") {
    ContinualLearningSeq::SynthOptions o;
    o.stages = spec.stages;
    o.classes_per_stage = spec.classes_per_stage;
    o.train_per_class = spec.train_per_class;
    o.val_per_class = spec.val_per_class;
    o.hidden = spec.hidden;
    o.radius = spec.radius;
    o.spread = spec.spread;
    o.seed = spec.data_seed;
    try {
      h.sequence = std::make_shared<ContinualLearningSeq>(ContinualLearningSeq::synthetic(o));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("instance: ") + e.what());
    }
  } else {
    throw ConfigError("instance: unknown kind '" + spec.kind + "'");
  }
  return h;
}

void check_solvers(const InstanceHandle& inst, const std::vector<SolverEntry>& solvers) {
  std::unique_ptr<Problem> first_stage;
  const Problem* p = inst.problem.get();
  if (!p) {
    first_stage = inst.sequence->stage_problem(0, nullptr);
    p = first_stage.get();
  }
  for (const auto& s : solvers) {
    try {
      check_capabilities(*p, s.config);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("solver." + s.label + ": " + e.what());
    }
  }
}

}  // namespace bilevel::bench
