#include "bilevel/bench/demos.hpp"

#include <map>
#include <stdexcept>

namespace bilevel::bench {

namespace {

const char* kQuadratic = R"ini(
[instance]
kind = quadratic
n = 10
m = 10
noise_std = 0.1
coupling = 1.0
data_seed = 7

[run]
seeds = 0,1,2
output_dir = demo_quadratic

[solver.bsg_h]
engine = bsg_h
ul_stepsize = harmonic:0.5
inner = k_squared
gamma = 1
max_inner_steps = 1024
max_iters = 500
eval_every = 10

[solver.bsg_1]
engine = bsg_1
ul_stepsize = harmonic:0.5
inner = k_squared
gamma = 1
max_inner_steps = 1024
max_iters = 500
eval_every = 10

[solver.adjoint_exact]
engine = adjoint_exact
ul_stepsize = harmonic:0.5
inner = k_squared
gamma = 1
max_inner_steps = 1024
max_iters = 500
eval_every = 10
)ini";

const char* kLogreg = R"ini(
[instance]
kind = logreg
features = 20
rows = 3750
n_t1 = 3000
n_t2 = 750
separation = 2.0
lambda_reg = 0.1
data_seed = 11

[run]
seeds = 0,1,2,3,4
output_dir = demo_logreg

[solver.bsg_1-1step]
engine = bsg_1
ul_stepsize = harmonic:10
ll_stepsize = harmonic:10
inner = one_step
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.bsg_1-incacc]
engine = bsg_1
ul_stepsize = harmonic:10
ll_stepsize = harmonic:10
inner = inc_acc
inc_acc_threshold = 0.0001
max_inner_steps = 20
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.bsg_h-1step]
engine = bsg_h
ul_stepsize = harmonic:10
ll_stepsize = harmonic:10
inner = one_step
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.bsg_h-incacc]
engine = bsg_h
ul_stepsize = harmonic:10
ll_stepsize = harmonic:10
inner = inc_acc
inc_acc_threshold = 0.0001
max_inner_steps = 20
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.darts]
engine = darts
ul_stepsize = harmonic:1
ll_stepsize = fixed:0.003
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100
)ini";

const char* kLogregDarts = R"ini(
[instance]
kind = logreg
features = 20
rows = 3750
n_t1 = 3000
n_t2 = 750
separation = 2.0
lambda_reg = 0.1
data_seed = 11

[run]
seeds = 0,1,2,3,4
output_dir = demo_logreg_darts

[solver.darts]
engine = darts
ul_stepsize = harmonic:1
ll_stepsize = fixed:0.003
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.darts-scaled]
engine = darts
darts_scale_curvature = true
ul_stepsize = harmonic:1
ll_stepsize = fixed:0.003
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.darts-eta1]
engine = darts
darts_eta_one = true
ul_stepsize = harmonic:1
ll_stepsize = fixed:0.003
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100

[solver.darts-both]
engine = darts
darts_scale_curvature = true
darts_eta_one = true
ul_stepsize = harmonic:1
ll_stepsize = fixed:0.003
ul_batch = 512
ll_batch = 512
max_iters = 3000
eval_every = 100
)ini";

const char* kContinual = R"ini(
[instance]
kind = continual
stages = 5
classes_per_stage = 2
train_per_class = 3000
val_per_class = 1000
hidden = 16
data_seed = 3

[run]
seeds = 0,1,2,3,4
output_dir = demo_continual

[solver.bsg_1-1step]
engine = bsg_1
ul_stepsize = fixed:0.007
ll_stepsize = fixed:0.007
inner = one_step
sampling = fraction
ul_fraction = 0.005
ll_fraction = 0.001
max_iters = 400
eval_every = 20
eval_true_f = false
eval_fractions = 0.05,0.01

[solver.bsg_1-incacc]
engine = bsg_1
ul_stepsize = fixed:0.007
ll_stepsize = fixed:0.007
inner = inc_acc
inc_acc_threshold = 0.1
max_inner_steps = 20
sampling = fraction
ul_fraction = 0.005
ll_fraction = 0.001
max_iters = 400
eval_every = 20
eval_true_f = false
eval_fractions = 0.05,0.01

[solver.darts]
engine = darts
ul_stepsize = fixed:0.007
ll_stepsize = fixed:0.007
sampling = fraction
ul_fraction = 0.005
ll_fraction = 0.001
max_iters = 400
eval_every = 20
eval_true_f = false
eval_fractions = 0.05,0.01
)ini";

const char* kLqConstrained = R"ini(
[instance]
kind = quadratic_eq
n = 6
m = 8
constraints = 2
noise_std = 0.05
coupling = 1.0
data_seed = 5

[run]
seeds = 0,1,2
output_dir = demo_lq

[solver.lq]
engine = lq
ul_stepsize = harmonic:0.3
inner = inc_acc
inc_acc_threshold = 0.0001
max_inner_steps = 50
max_iters = 1000
eval_every = 10
)ini";

const std::map<std::string, std::string>& table() {
  static const std::map<std::string, std::string> t{
      {"quadratic", kQuadratic},
      {"logreg", kLogreg},
      {"logreg-darts-variants", kLogregDarts},
      {"continual", kContinual},
      {"lq-constrained", kLqConstrained},
  };
  return t;
}

}  // namespace

const std::vector<std::string>& demo_names() {
  static const std::vector<std::string> names{"quadratic", "logreg", "logreg-darts-variants",
                                              "continual", "lq-constrained"};
  return names;
}

const std::string& demo_config(const std::string& name) {
  const auto& t = table();
  const auto it = t.find(name);
  if (it == t.end()) {
    std::string known;
    for (const auto& n : demo_names()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown demo '" + name + "' (" + known + ")");
  }
  return it->second;
}

}  // namespace bilevel::bench
