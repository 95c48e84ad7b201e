#include <algorithm>
#include <random>
#include <set>

#include "bilevel/directions.hpp"
#include "bilevel/instances/logreg.hpp"
#include "bilevel/instances/quadratic.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/solvers.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bilevel;
using testing::random_matrix;
using testing::random_vector;

namespace {

LogRegBilevel small_logreg(std::uint64_t seed = 1) {
  const LabeledData data = synth_logreg(4, 80, 1.0, seed);
  return LogRegBilevel(logreg_split(data, 60, 24, seed), LogRegBilevel::Options{});
}

QuadraticBilevel diag_quadratic() {
  QuadraticBilevel::Options o;
  o.A = Matrix::Zero(2, 2);
  o.A(0, 0) = 1;
  o.A(1, 1) = 2;
  return QuadraticBilevel(o);
}

bool same(const OracleSample& a, const OracleSample& b) {
  return a.gux == b.gux && a.guy == b.guy && a.glx == b.glx && a.gly == b.gly &&
         a.fu_value == b.fu_value && a.fl_value == b.fl_value;
}

}  // namespace

TEST_CASE("stream sets are reproducible and streams are independent") {
  StreamSet a(42);
  StreamSet b(42);
  StreamSet c(43);
  CHECK(a[Stream::ul_sampling]() == b[Stream::ul_sampling]());
  CHECK(a[Stream::ll_sampling]() == b[Stream::ll_sampling]());
  StreamSet d(42);
  CHECK(d[Stream::ul_sampling]() != d[Stream::ll_sampling]());
  StreamSet e(42);
  CHECK(e[Stream::ul_sampling]() != c[Stream::ul_sampling]());
  CHECK(derived_engine(1, 2)() == derived_engine(1, 2)());
  CHECK(derived_engine(1, 2)() != derived_engine(1, 3)());
}

TEST_CASE("batch specs clip to the dataset") {
  const BatchSpec s = BatchSpec{512, 512}.clipped(DatasetSizes{3000, 300});
  CHECK(s.ul_batch == 512);
  CHECK(s.ll_batch == 300);
  CHECK_THROWS_AS((BatchSpec{0, 5}.clipped(DatasetSizes{10, 10})), std::invalid_argument);
}

TEST_CASE("row draws are without replacement and inside the level's dataset") {
  const LogRegBilevel p = small_logreg();
  StreamSet s(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Draw u = p.draw(Side::upper, 17, s);
    const Draw l = p.draw(Side::lower, 9, s);
    CHECK(u.size == 17);
    CHECK(l.size == 9);
    CHECK(std::set<std::size_t>(u.rows.begin(), u.rows.end()).size() == 17);
    CHECK(std::set<std::size_t>(l.rows.begin(), l.rows.end()).size() == 9);
    CHECK(*std::max_element(u.rows.begin(), u.rows.end()) < 60);
    CHECK(*std::max_element(l.rows.begin(), l.rows.end()) < 24);
  }
  const Draw full = p.draw(Side::lower, 1000, s);
  CHECK(full.full);
  CHECK(full.size == 24);
}

TEST_CASE("sampling is deterministic given the stream seed") {
  const LogRegBilevel p = small_logreg();
  std::mt19937_64 rng(3);
  const Iterate it{random_vector(5, rng), random_vector(5, rng)};
  StreamSet a(99);
  StreamSet b(99);
  for (int i = 0; i < 5; ++i) {
    const OracleSample sa = sample(p, it, BatchSpec{8, 6}, a);
    const OracleSample sb = sample(p, it, BatchSpec{8, 6}, b);
    CHECK(same(sa, sb));
    const Vector v = random_vector(5, rng);
    CHECK((*sa.hess_yy)(v) == (*sb.hess_yy)(v));
  }
  QuadraticBilevel::Options o;
  o.A = random_matrix(3, 4, rng);
  o.noise_std = 0.3;
  const QuadraticBilevel q(o);
  const Iterate qi{random_vector(3, rng), random_vector(4, rng)};
  StreamSet c(5);
  StreamSet d(5);
  CHECK(same(sample(q, qi, BatchSpec{4, 4}, c), sample(q, qi, BatchSpec{4, 4}, d)));
}

TEST_CASE("Hessian actions are present iff advertised") {
  const LogRegBilevel p = small_logreg();
  const Iterate it{Vector::Zero(5), Vector::Zero(5)};
  const OracleSample s = sample_full(p, it);
  CHECK(s.hess_yy.has_value());
  CHECK(s.hess_xy.has_value());
  CHECK(s.hess_yy->rows() == 5);
  CHECK(s.hess_xy->rows() == 5);
}

TEST_CASE("averaging gradients over a partition of the data gives the full gradient") {
  const LogRegBilevel p = small_logreg(4);
  std::mt19937_64 rng(8);
  const Iterate it{random_vector(5, rng), random_vector(5, rng)};
  const LevelEval full_u = p.ul_eval(it, p.full_draw(Side::upper));
  const LevelEval full_l = p.ll_eval(it, p.full_draw(Side::lower));
  for (std::size_t parts : {2u, 3u, 4u, 6u}) {
    Vector gx = Vector::Zero(5);
    Vector gy = Vector::Zero(5);
    Vector lx = Vector::Zero(5);
    Vector ly = Vector::Zero(5);
    const std::size_t nu = 60 / parts;
    const std::size_t nl = 24 / parts;
    for (std::size_t b = 0; b < parts; ++b) {
      Draw u;
      u.size = nu;
      for (std::size_t j = 0; j < nu; ++j) u.rows.push_back(b * nu + j);
      Draw l;
      l.size = nl;
      for (std::size_t j = 0; j < nl; ++j) l.rows.push_back(b * nl + j);
      const LevelEval eu = p.ul_eval(it, u);
      const LevelEval el = p.ll_eval(it, l);
      gx += eu.gx / static_cast<double>(parts);
      gy += eu.gy / static_cast<double>(parts);
      lx += el.gx / static_cast<double>(parts);
      ly += el.gy / static_cast<double>(parts);
    }
    CHECK((gx - full_u.gx).norm() < 1e-10);
    CHECK((gy - full_u.gy).norm() < 1e-10);
    CHECK((lx - full_l.gx).norm() < 1e-10);
    CHECK((ly - full_l.gy).norm() < 1e-10);
  }
}

TEST_CASE("advertised Hessian actions match finite differences of the LL gradient") {
  std::mt19937_64 rng(12);
  const LogRegBilevel lr = small_logreg(2);
  QuadraticBilevel::Options o;
  o.A = random_matrix(5, 5, rng);
  const QuadraticBilevel q(o);
  for (const Problem* p : std::initializer_list<const Problem*>{&lr, &q}) {
    for (int trial = 0; trial < 10; ++trial) {
      const Iterate it{random_vector(5, rng), random_vector(5, rng)};
      const Draw full = p->full_draw(Side::lower);
      const LowerHessians h = p->ll_hessians(it, full);
      const Vector v = random_vector(5, rng);
      const double step = 1e-5;
      Iterate plus = it;
      Iterate minus = it;
      plus.y += step * v;
      minus.y -= step * v;
      const Vector fd_yy = (p->ll_eval(plus, full).gy - p->ll_eval(minus, full).gy) / (2 * step);
      const Vector fd_xy = (p->ll_eval(plus, full).gx - p->ll_eval(minus, full).gx) / (2 * step);
      CHECK(testing::rel_err(h.yy(v), fd_yy) < 1e-5);
      CHECK(testing::rel_err(h.xy(v), fd_xy) < 1e-5);
    }
  }
}

TEST_CASE("accessed-point accounting") {
  AccessCounter c;
  CHECK(c.total() == 0);
  c.record(SampleEvent{512, 512, 0});
  CHECK(c.total() == 1024);
  AccessCounter h;
  h.record(SampleEvent{512, 512, 512});
  CHECK(h.total() == 1536);
}

TEST_CASE("true_f on the quadratic instance") {
  const QuadraticBilevel q = diag_quadratic();
  Vector x(2);
  x << 1, 1;
  // f = 1/2 |x|^2 + 1/2 |A'x|^2 = 1 + 2.5
  CHECK(true_f(q, x, 1e-12).f == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(true_f(q, Vector::Zero(2), 1e-12).f == 0.0);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    QuadraticBilevel::Options o;
    o.A = random_matrix(4, 6, rng);
    const QuadraticBilevel r(o);
    const Vector z = random_vector(4, rng);
    const double closed = quad_closed_form(r, z).f;
    const double tight = std::abs(true_f(r, z, 1e-12).f - closed);
    const double loose = std::abs(true_f(r, z, 1e-4).f - closed);
    CHECK(tight < 1e-6);
    CHECK(tight <= loose + 1e-10);
  }
}

TEST_CASE("true_f on logistic regression uses a converged LL solve") {
  const LogRegBilevel p = small_logreg(6);
  std::mt19937_64 rng(1);
  const Vector x = random_vector(5, rng);
  const ReducedValue r = true_f(p, x, 1e-10);
  CHECK(r.converged);
  CHECK(p.ll_eval(Iterate{x, r.y}, p.full_draw(Side::lower)).gy.norm() < 1e-9);
  CHECK(r.f == doctest::Approx(p.ul_value_full(Iterate{x, r.y})));
}

TEST_CASE("constraint sets report Jacobians and LICQ") {
  std::mt19937_64 rng(9);
  QuadraticBilevel::Options o;
  o.A = random_matrix(3, 5, rng);
  o.B = random_matrix(2, 5, rng);
  o.C = random_matrix(2, 3, rng);
  const QuadraticBilevel q(o);
  REQUIRE(q.constraints() != nullptr);
  const ConstraintSet& cs = *q.constraints();
  CHECK(cs.size() == 2);
  CHECK(cs.equality_only());
  const Vector x = random_vector(3, rng);
  const Vector y = random_vector(5, rng);
  const auto [gx, gy] = cs.jacobians(x, y);
  CHECK((gx + o.C).norm() < 1e-14);
  CHECK((gy - o.B).norm() < 1e-14);
  CHECK(cs.licq_holds(x, y));
}
