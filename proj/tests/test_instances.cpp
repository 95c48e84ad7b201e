#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "bilevel/errors.hpp"
#include "bilevel/instances/continual.hpp"
#include "bilevel/instances/logreg.hpp"
#include "bilevel/instances/quadratic.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bilevel;
using testing::fd_gradient;
using testing::random_matrix;
using testing::random_vector;
using testing::rel_err;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

QuadraticBilevel quadratic(Matrix a, double noise = 0.0) {
  QuadraticBilevel::Options o;
  o.A = std::move(a);
  o.noise_std = noise;
  return QuadraticBilevel(o);
}

Draw rows_draw(std::vector<std::size_t> rows) {
  Draw d;
  d.size = rows.size();
  d.rows = std::move(rows);
  return d;
}

LogRegBilevel small_logreg(std::uint64_t seed, LogRegBilevel::Options opts = {}) {
  const LabeledData data = synth_logreg(3, 40, 1.5, seed);
  return LogRegBilevel(logreg_split(data, 30, 12, seed), opts);
}

// Plain full-batch gradient descent on the mean logistic loss.
Vector fit_logistic(const LabeledData& d, int iters) {
  const Index p = d.features.cols();
  Vector w = Vector::Zero(p + 1);
  for (int it = 0; it < iters; ++it) {
    Vector g = Vector::Zero(p + 1);
    for (Index i = 0; i < d.features.rows(); ++i) {
      const double u = d.labels(i);
      const double t = u * (d.features.row(i).dot(w.head(p)) + w(p));
      const double s = -u / (1.0 + std::exp(t));
      g.head(p) += s * d.features.row(i).transpose();
      g(p) += s;
    }
    w -= 1.0 * g / static_cast<double>(d.features.rows());
  }
  return w;
}

double accuracy(const LabeledData& d, const Vector& w) {
  const Index p = d.features.cols();
  std::size_t hits = 0;
  for (Index i = 0; i < d.features.rows(); ++i) {
    const double score = d.features.row(i).dot(w.head(p)) + w(p);
    if ((score >= 0 ? 1.0 : -1.0) == d.labels(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(d.features.rows());
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

TEST_CASE("quadratic closed forms") {
  const QuadraticBilevel id = quadratic(Matrix::Identity(2, 2));
  QuadClosedForm c = quad_closed_form(id, vec({1, 1}));
  CHECK(c.y == vec({1, 1}));
  CHECK(c.f == 2.0);
  CHECK(c.grad == vec({2, 2}));
  c = quad_closed_form(id, Vector::Zero(2));
  CHECK(c.f == 0.0);
  CHECK(c.y.norm() == 0.0);
  CHECK(c.grad.norm() == 0.0);
  Matrix a(2, 2);
  a << 1, 0, 0, 2;
  CHECK(quad_closed_form(quadratic(a), vec({1, 1})).grad == vec({2, 5}));

  std::mt19937_64 rng(1);
  QuadraticBilevel::Options o;
  o.A = random_matrix(2, 3, rng);
  o.B = random_matrix(1, 3, rng);
  o.C = random_matrix(1, 2, rng);
  CHECK_THROWS_AS(quad_closed_form(QuadraticBilevel(o), vec({1, 1})), UnsupportedConstraintError);
}

TEST_CASE("quadratic closed form gradient matches finite differences of f") {
  std::mt19937_64 rng(2);
  QuadraticBilevel::Options o;
  o.A = random_matrix(4, 3, rng);
  o.ul_weights = vec({1, 0, 2, 0.5});
  const QuadraticBilevel q(o);
  const Vector x = random_vector(4, rng);
  const auto f = [&q](const Vector& z) { return quad_closed_form(q, z).f; };
  CHECK(rel_err(quad_closed_form(q, x).grad, fd_gradient(f, x, 1e-5)) < 1e-8);
  CHECK(rel_err(quad_closed_form(q, x).grad, Vector(q.reduced_hessian() * x)) < 1e-12);
}

TEST_CASE("noise-free quadratic samples equal the closed-form gradients") {
  std::mt19937_64 rng(3);
  const QuadraticBilevel q = quadratic(random_matrix(3, 2, rng));
  const Iterate it{random_vector(3, rng), random_vector(2, rng)};
  StreamSet s(4);
  const OracleSample o = sample(q, it, BatchSpec{7, 7}, s);
  CHECK(o.gux == it.x);
  CHECK(o.guy == it.y);
  const Vector r = it.y - q.A().transpose() * it.x;
  CHECK(o.gly == r);
  CHECK(o.glx == Vector(-q.A() * r));
}

TEST_CASE("noisy quadratic gradients average to the exact ones") {
  std::mt19937_64 rng(5);
  const double sigma = 0.5;
  const QuadraticBilevel q = quadratic(random_matrix(3, 2, rng), sigma);
  const Iterate it{random_vector(3, rng), random_vector(2, rng)};
  StreamSet s(6);
  const int draws = 10000;
  Vector gy = Vector::Zero(2);
  Vector gx = Vector::Zero(3);
  Vector ux = Vector::Zero(3);
  for (int i = 0; i < draws; ++i) {
    const Draw w = q.draw(Side::lower, 1, s);
    gy += q.ll_grad_y(it, w);
    gx += q.ll_grad_x(it, w);
    ux += q.ul_eval(it, q.draw(Side::upper, 1, s)).gx;
  }
  const Vector r = it.y - q.A().transpose() * it.x;
  const double tol = 3.0 * sigma / 100.0;
  CHECK((gy / draws - r).cwiseAbs().maxCoeff() <= tol);
  CHECK((gx / draws + q.A() * r).cwiseAbs().maxCoeff() <= tol);
  CHECK((ux / draws - it.x).cwiseAbs().maxCoeff() <= tol);
}

TEST_CASE("logistic loss helpers are stable") {
  CHECK(logistic_loss(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(logistic_loss(800.0) >= 0.0);
  CHECK(logistic_loss(-800.0) == doctest::Approx(800.0));
  CHECK(std::isfinite(sigmoid(-800.0)));
  CHECK(sigmoid(0.0) == 0.5);
  for (double t : {-30.0, -2.0, 0.3, 5.0}) {
    CHECK(logistic_loss(t) == doctest::Approx(std::log1p(std::exp(-t))).epsilon(1e-12));
  }
}

TEST_CASE("logreg per-row gradient and proximal term") {
  LabeledData d;
  d.features = Matrix::Zero(1, 3);
  d.labels = vec({1});
  const LogRegBilevel lr(logreg_split(d, 1, 1, 0), {});
  const Iterate zero{Vector::Zero(4), Vector::Zero(4)};
  const LevelEval ll = lr.ll_eval(zero, lr.full_draw(Side::lower));
  CHECK(ll.gy(3) == -0.5);
  CHECK(ll.gy.head(3).norm() == 0.0);
  // Proximal gradient in x vanishes at y = x.
  CHECK(ll.gx.norm() == 0.0);
  CHECK(ll.value == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(lr.ll_eval(zero, rows_draw({})), std::invalid_argument);
}

TEST_CASE("logreg full-batch gradients are means of per-row gradients") {
  const LogRegBilevel lr = small_logreg(3);
  std::mt19937_64 rng(4);
  const Iterate it{random_vector(4, rng), random_vector(4, rng)};
  for (Side side : {Side::upper, Side::lower}) {
    const std::size_t n = side == Side::upper ? 30 : 12;
    Vector gx = Vector::Zero(4);
    Vector gy = Vector::Zero(4);
    for (std::size_t j = 0; j < n; ++j) {
      const LevelEval e = side == Side::upper ? lr.ul_eval(it, rows_draw({j}))
                                              : lr.ll_eval(it, rows_draw({j}));
      gx += e.gx;
      gy += e.gy;
    }
    const LevelEval full = side == Side::upper ? lr.ul_eval(it, lr.full_draw(side))
                                               : lr.ll_eval(it, lr.full_draw(side));
    CHECK(rel_err(Vector(gx / n), full.gx) < 1e-12);
    CHECK(rel_err(Vector(gy / n), full.gy) < 1e-12);
  }
}

TEST_CASE("logreg gradients match finite differences") {
  for (bool superset_in_x : {false, true}) {
    LogRegBilevel::Options opts;
    opts.ul_superset_in_x = superset_in_x;
    const LogRegBilevel lr = small_logreg(5, opts);
    std::mt19937_64 rng(6);
    const Vector x = random_vector(4, rng);
    const Vector y = random_vector(4, rng);
    for (Side side : {Side::upper, Side::lower}) {
      const Draw w = lr.draw(side, 7, rng);
      const auto value = [&](const Vector& xx, const Vector& yy) {
        return side == Side::upper ? lr.ul_eval({xx, yy}, w).value : lr.ll_eval({xx, yy}, w).value;
      };
      const LevelEval e = side == Side::upper ? lr.ul_eval({x, y}, w) : lr.ll_eval({x, y}, w);
      const Vector fx = fd_gradient([&](const Vector& z) { return value(z, y); }, x, 1e-6);
      const Vector fy = fd_gradient([&](const Vector& z) { return value(x, z); }, y, 1e-6);
      CHECK(rel_err(e.gx, fx) < 1e-7);
      CHECK(rel_err(e.gy, fy) < 1e-7);
    }
    if (superset_in_x) {
      CHECK(lr.ul_eval({x, y}, lr.full_draw(Side::upper)).gy.norm() == 0.0);
    }
  }
}

TEST_CASE("logreg LL objective is lambda-strongly convex") {
  const LogRegBilevel lr = small_logreg(7);
  const double lambda = lr.lambda_reg();
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector x = random_vector(4, rng);
    const Vector a = random_vector(4, rng, 3.0);
    const Vector b = random_vector(4, rng, 3.0);
    const Vector mid = 0.5 * (a + b);
    const auto fl = [&](const Vector& y) { return lr.ll_value_full({x, y}); };
    const auto prox = [&](const Vector& y) { return 0.5 * lambda * (y - x).squaredNorm(); };
    const double mu = lambda * (1.0 - 1e-6);
    CHECK(fl(mid) <= 0.5 * (fl(a) + fl(b)) - mu / 8.0 * (a - b).squaredNorm() + 1e-12);
    const auto loss = [&](const Vector& y) { return fl(y) - prox(y); };
    CHECK(loss(mid) <= 0.5 * (loss(a) + loss(b)) + 1e-12);
  }
}

TEST_CASE("logreg CSV parsing") {
  std::istringstream ok("label,a,b\n1,0.5,2\n0,1,-1\n\n-1,3,4\n");
  const LabeledData d = logreg_parse_csv(ok);
  CHECK(d.rows() == 3);
  CHECK(d.labels == vec({1, -1, -1}));
  CHECK(d.features(2, 1) == 4.0);

  std::istringstream headless("1,2\n-1,3\n");
  CHECK(logreg_parse_csv(headless).rows() == 2);

  const auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      logreg_parse_csv(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  CHECK(line_of("label,a\n1,2\n2,3\n") == 3);
  CHECK(line_of("1,2\n1,x\n") == 2);
  CHECK(line_of("1,2,3\n1,2\n") == 2);
  CHECK(line_of("1,2\n-1\n") == 2);
  CHECK_THROWS_AS(logreg_load_csv("/nonexistent/file.csv"), std::runtime_error);
}

TEST_CASE("logreg split") {
  std::istringstream in("1,1\n-1,2\n1,3\n-1,4\n");
  const LabeledData d = logreg_parse_csv(in);
  const LogRegSplit s = logreg_split(d, 4, 2, 9);
  CHECK(s.superset.rows() == 4);
  CHECK(s.subset_size == 2);
  std::vector<std::size_t> sorted = s.source_rows;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(s.superset.features(static_cast<Index>(i), 0) ==
          d.features(static_cast<Index>(s.source_rows[i]), 0));
  }
  CHECK(logreg_split(d, 4, 2, 9).source_rows == s.source_rows);
  CHECK_THROWS_AS(logreg_split(d, 5, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(logreg_split(d, 2, 3, 0), std::invalid_argument);

  const LabeledData big = synth_logreg(2, 37500, 2.0, 1);
  const LogRegBilevel lr(logreg_split(big, 30000, 7500, 1), {});
  CHECK(lr.dataset_sizes().ul == 30000);
  CHECK(lr.dataset_sizes().ll == 7500);
}

TEST_CASE("synthetic logistic data") {
  const LabeledData a = synth_logreg(5, 100, 2.0, 3);
  const LabeledData b = synth_logreg(5, 100, 2.0, 3);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK(synth_logreg(5, 100, 2.0, 4).features != a.features);

  // No separation: a fit generalizes no better than chance.
  const Vector w0 = fit_logistic(synth_logreg(2, 4000, 0.0, 5), 200);
  const double acc0 = accuracy(synth_logreg(2, 4000, 0.0, 6), w0);
  CHECK(acc0 > 0.46);
  CHECK(acc0 < 0.54);

  const LabeledData wide = synth_logreg(2, 2000, 6.0, 7);
  CHECK(accuracy(wide, fit_logistic(wide, 500)) >= 0.99);
}

TEST_CASE("dims are stable across calls") {
  const LogRegBilevel lr = small_logreg(1);
  CHECK(lr.dims().n == 4);
  CHECK(lr.dims().n == lr.dims().n);
  std::mt19937_64 rng(1);
  const QuadraticBilevel q = quadratic(random_matrix(3, 5, rng));
  CHECK(q.dims().n == 3);
  CHECK(q.dims().m == 5);
}

TEST_CASE("MLP loss and gradients") {
  const MlpShape shape{2, 5, 3};
  Matrix z(4, 2);
  z << 1, 0, 0, 1, -1, 2, 0.5, -0.5;
  const std::vector<int> labels{0, 1, 2, 1};

  const MlpEval flat = mlp_backprop(shape, Vector::Zero(shape.hidden_params()),
                                    Vector::Zero(shape.output_params()), z.topRows(2),
                                    {0, 1});
  CHECK(flat.loss == doctest::Approx(std::log(3.0)));
  const MlpShape two{2, 5, 2};
  CHECK(mlp_backprop(two, Vector::Zero(two.hidden_params()), Vector::Zero(two.output_params()),
                     z.topRows(2), {0, 1})
            .loss == doctest::Approx(std::log(2.0)));

  std::mt19937_64 rng(9);
  const Vector x = random_vector(shape.hidden_params(), rng);
  const Vector y = random_vector(shape.output_params(), rng);
  const MlpEval e = mlp_backprop(shape, x, y, z, labels);
  CHECK(e.loss >= 0.0);
  const auto loss_x = [&](const Vector& v) { return mlp_backprop(shape, v, y, z, labels).loss; };
  const auto loss_y = [&](const Vector& v) { return mlp_backprop(shape, x, v, z, labels).loss; };
  const Vector fx = fd_gradient(loss_x, x, 1e-4);
  const Vector fy = fd_gradient(loss_y, y, 1e-4);
  // 20 random coordinates across both blocks.
  std::uniform_int_distribution<Index> pick(0, x.size() + y.size() - 1);
  Vector got(20);
  Vector want(20);
  for (Index i = 0; i < 20; ++i) {
    const Index c = pick(rng);
    got(i) = c < x.size() ? e.grad_x(c) : e.grad_y(c - x.size());
    want(i) = c < x.size() ? fx(c) : fy(c - x.size());
  }
  CHECK(rel_err(got, want) <= 1e-5);

  Matrix z2(8, 2);
  z2 << z, z;
  std::vector<int> l2 = labels;
  l2.insert(l2.end(), labels.begin(), labels.end());
  const MlpEval dup = mlp_backprop(shape, x, y, z2, l2);
  CHECK(dup.loss == doctest::Approx(e.loss).epsilon(1e-14));
  CHECK(rel_err(dup.grad_x, e.grad_x) < 1e-14);
  CHECK(rel_err(dup.grad_y, e.grad_y) < 1e-14);

  CHECK_THROWS_AS(mlp_backprop(shape, x, y, Matrix::Zero(2, 3), {0, 1}), DimensionError);
  CHECK_THROWS_AS(mlp_backprop(shape, Vector::Zero(3), y, z, labels), DimensionError);
  CHECK(mlp_predict(shape, x, y, z).size() == 4);
}

TEST_CASE("continual stages grow the output layer and the data unions") {
  ContinualLearningSeq::SynthOptions so;
  so.stages = 3;
  so.train_per_class = 50;
  so.val_per_class = 20;
  so.hidden = 16;
  const ContinualLearningSeq seq = ContinualLearningSeq::synthetic(so);
  CHECK(seq.shape_at(0).output_params() == 16 * 2 + 2);
  CHECK(seq.shape_at(1).output_params() == 16 * 4 + 4);
  CHECK(seq.val_rows(1) == seq.val_rows(0) + 2 * 20);
  CHECK(seq.train_rows(2) == 3 * 2 * 50);

  const auto p0 = seq.stage_problem(0, nullptr);
  CHECK(p0->dims().m == 34);
  CHECK(p0->dataset_sizes().ul == 40);
  CHECK(p0->dataset_sizes().ll == 100);
  CHECK_FALSE(p0->has_hessians());

  StreamSet s(0);
  const Iterate i0 = p0->initial_iterate(s);
  const auto p1 = seq.stage_problem(1, &i0.x);
  StreamSet s1(0);
  const Iterate i1 = p1->initial_iterate(s1);
  CHECK(i1.x == i0.x);
  CHECK(i1.y.size() == 16 * 4 + 4);
  CHECK(p1->dataset_sizes().ul == 80);
  CHECK_THROWS_AS(seq.stage_problem(3, nullptr), std::out_of_range);

  const double err = cl_validation_error(*p1, i1.x, i1.y);
  CHECK(std::isfinite(err));
  CHECK(err >= 0.0);
  CHECK(err <= 1.0);
}

TEST_CASE("continual stage gradients are unbiased over a partition") {
  ContinualLearningSeq::SynthOptions so;
  so.stages = 2;
  so.train_per_class = 10;
  so.val_per_class = 5;
  so.hidden = 4;
  const ContinualLearningSeq seq = ContinualLearningSeq::synthetic(so);
  const auto p = seq.stage_problem(1, nullptr);
  StreamSet s(1);
  const Iterate it = p->initial_iterate(s);
  const std::size_t n = p->dataset_sizes().ll;
  Vector gy = Vector::Zero(it.y.size());
  for (std::size_t j = 0; j < n; j += 2) gy += p->ll_eval(it, rows_draw({j, j + 1})).gy;
  CHECK(rel_err(Vector(gy / (n / 2)), p->ll_eval(it, p->full_draw(Side::lower)).gy) < 1e-12);
}

TEST_CASE("IDX loader") {
  const auto dir = std::filesystem::temp_directory_path() / "bilevel_idx_test";
  std::filesystem::create_directories(dir);
  const auto img = (dir / "img.idx").string();
  const auto lab = (dir / "lab.idx").string();
  {
    std::ofstream out(img, std::ios::binary);
    write_be32(out, 0x00000803);
    write_be32(out, 2);
    write_be32(out, 2);
    write_be32(out, 2);
    const unsigned char px[8] = {0, 255, 51, 102, 1, 2, 3, 4};
    out.write(reinterpret_cast<const char*>(px), 8);
  }
  {
    std::ofstream out(lab, std::ios::binary);
    write_be32(out, 0x00000801);
    write_be32(out, 2);
    const char l[2] = {3, 7};
    out.write(l, 2);
  }
  const ClassData d = load_idx_pair(img, lab);
  CHECK(d.rows() == 2);
  CHECK(d.features.cols() == 4);
  CHECK(d.features(0, 1) == 1.0);
  CHECK(d.features(0, 2) == doctest::Approx(0.2));
  CHECK(d.labels == std::vector<int>{3, 7});
  {
    std::ofstream out(lab, std::ios::binary);
    write_be32(out, 0x00000801);
    write_be32(out, 3);
    const char l[3] = {3, 7, 1};
    out.write(l, 3);
  }
  CHECK_THROWS_AS(load_idx_pair(img, lab), ParseError);
  CHECK_THROWS_AS(load_idx_pair(lab, img), ParseError);
  std::filesystem::remove_all(dir);
}
