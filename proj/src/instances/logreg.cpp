#include "bilevel/instances/logreg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bilevel {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x73706c6974ULL;
constexpr std::uint64_t kSynthSalt = 0x73796e7468ULL;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_number(const std::string& field, double& out) {
  const std::string t = trim(field);
  if (t.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(t, &used);
    return used == t.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Rows of the design matrix selected by a draw; `full_count` rows when full.
Matrix gather(const Matrix& z, const Draw& w, std::size_t full_count) {
  if (w.full) return z.topRows(static_cast<Index>(full_count));
  Matrix out(static_cast<Index>(w.rows.size()), z.cols());
  for (std::size_t i = 0; i < w.rows.size(); ++i) {
    out.row(static_cast<Index>(i)) = z.row(static_cast<Index>(w.rows[i]));
  }
  return out;
}

Vector gather(const Vector& u, const Draw& w, std::size_t full_count) {
  if (w.full) return u.head(static_cast<Index>(full_count));
  Vector out(static_cast<Index>(w.rows.size()));
  for (std::size_t i = 0; i < w.rows.size(); ++i) out(static_cast<Index>(i)) = u(static_cast<Index>(w.rows[i]));
  return out;
}

Vector gather_index(const Draw& w, std::size_t full_count) {
  if (w.full) {
    Vector idx(static_cast<Index>(full_count));
    for (Index i = 0; i < idx.size(); ++i) idx(i) = static_cast<double>(i);
    return idx;
  }
  Vector idx(static_cast<Index>(w.rows.size()));
  for (std::size_t i = 0; i < w.rows.size(); ++i) idx(static_cast<Index>(i)) = static_cast<double>(w.rows[i]);
  return idx;
}

struct RowLoss {
  Vector loss;   // per row
  Vector coeff;  // d loss / d margin-direction: gradient is Z' coeff
};

RowLoss row_losses(const Matrix& z, const Vector& u, const Vector& w) {
  const Vector t = u.cwiseProduct(z * w);
  RowLoss r;
  r.loss.resize(t.size());
  r.coeff.resize(t.size());
  for (Index i = 0; i < t.size(); ++i) {
    r.loss(i) = logistic_loss(t(i));
    r.coeff(i) = -u(i) * sigmoid(-t(i));
  }
  return r;
}

void require_rows(const Draw& w) {
  if (w.size == 0) throw std::invalid_argument("logreg: empty batch");
}

}  // namespace

double logistic_loss(double t) {
  return std::max(-t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

LabeledData logreg_parse_csv(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    double label = 0.0;
    if (first_content) {
      first_content = false;
      if (!parse_number(fields.front(), label)) continue;  // header
    } else if (!parse_number(fields.front(), label)) {
      throw ParseError("label '" + trim(fields.front()) + "' is not a number", line_no);
    }
    if (label == 0.0) {
      label = -1.0;
    } else if (label != 1.0 && label != -1.0) {
      throw ParseError("label " + trim(fields.front()) + " not in {-1, +1} or {0, 1}", line_no);
    }
    if (fields.size() < 2) throw ParseError("row has no feature columns", line_no);
    if (width == 0) width = fields.size() - 1;
    if (fields.size() - 1 != width) {
      throw ParseError("expected " + std::to_string(width) + " features, found " +
                           std::to_string(fields.size() - 1),
                       line_no);
    }
    std::vector<double> row(width);
    for (std::size_t j = 0; j < width; ++j) {
      if (!parse_number(fields[j + 1], row[j])) {
        throw ParseError("column " + std::to_string(j + 2) + ": '" + trim(fields[j + 1]) +
                             "' is not a number",
                         line_no);
      }
    }
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  if (rows.empty()) throw ParseError("no data rows", 0);
  LabeledData out;
  out.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(width));
  out.labels.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      out.features(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    out.labels(static_cast<Index>(i)) = labels[i];
  }
  return out;
}

LabeledData logreg_load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return logreg_parse_csv(in);
}

LogRegSplit logreg_split(const LabeledData& data, std::size_t n_t1, std::size_t n_t2,
                         std::uint64_t seed) {
  if (n_t2 < 1 || n_t2 > n_t1) {
    throw std::invalid_argument("split: need 1 <= N_T2 <= N_T1");
  }
  if (n_t1 > data.rows()) {
    throw std::invalid_argument("split: N_T1 = " + std::to_string(n_t1) + " exceeds " +
                                std::to_string(data.rows()) + " rows");
  }
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto engine = derived_engine(seed, kShuffleSalt);
  std::shuffle(order.begin(), order.end(), engine);
  order.resize(n_t1);

  LogRegSplit out;
  out.superset.features.resize(static_cast<Index>(n_t1), data.features.cols());
  out.superset.labels.resize(static_cast<Index>(n_t1));
  for (std::size_t i = 0; i < n_t1; ++i) {
    out.superset.features.row(static_cast<Index>(i)) = data.features.row(static_cast<Index>(order[i]));
    out.superset.labels(static_cast<Index>(i)) = data.labels(static_cast<Index>(order[i]));
  }
  out.subset_size = n_t2;
  out.source_rows = std::move(order);
  return out;
}

LabeledData synth_logreg(std::size_t n_features, std::size_t n_rows, double separation,
                         std::uint64_t seed) {
  if (n_rows < 2) throw std::invalid_argument("synth_logreg: need at least 2 rows");
  if (n_features < 1) throw std::invalid_argument("synth_logreg: need at least 1 feature");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw std::invalid_argument("synth_logreg: separation must be >= 0");
  }
  auto engine = derived_engine(seed, kSynthSalt);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const auto p = static_cast<Index>(n_features);
  Vector dir(p);
  do {
    for (Index j = 0; j < p; ++j) dir(j) = normal(engine);
  } while (dir.norm() == 0.0);
  dir.normalize();

  LabeledData out;
  out.features.resize(static_cast<Index>(n_rows), p);
  out.labels.resize(static_cast<Index>(n_rows));
  for (Index i = 0; i < static_cast<Index>(n_rows); ++i) {
    const double label = coin(engine) ? 1.0 : -1.0;
    out.labels(i) = label;
    for (Index j = 0; j < p; ++j) {
      out.features(i, j) = normal(engine) + label * 0.5 * separation * dir(j);
    }
  }
  return out;
}

LogRegBilevel::LogRegBilevel(LogRegSplit split, Options opts)
    : n1_(split.superset.rows()),
      n2_(split.subset_size),
      dim_(split.superset.features.cols() + 1),
      lambda_(opts.lambda_reg),
      superset_in_x_(opts.ul_superset_in_x) {
  if (!(lambda_ > 0.0) || !std::isfinite(lambda_)) {
    throw std::invalid_argument("LogRegBilevel: lambda_reg must be positive");
  }
  if (n2_ < 1 || n2_ > n1_) throw std::invalid_argument("LogRegBilevel: bad subset size");
  if (!split.superset.features.allFinite()) {
    throw NonFiniteError("LogRegBilevel: non-finite features");
  }
  z_.resize(static_cast<Index>(n1_), dim_);
  z_.leftCols(dim_ - 1) = split.superset.features;
  z_.col(dim_ - 1).setOnes();
  u_ = std::move(split.superset.labels);
}

void LogRegBilevel::check(const Iterate& it) const {
  if (it.x.size() != dim_ || it.y.size() != dim_) {
    throw DimensionError("logreg: iterate dimension " + std::to_string(it.x.size()) + "/" +
                         std::to_string(it.y.size()) + ", expected " + std::to_string(dim_));
  }
}

LevelEval LogRegBilevel::ul_eval(const Iterate& it, const Draw& w) const {
  check(it);
  require_rows(w);
  const Matrix z = gather(z_, w, n1_);
  const Vector u = gather(u_, w, n1_);
  const Vector idx = gather_index(w, n1_);
  const double b = static_cast<double>(z.rows());
  const double ratio = static_cast<double>(n1_) / static_cast<double>(n2_);
  Vector mask(idx.size());
  for (Index i = 0; i < idx.size(); ++i) {
    mask(i) = idx(i) < static_cast<double>(n2_) ? ratio : 0.0;
  }

  const RowLoss at_x = row_losses(z, u, it.x);
  LevelEval e;
  e.value = mask.dot(at_x.loss) / b;
  e.gx = z.transpose() * mask.cwiseProduct(at_x.coeff) / b;
  if (superset_in_x_) {
    e.value += at_x.loss.sum() / b;
    e.gx += z.transpose() * at_x.coeff / b;
    e.gy = Vector::Zero(dim_);
  } else {
    const RowLoss at_y = row_losses(z, u, it.y);
    e.value += at_y.loss.sum() / b;
    e.gy = z.transpose() * at_y.coeff / b;
  }
  return e;
}

LevelEval LogRegBilevel::ll_eval(const Iterate& it, const Draw& w) const {
  check(it);
  require_rows(w);
  const Matrix z = gather(z_, w, n2_);
  const Vector u = gather(u_, w, n2_);
  const double b = static_cast<double>(z.rows());
  const RowLoss at_y = row_losses(z, u, it.y);
  const Vector gap = it.y - it.x;
  LevelEval e;
  e.value = at_y.loss.sum() / b + 0.5 * lambda_ * gap.squaredNorm();
  e.gy = z.transpose() * at_y.coeff / b + lambda_ * gap;
  e.gx = -lambda_ * gap;
  return e;
}

Vector LogRegBilevel::ll_grad_y(const Iterate& it, const Draw& w) const {
  check(it);
  require_rows(w);
  const Matrix z = gather(z_, w, n2_);
  const Vector u = gather(u_, w, n2_);
  const RowLoss at_y = row_losses(z, u, it.y);
  return z.transpose() * at_y.coeff / static_cast<double>(z.rows()) + lambda_ * (it.y - it.x);
}

LowerHessians LogRegBilevel::ll_hessians(const Iterate& it, const Draw& w) const {
  check(it);
  require_rows(w);
  auto z = std::make_shared<const Matrix>(gather(z_, w, n2_));
  const Vector u = gather(u_, w, n2_);
  const Vector t = u.cwiseProduct(*z * it.y);
  auto weights = std::make_shared<Vector>(t.size());
  for (Index i = 0; i < t.size(); ++i) {
    const double s = sigmoid(t(i));
    (*weights)(i) = s * (1.0 - s) / static_cast<double>(t.size());
  }
  const double lambda = lambda_;
  LinearOperator yy(dim_, dim_, [z, weights, lambda](const Vector& v) -> Vector {
    return z->transpose() * weights->cwiseProduct(*z * v) + lambda * v;
  });
  LinearOperator xy(dim_, dim_, [lambda](const Vector& v) -> Vector { return -lambda * v; });
  return LowerHessians{std::move(yy), std::move(xy)};
}

LowerSolve LogRegBilevel::ll_solve_accurate(const Vector& x, double tol) const {
  if (!(tol > 0.0)) throw std::invalid_argument("ll_solve_accurate: tol must be positive");
  if (x.size() != dim_) throw DimensionError("ll_solve_accurate: x has wrong size");
  const auto rows = static_cast<Index>(n2_);
  const auto z = z_.topRows(rows);
  const Vector u = u_.head(rows);
  const double inv_n = 1.0 / static_cast<double>(n2_);

  auto objective = [&](const Vector& y) {
    return row_losses(z, u, y).loss.sum() * inv_n + 0.5 * lambda_ * (y - x).squaredNorm();
  };

  LowerSolve s;
  s.y = x;
  s.converged = false;
  for (int iter = 0; iter < 100; ++iter) {
    const Vector t = u.cwiseProduct(z * s.y);
    Vector coeff(t.size());
    Vector curv(t.size());
    double value = 0.0;
    for (Index i = 0; i < t.size(); ++i) {
      const double sg = sigmoid(-t(i));
      coeff(i) = -u(i) * sg;
      curv(i) = sg * (1.0 - sg) * inv_n;
      value += logistic_loss(t(i));
    }
    value = value * inv_n + 0.5 * lambda_ * (s.y - x).squaredNorm();
    const Vector grad = z.transpose() * coeff * inv_n + lambda_ * (s.y - x);
    s.residual = grad.norm();
    s.iterations = iter;
    if (s.residual <= tol) {
      s.converged = true;
      return s;
    }
    Matrix hess = z.transpose() * curv.asDiagonal() * z;
    hess.diagonal().array() += lambda_;
    const Vector step = solve_linear(hess, Vector(-grad));
    double t_step = 1.0;
    const double slope = grad.dot(step);
    while (t_step > 1e-10 && objective(s.y + t_step * step) > value + 1e-4 * t_step * slope) {
      t_step *= 0.5;
    }
    s.y += t_step * step;
  }
  return s;
}

double LogRegBilevel::error_rate(const Vector& w) const {
  if (w.size() != dim_) throw DimensionError("error_rate: wrong size");
  const Vector t = u_.cwiseProduct(z_ * w);
  return static_cast<double>((t.array() <= 0.0).count()) / static_cast<double>(n1_);
}

}  // namespace bilevel
