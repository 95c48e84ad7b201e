#include "bilevel/problem.hpp"

#include <algorithm>
#include <numeric>

namespace bilevel {

namespace {

std::uint32_t lo32(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); }
std::uint32_t hi32(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

}  // namespace

StreamSet::StreamSet(std::uint64_t master_seed) : master_(master_seed) {
  for (std::size_t i = 0; i < engines_.size(); ++i) {
    std::seed_seq seq{lo32(master_seed), hi32(master_seed), static_cast<std::uint32_t>(i),
                      0x5eedu};
    engines_[i].seed(seq);
  }
}

std::mt19937_64 derived_engine(std::uint64_t key, std::uint64_t salt) {
  std::seed_seq seq{lo32(key), hi32(key), lo32(salt), hi32(salt)};
  return std::mt19937_64(seq);
}

BatchSpec BatchSpec::clipped(const DatasetSizes& sizes) const {
  if (ul_batch == 0 || ll_batch == 0) throw std::invalid_argument("batch sizes must be positive");
  return BatchSpec{std::min(ul_batch, sizes.ul), std::min(ll_batch, sizes.ll)};
}

ConstraintSet::ConstraintSet(std::vector<Constraint> items, Index n, Index m)
    : items_(std::move(items)), n_(n), m_(m) {}

bool ConstraintSet::equality_only() const {
  return std::all_of(items_.begin(), items_.end(),
                     [](const Constraint& c) { return c.kind == ConstraintKind::equality; });
}

std::pair<Matrix, Matrix> ConstraintSet::jacobians(const Vector& x, const Vector& y) const {
  const auto rows = static_cast<Index>(items_.size());
  Matrix gx(rows, n_);
  Matrix gy(rows, m_);
  for (Index i = 0; i < rows; ++i) {
    const ConstraintEval e = items_[static_cast<std::size_t>(i)].eval(x, y);
    if (e.grad_x.size() != n_ || e.grad_y.size() != m_) {
      throw DimensionError("constraint gradient has wrong dimension");
    }
    gx.row(i) = e.grad_x.transpose();
    gy.row(i) = e.grad_y.transpose();
  }
  return {gx, gy};
}

std::pair<Vector, Vector> ConstraintSet::curvature_apply(const Vector& x, const Vector& y,
                                                         const Vector& z, const Vector& dx,
                                                         const Vector& dy) const {
  if (z.size() != static_cast<Index>(items_.size())) {
    throw DimensionError("multiplier count does not match constraint count");
  }
  Vector hx = Vector::Zero(n_);
  Vector hy = Vector::Zero(m_);
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& c = items_[i];
    if (!c.hessian_apply || z(static_cast<Index>(i)) == 0.0) continue;
    auto [cx, cy] = c.hessian_apply(x, y, dx, dy);
    hx += z(static_cast<Index>(i)) * cx;
    hy += z(static_cast<Index>(i)) * cy;
  }
  return {hx, hy};
}

bool ConstraintSet::licq_holds(const Vector& x, const Vector& y, double rel_tol) const {
  if (items_.empty()) return true;
  if (static_cast<Index>(items_.size()) >= m_) return false;
  const Matrix gy = jacobians(x, y).second;
  const Eigen::JacobiSVD<Matrix> svd(gy);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return false;
  const auto rank = (sv.array() > rel_tol * sv(0)).count();
  return rank == static_cast<Index>(items_.size());
}

Draw Problem::draw(Side side, std::size_t size, std::mt19937_64& engine) const {
  if (size == 0) throw std::invalid_argument("draw: batch size must be positive");
  const DatasetSizes sizes = dataset_sizes();
  const std::size_t population = side == Side::upper ? sizes.ul : sizes.ll;
  Draw d;
  if (size >= population) {
    d.size = population;
    d.full = true;
  } else {
    std::vector<std::size_t> all(population);
    std::iota(all.begin(), all.end(), std::size_t{0});
    d.rows.reserve(size);
    std::sample(all.begin(), all.end(), std::back_inserter(d.rows), size, engine);
    d.size = size;
  }
  return d;
}

Draw Problem::draw(Side side, std::size_t size, StreamSet& streams) const {
  return draw(side, size, streams[side == Side::upper ? Stream::ul_sampling : Stream::ll_sampling]);
}

LowerHessians Problem::ll_hessians(const Iterate&, const Draw&) const {
  throw CapabilityError(name() + ": no Hessian capability");
}

double Problem::ul_value_full(const Iterate& it) const {
  return ul_eval(it, full_draw(Side::upper)).value;
}

double Problem::ll_value_full(const Iterate& it) const {
  return ll_eval(it, full_draw(Side::lower)).value;
}

Iterate Problem::initial_iterate(StreamSet&) const {
  const Dims d = dims();
  return Iterate{Vector::Zero(d.n), Vector::Zero(d.m)};
}

Draw Problem::full_draw(Side side) const {
  const DatasetSizes sizes = dataset_sizes();
  Draw d;
  d.size = side == Side::upper ? sizes.ul : sizes.ll;
  d.full = true;
  return d;
}

Batch draw_batch(const Problem& p, const BatchSpec& spec, StreamSet& streams) {
  Batch b;
  b.ul = p.draw(Side::upper, spec.ul_batch, streams);
  b.ll = p.draw(Side::lower, spec.ll_batch, streams);
  return b;
}

OracleSample sample(const Problem& p, const Iterate& it, const Batch& batch) {
  const LevelEval u = p.ul_eval(it, batch.ul);
  const LevelEval l = p.ll_eval(it, batch.ll);
  OracleSample s;
  s.gux = u.gx;
  s.guy = u.gy;
  s.glx = l.gx;
  s.gly = l.gy;
  s.fu_value = u.value;
  s.fl_value = l.value;
  if (p.has_hessians()) {
    LowerHessians h = p.ll_hessians(it, batch.ll);
    s.hess_yy = std::move(h.yy);
    s.hess_xy = std::move(h.xy);
  }
  return s;
}

OracleSample sample(const Problem& p, const Iterate& it, const BatchSpec& spec,
                    StreamSet& streams) {
  return sample(p, it, draw_batch(p, spec, streams));
}

OracleSample sample_full(const Problem& p, const Iterate& it) {
  return sample(p, it, Batch{p.full_draw(Side::upper), p.full_draw(Side::lower)});
}

ReducedValue true_f(const Problem& p, const Vector& x, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("true_f: tol must be positive");
  LowerSolve s = p.ll_solve_accurate(x, tol);
  ReducedValue out;
  out.f = p.ul_value_full(Iterate{x, s.y});
  out.y = std::move(s.y);
  out.converged = s.converged;
  return out;
}

}  // namespace bilevel
