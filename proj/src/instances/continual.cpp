#include "bilevel/instances/continual.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace bilevel {

namespace {

constexpr std::uint64_t kBlobSalt = 0x626c6f6273ULL;

struct Params {
  Eigen::Map<const Matrix> w1;
  Eigen::Map<const Vector> b1;
  Eigen::Map<const Matrix> w2;
  Eigen::Map<const Vector> b2;
};

Params unpack(const MlpShape& s, const Vector& x, const Vector& y) {
  if (x.size() != s.hidden_params() || y.size() != s.output_params()) {
    throw DimensionError("mlp: parameter sizes " + std::to_string(x.size()) + "/" +
                         std::to_string(y.size()) + ", expected " +
                         std::to_string(s.hidden_params()) + "/" +
                         std::to_string(s.output_params()));
  }
  return Params{Eigen::Map<const Matrix>(x.data(), s.hidden, s.inputs),
                Eigen::Map<const Vector>(x.data() + s.hidden * s.inputs, s.hidden),
                Eigen::Map<const Matrix>(y.data(), s.classes, s.hidden),
                Eigen::Map<const Vector>(y.data() + s.classes * s.hidden, s.classes)};
}

Matrix hidden_layer(const Params& p, const Matrix& features) {
  Matrix pre = features * p.w1.transpose();
  pre.rowwise() += p.b1.transpose();
  return pre.array().tanh().matrix();
}

Matrix logits_of(const Params& p, const Matrix& h) {
  Matrix z = h * p.w2.transpose();
  z.rowwise() += p.b2.transpose();
  return z;
}

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError(path + ": truncated header", 0);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

// Sort rows by label and keep labels below `classes`.
ClassData sorted_by_class(const ClassData& d, std::size_t classes) {
  if (d.features.rows() != static_cast<Index>(d.labels.size())) {
    throw DimensionError("class data: feature rows and labels disagree");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    if (d.labels[i] < 0) throw std::invalid_argument("class data: negative label");
    if (static_cast<std::size_t>(d.labels[i]) < classes) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d.labels[a] < d.labels[b]; });
  ClassData out;
  out.features.resize(static_cast<Index>(order.size()), d.features.cols());
  out.labels.resize(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = d.features.row(static_cast<Index>(order[i]));
    out.labels[i] = d.labels[order[i]];
  }
  return out;
}

// Number of leading rows with label < classes (rows sorted by label).
std::size_t prefix_rows(const ClassData& d, std::size_t classes) {
  return static_cast<std::size_t>(
      std::lower_bound(d.labels.begin(), d.labels.end(), static_cast<int>(classes)) -
      d.labels.begin());
}

}  // namespace

struct ContinualLearningSeq::Data {
  ClassData train;
  ClassData val;
};

namespace {

class ClStageProblem final : public Problem {
 public:
  ClStageProblem(std::shared_ptr<const ContinualLearningSeq::Data> data, std::size_t stage,
                 MlpShape shape, std::size_t train_rows, std::size_t val_rows,
                 std::optional<Vector> carried)
      : data_(std::move(data)),
        stage_(stage),
        shape_(shape),
        train_rows_(train_rows),
        val_rows_(val_rows),
        carried_(std::move(carried)) {
    if (carried_ && carried_->size() != shape_.hidden_params()) {
      throw DimensionError("continual: carried hidden layer has wrong size");
    }
  }

  std::string name() const override { return "continual"; }
  Dims dims() const override { return Dims{shape_.hidden_params(), shape_.output_params()}; }
  DatasetSizes dataset_sizes() const override { return DatasetSizes{val_rows_, train_rows_}; }

  LevelEval ul_eval(const Iterate& it, const Draw& w) const override {
    return eval(data_->val, val_rows_, it, w);
  }
  LevelEval ll_eval(const Iterate& it, const Draw& w) const override {
    return eval(data_->train, train_rows_, it, w);
  }

  // Gradient descent with Nesterov momentum on the (convex) output layer,
  // hidden features fixed. Budgeted: the loss may have no finite minimizer
  // on separable data.
  LowerSolve ll_solve_accurate(const Vector& x, double tol) const override {
    if (!(tol > 0.0)) throw std::invalid_argument("ll_solve_accurate: tol must be positive");
    const Vector zero_y = Vector::Zero(shape_.output_params());
    const Params p0 = unpack(shape_, x, zero_y);
    const Matrix feats = data_->train.features.topRows(static_cast<Index>(train_rows_));
    const Matrix h = hidden_layer(p0, feats);
    const double lip = 0.5 * (h.squaredNorm() / static_cast<double>(h.rows()) + 1.0);
    const double step = 1.0 / lip;
    std::vector<int> labels(data_->train.labels.begin(),
                            data_->train.labels.begin() + static_cast<std::ptrdiff_t>(train_rows_));
    auto grad_at = [&](const Vector& y) { return output_gradient(h, y, labels); };

    LowerSolve s;
    s.y = zero_y;
    s.converged = false;
    Vector prev = s.y;
    for (int it = 0; it < 500; ++it) {
      const double mom = static_cast<double>(it) / (static_cast<double>(it) + 3.0);
      const Vector look = s.y + mom * (s.y - prev);
      const Vector g = grad_at(look);
      prev = s.y;
      s.y = look - step * g;
      s.iterations = it + 1;
      s.residual = grad_at(s.y).norm();
      if (s.residual <= tol) {
        s.converged = true;
        break;
      }
    }
    return s;
  }

  Iterate initial_iterate(StreamSet& streams) const override {
    auto& engine = streams[Stream::init];
    Iterate it;
    if (carried_) {
      it.x = *carried_;
    } else {
      std::normal_distribution<double> w1(0.0, 1.0 / std::sqrt(static_cast<double>(shape_.inputs)));
      it.x = Vector::Zero(shape_.hidden_params());
      for (Index i = 0; i < shape_.hidden * shape_.inputs; ++i) it.x(i) = w1(engine);
    }
    std::normal_distribution<double> w2(0.0, 0.1);
    it.y = Vector::Zero(shape_.output_params());
    for (Index i = 0; i < shape_.classes * shape_.hidden; ++i) it.y(i) = w2(engine);
    return it;
  }

  double validation_error(const Vector& x, const Vector& y) const {
    const Matrix feats = data_->val.features.topRows(static_cast<Index>(val_rows_));
    const std::vector<int> pred = mlp_predict(shape_, x, y, feats);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != data_->val.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(pred.size());
  }

 private:
  LevelEval eval(const ClassData& d, std::size_t rows, const Iterate& it, const Draw& w) const {
    if (w.size == 0) throw std::invalid_argument("continual: empty batch");
    Matrix feats;
    std::vector<int> labels;
    if (w.full) {
      feats = d.features.topRows(static_cast<Index>(rows));
      labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(rows));
    } else {
      feats.resize(static_cast<Index>(w.rows.size()), d.features.cols());
      labels.resize(w.rows.size());
      for (std::size_t i = 0; i < w.rows.size(); ++i) {
        feats.row(static_cast<Index>(i)) = d.features.row(static_cast<Index>(w.rows[i]));
        labels[i] = d.labels[w.rows[i]];
      }
    }
    const MlpEval e = mlp_backprop(shape_, it.x, it.y, feats, labels);
    return LevelEval{e.loss, e.grad_x, e.grad_y};
  }

  Vector output_gradient(const Matrix& h, const Vector& y, const std::vector<int>& labels) const {
    const Eigen::Map<const Matrix> w2(y.data(), shape_.classes, shape_.hidden);
    const Eigen::Map<const Vector> b2(y.data() + shape_.classes * shape_.hidden, shape_.classes);
    Matrix z = h * w2.transpose();
    z.rowwise() += b2.transpose();
    for (Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - mx).exp().matrix();
      z.row(i) /= z.row(i).sum();
      z(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    z /= static_cast<double>(z.rows());
    Vector g(shape_.output_params());
    Eigen::Map<Matrix>(g.data(), shape_.classes, shape_.hidden) = z.transpose() * h;
    g.tail(shape_.classes) = z.colwise().sum().transpose();
    return g;
  }

  std::shared_ptr<const ContinualLearningSeq::Data> data_;
  std::size_t stage_;
  MlpShape shape_;
  std::size_t train_rows_;
  std::size_t val_rows_;
  std::optional<Vector> carried_;
};

}  // namespace

MlpEval mlp_backprop(const MlpShape& shape, const Vector& x, const Vector& y,
                     const Matrix& features, const std::vector<int>& labels) {
  const Params p = unpack(shape, x, y);
  if (features.cols() != shape.inputs) {
    throw DimensionError("mlp: feature width " + std::to_string(features.cols()) +
                         ", expected " + std::to_string(shape.inputs));
  }
  if (features.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("mlp: feature rows and labels disagree");
  }
  if (labels.empty()) throw std::invalid_argument("mlp: no rows");
  const auto b = static_cast<double>(labels.size());

  const Matrix h = hidden_layer(p, features);
  Matrix dz = logits_of(p, h);
  double loss = 0.0;
  for (Index i = 0; i < dz.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= shape.classes) {
      throw std::invalid_argument("mlp: label " + std::to_string(label) + " out of range");
    }
    const double mx = dz.row(i).maxCoeff();
    const double lse = mx + std::log((dz.row(i).array() - mx).exp().sum());
    loss += lse - dz(i, label);
    dz.row(i) = (dz.row(i).array() - lse).exp().matrix();
    dz(i, label) -= 1.0;
  }
  dz /= b;

  MlpEval out;
  out.loss = loss / b;
  out.grad_y.resize(shape.output_params());
  Eigen::Map<Matrix>(out.grad_y.data(), shape.classes, shape.hidden) = dz.transpose() * h;
  out.grad_y.tail(shape.classes) = dz.colwise().sum().transpose();

  const Matrix dpre = ((dz * p.w2).array() * (1.0 - h.array().square())).matrix();
  out.grad_x.resize(shape.hidden_params());
  Eigen::Map<Matrix>(out.grad_x.data(), shape.hidden, shape.inputs) = dpre.transpose() * features;
  out.grad_x.tail(shape.hidden) = dpre.colwise().sum().transpose();
  return out;
}

std::vector<int> mlp_predict(const MlpShape& shape, const Vector& x, const Vector& y,
                             const Matrix& features) {
  const Params p = unpack(shape, x, y);
  if (features.cols() != shape.inputs) throw DimensionError("mlp: feature width mismatch");
  const Matrix z = logits_of(p, hidden_layer(p, features));
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Index i = 0; i < z.rows(); ++i) {
    Index best = 0;
    z.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

ClassData load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open '" + images_path + "'");
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open '" + labels_path + "'");

  const std::uint32_t img_magic = read_be32(img, images_path);
  if ((img_magic >> 8) != 0x08 || (img_magic & 0xff) < 1) {
    throw ParseError(images_path + ": not an unsigned-byte IDX file", 0);
  }
  const std::uint32_t img_dims = img_magic & 0xff;
  const std::uint32_t count = read_be32(img, images_path);
  std::size_t width = 1;
  for (std::uint32_t d = 1; d < img_dims; ++d) width *= read_be32(img, images_path);

  const std::uint32_t lab_magic = read_be32(lab, labels_path);
  if (lab_magic != 0x00000801) throw ParseError(labels_path + ": not an IDX label file", 0);
  const std::uint32_t lab_count = read_be32(lab, labels_path);
  if (lab_count != count) {
    throw ParseError("IDX image count " + std::to_string(count) + " vs label count " +
                         std::to_string(lab_count),
                     0);
  }

  ClassData out;
  out.features.resize(static_cast<Index>(count), static_cast<Index>(width));
  out.labels.resize(count);
  std::vector<unsigned char> buf(width);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(width))) {
      throw ParseError(images_path + ": truncated pixel data", 0);
    }
    for (std::size_t j = 0; j < width; ++j) {
      out.features(static_cast<Index>(i), static_cast<Index>(j)) = buf[j] / 255.0;
    }
    char label = 0;
    if (!lab.read(&label, 1)) throw ParseError(labels_path + ": truncated labels", 0);
    out.labels[i] = static_cast<unsigned char>(label);
  }
  return out;
}

ContinualLearningSeq::ContinualLearningSeq(ClassData train, ClassData val, std::size_t stages,
                                           std::size_t classes_per_stage, Index hidden)
    : stages_(stages), per_stage_(classes_per_stage), hidden_(hidden) {
  if (stages < 1 || classes_per_stage < 1) {
    throw std::invalid_argument("continual: need at least one stage and one class per stage");
  }
  if (hidden < 1) throw std::invalid_argument("continual: hidden width must be positive");
  if (train.features.cols() != val.features.cols()) {
    throw DimensionError("continual: train and validation feature widths differ");
  }
  auto d = std::make_shared<Data>();
  d->train = sorted_by_class(train, stages * classes_per_stage);
  d->val = sorted_by_class(val, stages * classes_per_stage);
  for (std::size_t t = 0; t < stages; ++t) {
    const std::size_t lo = t * classes_per_stage;
    if (prefix_rows(d->train, lo + classes_per_stage) == prefix_rows(d->train, lo) ||
        prefix_rows(d->val, lo + classes_per_stage) == prefix_rows(d->val, lo)) {
      throw std::invalid_argument("continual: stage " + std::to_string(t + 1) +
                                  " has no training or validation rows");
    }
  }
  data_ = std::move(d);
}

ContinualLearningSeq ContinualLearningSeq::synthetic(const SynthOptions& opts) {
  const std::size_t classes = opts.stages * opts.classes_per_stage;
  if (classes < 2) throw std::invalid_argument("continual: need at least two classes");
  if (opts.train_per_class < 1 || opts.val_per_class < 1) {
    throw std::invalid_argument("continual: need rows in every class");
  }
  auto engine = derived_engine(opts.seed, kBlobSalt);
  std::normal_distribution<double> normal(0.0, opts.spread);
  auto make = [&](std::size_t per_class) {
    ClassData d;
    d.features.resize(static_cast<Index>(classes * per_class), 2);
    d.labels.resize(classes * per_class);
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double angle = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(classes);
      for (std::size_t i = 0; i < per_class; ++i, ++row) {
        d.features(static_cast<Index>(row), 0) = opts.radius * std::cos(angle) + normal(engine);
        d.features(static_cast<Index>(row), 1) = opts.radius * std::sin(angle) + normal(engine);
        d.labels[row] = static_cast<int>(c);
      }
    }
    return d;
  };
  ClassData train = make(opts.train_per_class);
  ClassData val = make(opts.val_per_class);
  return ContinualLearningSeq(std::move(train), std::move(val), opts.stages,
                              opts.classes_per_stage, opts.hidden);
}

std::size_t ContinualLearningSeq::train_rows(std::size_t stage) const {
  return prefix_rows(data_->train, classes_at(stage));
}

std::size_t ContinualLearningSeq::val_rows(std::size_t stage) const {
  return prefix_rows(data_->val, classes_at(stage));
}

MlpShape ContinualLearningSeq::shape_at(std::size_t stage) const {
  return MlpShape{data_->train.features.cols(), hidden_, static_cast<Index>(classes_at(stage))};
}

std::unique_ptr<Problem> ContinualLearningSeq::stage_problem(std::size_t t,
                                                             const Vector* carried_x) const {
  if (t >= stages_) {
    throw std::out_of_range("continual: stage " + std::to_string(t) + " out of range (" +
                            std::to_string(stages_) + " stages)");
  }
  std::optional<Vector> carried;
  if (carried_x) carried = *carried_x;
  return std::make_unique<ClStageProblem>(data_, t, shape_at(t), train_rows(t), val_rows(t),
                                          std::move(carried));
}

double cl_validation_error(const Problem& stage_problem, const Vector& x, const Vector& y) {
  const auto* p = dynamic_cast<const ClStageProblem*>(&stage_problem);
  if (!p) throw std::invalid_argument("cl_validation_error: not a continual stage problem");
  return p->validation_error(x, y);
}

}  // namespace bilevel
