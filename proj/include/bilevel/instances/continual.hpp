#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/problem.hpp"

namespace bilevel {

/// Two-layer perceptron: inputs -> tanh hidden layer -> softmax over classes.
/// Hidden parameters (the UL vector) are W1 (hidden x inputs, column-major)
/// then b1; output parameters (the LL vector) are W2 (classes x hidden,
/// column-major) then b2.
struct MlpShape {
  Index inputs = 2;
  Index hidden = 16;
  Index classes = 2;

  Index hidden_params() const { return hidden * inputs + hidden; }
  Index output_params() const { return classes * hidden + classes; }
};

struct MlpEval {
  double loss = 0.0;
  Vector grad_x;
  Vector grad_y;
};

/// Mean cross-entropy over the rows and its gradients in both parameter
/// blocks. Labels lie in [0, classes). DimensionError on shape mismatch.
MlpEval mlp_backprop(const MlpShape& shape, const Vector& x, const Vector& y,
                     const Matrix& features, const std::vector<int>& labels);

/// Predicted class per row.
std::vector<int> mlp_predict(const MlpShape& shape, const Vector& x, const Vector& y,
                             const Matrix& features);

struct ClassData {
  Matrix features;
  std::vector<int> labels;
  std::size_t rows() const { return labels.size(); }
};

/// IDX image and label files (big-endian headers), pixels scaled to [0, 1].
/// Throws ParseError on malformed headers or mismatched counts.
ClassData load_idx_pair(const std::string& images_path, const std::string& labels_path);

/// A sequence of classification tasks over growing label sets. Stage t
/// (0-based) adds classes [t c, (t + 1) c) for c classes per stage; the UL
/// objective at stage t is the mean loss on the union of the validation rows
/// of stages 0..t, the LL objective the mean loss on the union of the
/// training rows.
class ContinualLearningSeq {
 public:
  struct SynthOptions {
    std::size_t stages = 5;
    std::size_t classes_per_stage = 2;
    std::size_t train_per_class = 3000;
    std::size_t val_per_class = 1000;
    /// Class c has center radius * (cos, sin)(2 pi c / classes) and
    /// isotropic standard deviation spread.
    double radius = 4.0;
    double spread = 0.7;
    Index hidden = 16;
    std::uint64_t seed = 0;
  };

  ContinualLearningSeq(ClassData train, ClassData val, std::size_t stages,
                       std::size_t classes_per_stage, Index hidden);

  static ContinualLearningSeq synthetic(const SynthOptions& opts);

  std::size_t stages() const { return stages_; }
  std::size_t classes_at(std::size_t stage) const { return (stage + 1) * per_stage_; }
  std::size_t train_rows(std::size_t stage) const;
  std::size_t val_rows(std::size_t stage) const;
  MlpShape shape_at(std::size_t stage) const;

  /// Problem for stage t. x starts from `carried_x` when given (hidden layer
  /// carried forward), the output layer is drawn afresh from the init stream.
  /// std::out_of_range for t >= stages().
  std::unique_ptr<Problem> stage_problem(std::size_t t, const Vector* carried_x) const;

  struct Data;

 private:
  std::shared_ptr<const Data> data_;
  std::size_t stages_;
  std::size_t per_stage_;
  Index hidden_;
};

/// Fraction of misclassified rows of the stage-t validation union.
double cl_validation_error(const Problem& stage_problem, const Vector& x, const Vector& y);

}  // namespace bilevel
