#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/problem.hpp"

namespace bilevel {

/// Rows of features with labels in {-1, +1}.
struct LabeledData {
  Matrix features;  // rows x p
  Vector labels;    // rows
  std::size_t rows() const { return static_cast<std::size_t>(labels.size()); }
};

/// Reads "label,f1,f2,..." rows. The header line is optional; labels are
/// -1/+1 or 0/1 (0 becomes -1). Throws ParseError carrying the line number.
LabeledData logreg_load_csv(const std::string& path);
LabeledData logreg_parse_csv(std::istream& in);

/// Superset of n_t1 rows and, within it, the first n_t2 rows as the subset.
struct LogRegSplit {
  LabeledData superset;
  std::size_t subset_size = 0;
  /// Source row of each superset row.
  std::vector<std::size_t> source_rows;
};

/// Seeded shuffle, then the first n_t1 rows form the superset and its first
/// n_t2 rows the subset. std::invalid_argument when the sizes do not fit.
LogRegSplit logreg_split(const LabeledData& data, std::size_t n_t1, std::size_t n_t2,
                         std::uint64_t seed);

/// Two Gaussian clouds N(+-separation/2 * u, I) along a random unit u, labels
/// by cloud with equal probability.
LabeledData synth_logreg(std::size_t n_features, std::size_t n_rows, double separation,
                         std::uint64_t seed);

/// log(1 + exp(-t)), stable for large |t|.
double logistic_loss(double t);
/// 1 / (1 + exp(-t)), stable.
double sigmoid(double t);

/// Bilevel logistic regression. x = (c, b) and y = (c~, b~) are hyperplanes
/// with the bias last. Over the superset rows j (the UL data, N1 of them) the
/// UL objective averages
///   l_j(y) + (N1/N2) [j in subset] l_j(x),
/// which in expectation is the superset loss in y plus the subset loss in x.
/// The LL objective averages l_j(y) over the subset rows (N2) and adds
/// lambda/2 |y - x|^2.
///
/// With ul_superset_in_x the UL row term becomes l_j(x) + (N1/N2)[j in
/// subset] l_j(x), so y leaves the UL objective.
class LogRegBilevel final : public Problem {
 public:
  struct Options {
    double lambda_reg = 0.1;
    bool ul_superset_in_x = false;
  };

  LogRegBilevel(LogRegSplit split, Options opts);

  std::string name() const override { return "logreg"; }
  Dims dims() const override { return Dims{dim_, dim_}; }
  DatasetSizes dataset_sizes() const override { return DatasetSizes{n1_, n2_}; }
  bool has_hessians() const override { return true; }

  LevelEval ul_eval(const Iterate& it, const Draw& w) const override;
  LevelEval ll_eval(const Iterate& it, const Draw& w) const override;
  Vector ll_grad_y(const Iterate& it, const Draw& w) const override;
  LowerHessians ll_hessians(const Iterate& it, const Draw& w) const override;
  /// Damped Newton on the full LL objective from y = x.
  LowerSolve ll_solve_accurate(const Vector& x, double tol) const override;

  double lambda_reg() const { return lambda_; }
  /// Features with the constant bias column appended (superset rows).
  const Matrix& design() const { return z_; }
  const Vector& labels() const { return u_; }

  /// Fraction of superset rows misclassified by hyperplane w.
  double error_rate(const Vector& w) const;

 private:
  void check(const Iterate& it) const;

  Matrix z_;
  Vector u_;
  std::size_t n1_;
  std::size_t n2_;
  Index dim_;
  double lambda_;
  bool superset_in_x_;
};

}  // namespace bilevel
