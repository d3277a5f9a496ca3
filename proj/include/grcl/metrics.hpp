#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "grcl/model.hpp"

namespace grcl {

/// R(i, j): test accuracy on domain j after finishing task i, for 0 <= j <= i <= N.
/// Domain 0 is the source.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t num_targets);

  std::size_t num_targets() const { return rows_.size() - 1; }
  /// Throws InvalidInput for j > i or values outside [0, 1].
  void set(std::size_t i, std::size_t j, double value);
  double at(std::size_t i, std::size_t j) const;
  bool filled(std::size_t i, std::size_t j) const;
  bool row_complete(std::size_t i) const;
  std::vector<double> row(std::size_t i) const;

  /// Rows i, columns j; cells above the diagonal are empty.
  void save_csv(const std::filesystem::path& path) const;
  static AccuracyMatrix load_csv(const std::filesystem::path& path);

 private:
  std::vector<std::vector<std::optional<double>>> rows_;
};

/// Fraction of rows whose argmax logit equals the label (ties toward the lowest class).
double evaluate_accuracy(const ParamVector& params, const Batch& test);

enum class AccNormalization { TrueMean, PaperLiteral };

/// Mean of the final row over its N+1 entries. PaperLiteral divides the same
/// sum by N instead, which can exceed 1.
double compute_acc(const AccuracyMatrix& r, AccNormalization norm = AccNormalization::TrueMean);

/// (1/(N-1)) * sum_{i=1}^{N-1} (R(N, i) - R(i, i)); requires N >= 2.
double compute_bwt(const AccuracyMatrix& r);

/// Mean of R(N, j) over the target domains j = 1..N.
double mean_target_accuracy(const AccuracyMatrix& r);

}  // namespace grcl
