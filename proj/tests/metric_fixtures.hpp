#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grcl/metrics.hpp"

namespace grcl::testing {

/// Lower-triangular accuracy matrix with hand-computed summary values.
struct MetricFixture {
  std::string name;
  std::vector<std::vector<double>> rows;  // rows[i] has i + 1 entries
  double acc_true_mean;
  double acc_paper_literal;
  std::optional<double> bwt;  // absent when N < 2

  AccuracyMatrix matrix() const {
    AccuracyMatrix m(rows.size() - 1);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, rows[i][j]);
    return m;
  }
};

inline std::vector<MetricFixture> metric_fixtures() {
  return {
      // 2.4 / 3, 2.4 / 2, 0.80 - 0.85
      {"two targets, mild forgetting", {{0.95}, {0.9, 0.85}, {0.9, 0.8, 0.7}}, 0.8, 1.2, -0.05},
      // 3.04 / 4, 3.04 / 3, ((0.62 - 0.60) + (0.72 - 0.70)) / 2
      {"three targets, positive transfer",
       {{0.9}, {0.9, 0.6}, {0.88, 0.61, 0.7}, {0.9, 0.62, 0.72, 0.8}},
       0.76,
       3.04 / 3.0,
       0.02},
      // 3.6 / 5, 3.6 / 4, diagonal kept exactly
      {"perfect retention",
       {{1.0}, {1.0, 0.5}, {1.0, 0.5, 0.6}, {1.0, 0.5, 0.6, 0.7}, {1.0, 0.5, 0.6, 0.7, 0.8}},
       0.72,
       0.9,
       0.0},
      // 1.2 / 2, 1.2 / 1, BWT undefined
      {"single target", {{0.8}, {0.7, 0.5}}, 0.6, 1.2, std::nullopt},
      // 3 / 3, 3 / 2
      {"all perfect", {{1.0}, {1.0, 1.0}, {1.0, 1.0, 1.0}}, 1.0, 1.5, 0.0},
  };
}

}  // namespace grcl::testing
