#include <bit>
#include <limits>

#include "grcl/errors.hpp"
#include "grcl/gradproj.hpp"

namespace grcl {

// Enumerates active sets A and projects g_t onto {z : G_A z = 0} using an
// orthonormal basis of span(G_A^T) from a pivoted QR. This shares nothing
// with the dual solver in gradproj.cpp.
FlatGradient oracle_project(const ConstraintSet& cs) {
  cs.validate();
  const std::size_t k = cs.size();
  if (k > 12) throw InvalidInput("oracle_project supports at most 12 constraints");
  const FlatGradient& g = cs.proposed;
  const double feas_tol = 1e-9 * (1.0 + g.norm());
  const double tie_tol = 1e-12 * (1.0 + g.norm());

  FlatGradient best = g;
  double best_dist = std::numeric_limits<double>::infinity();
  int best_size = std::numeric_limits<int>::max();

  for (unsigned mask = 0; mask < (1u << k); ++mask) {
    FlatGradient z = g;
    const int size = std::popcount(mask);
    if (size > 0) {
      Matrix basis(g.size(), size);
      int col = 0;
      for (std::size_t i = 0; i < k; ++i)
        if (mask & (1u << i)) basis.col(col++) = cs.rows[i];
      Eigen::ColPivHouseholderQR<Matrix> qr(basis);
      qr.setThreshold(1e-12);
      const auto rank = qr.rank();
      if (rank > 0) {
        const Matrix q = Matrix(qr.householderQ()).leftCols(rank);
        z -= q * (q.transpose() * g);
      }
    }
    bool feasible = true;
    for (const auto& row : cs.rows) feasible = feasible && z.dot(row) >= -feas_tol;
    if (!feasible) continue;
    const double dist = (g - z).norm();
    if (dist < best_dist - tie_tol || (dist <= best_dist + tie_tol && size < best_size)) {
      best = z;
      best_dist = dist;
      best_size = size;
    }
  }
  return best;
}

}  // namespace grcl
