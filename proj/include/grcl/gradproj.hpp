#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "grcl/model.hpp"

namespace grcl {

enum class ConstraintKind { Source, DomainMemory, Memory };

struct ConstraintTag {
  ConstraintKind kind = ConstraintKind::Source;
  int domain_id = -1;  // set for ConstraintKind::Memory
};

std::string to_string(const ConstraintTag& tag);

/// Proposed update g_t and the gradients it must not conflict with.
struct ConstraintSet {
  FlatGradient proposed;
  std::vector<FlatGradient> rows;
  std::vector<ConstraintTag> tags;  // empty, or one per row

  void add(FlatGradient row, ConstraintTag tag) {
    rows.push_back(std::move(row));
    tags.push_back(tag);
  }
  std::size_t size() const { return rows.size(); }
  /// Equal lengths and finite entries; throws InvalidInput otherwise.
  void validate() const;
  /// Rows stacked into a k x P matrix G.
  Matrix stacked() const;
};

struct ProjectionResult {
  FlatGradient projected;
  Vector multipliers;
  std::vector<bool> active;
  double distortion = 0.0;
  bool changed = false;  // false when g_t was already feasible
};

/// 1e-9 * (1 + ||g_t||).
double default_feasibility_tolerance(const FlatGradient& proposed);

/// Row k is violated iff <g_t, g_k> < -eps_feas.
std::vector<bool> check_violation(const ConstraintSet& cs, double eps_feas);

/// Solver failure; carries the best iterate found and its KKT residual.
class ProjectionError : public std::runtime_error {
 public:
  ProjectionError(const std::string& what, ProjectionResult best, double residual)
      : std::runtime_error(what), best_(std::move(best)), residual_(residual) {}
  const ProjectionResult& best() const { return best_; }
  double residual() const { return residual_; }

 private:
  ProjectionResult best_;
  double residual_;
};

struct ProjectOptions {
  /// Relative ridge added to ill-conditioned subsystems of G G^T.
  double ridge = 1e-3;
  double ridge_condition = 1e12;
  /// Negative means default_feasibility_tolerance(g_t).
  double eps_feas = -1.0;
  int max_iterations = 1000;
};

/// Closest vector to g_t with <z, g_k> >= 0 for every row. Solves the dual
///   min_{u >= 0} 1/2 u^T G G^T u + g_t^T G^T u
/// and reconstructs z = g_t + G^T u*. Returns g_t unchanged when nothing is violated.
ProjectionResult project(const ConstraintSet& cs, const ProjectOptions& opts = {});
ProjectionResult project(const ConstraintSet& cs, double ridge, double eps_feas);

/// Brute-force reference: tries every active set (k <= 12), projects g_t onto
/// the null space of the active rows, keeps the closest feasible candidate.
FlatGradient oracle_project(const ConstraintSet& cs);

}  // namespace grcl
