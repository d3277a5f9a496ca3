#include "grcl/gradproj.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "grcl/errors.hpp"

namespace grcl {

namespace {

struct DualSolution {
  Vector u;
  bool converged = false;
  bool used_ridge = false;
  double residual = 0.0;  // largest positive entry of -(H u + c) outside the passive set
};

// Unconstrained minimizer of the dual restricted to the passive coordinates.
Vector solve_passive(const Matrix& H, const Vector& c, const std::vector<Eigen::Index>& passive,
                     const ProjectOptions& opts, bool allow_ridge, bool& used_ridge) {
  const auto m = static_cast<Eigen::Index>(passive.size());
  Matrix hp(m, m);
  Vector cp(m);
  for (Eigen::Index a = 0; a < m; ++a) {
    cp(a) = c(passive[a]);
    for (Eigen::Index b = 0; b < m; ++b) hp(a, b) = H(passive[a], passive[b]);
  }
  if (m == 1) return Vector::Constant(1, -cp(0) / hp(0, 0));

  Eigen::SelfAdjointEigenSolver<Matrix> es(hp, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff();
  const double lmax = es.eigenvalues().maxCoeff();
  const double cond = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
  if (cond <= opts.ridge_condition) return hp.ldlt().solve(-cp);
  if (allow_ridge) {
    used_ridge = true;
    hp.diagonal().array() += opts.ridge * hp.diagonal().mean();
    return hp.ldlt().solve(-cp);
  }
  return hp.completeOrthogonalDecomposition().solve(-cp);
}

// Lawson-Hanson active-set iteration for min_{u >= 0} 1/2 u^T H u + c^T u,
// which is the NNLS problem min_{u >= 0} ||G^T u + g_t||^2 in Gram form.
DualSolution solve_dual(const Matrix& H, const Vector& c, double tol, const ProjectOptions& opts, bool allow_ridge) {
  const Eigen::Index k = H.rows();
  DualSolution sol;
  sol.u = Vector::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  std::vector<bool> blocked(static_cast<std::size_t>(k), false);
  for (Eigen::Index i = 0; i < k; ++i) blocked[static_cast<std::size_t>(i)] = !(H(i, i) > 0.0);

  auto max_free_gradient = [&](Eigen::Index& arg) {
    const Vector w = -(H * sol.u + c);
    double best = -std::numeric_limits<double>::infinity();
    arg = -1;
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      if (passive[ii] || blocked[ii]) continue;
      if (w(i) > best) {
        best = w(i);
        arg = i;
      }
    }
    return best;
  };

  for (int outer = 0; outer < opts.max_iterations; ++outer) {
    Eigen::Index j = -1;
    const double wmax = max_free_gradient(j);
    if (j < 0 || wmax <= tol) {
      sol.converged = true;
      break;
    }
    passive[static_cast<std::size_t>(j)] = true;

    for (Eigen::Index inner = 0; inner <= k; ++inner) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index i = 0; i < k; ++i)
        if (passive[static_cast<std::size_t>(i)]) idx.push_back(i);
      if (idx.empty()) break;
      const Vector s = solve_passive(H, c, idx, opts, allow_ridge, sol.used_ridge);

      bool all_positive = true;
      for (Eigen::Index a = 0; a < s.size(); ++a) all_positive = all_positive && s(a) > 0.0;
      if (all_positive) {
        for (Eigen::Index a = 0; a < s.size(); ++a) sol.u(idx[a]) = s(a);
        break;
      }
      // Rounding can make the entering coordinate non-positive at once; exclude
      // it instead of cycling.
      if (inner == 0) {
        Eigen::Index pos = std::find(idx.begin(), idx.end(), j) - idx.begin();
        if (s(pos) <= 0.0) {
          passive[static_cast<std::size_t>(j)] = false;
          blocked[static_cast<std::size_t>(j)] = true;
          break;
        }
      }
      double alpha = 1.0;
      Eigen::Index blocking = -1;
      for (Eigen::Index a = 0; a < s.size(); ++a) {
        if (s(a) <= 0.0) {
          const double ui = sol.u(idx[a]);
          const double ratio = ui / (ui - s(a));
          if (blocking < 0 || ratio < alpha) {
            alpha = ratio;
            blocking = a;
          }
        }
      }
      for (Eigen::Index a = 0; a < s.size(); ++a) {
        double& ui = sol.u(idx[a]);
        ui += alpha * (s(a) - ui);
        // The blocking coordinate lands on zero exactly; rounding must not keep it passive.
        if (a == blocking || ui <= 0.0) {
          ui = 0.0;
          passive[static_cast<std::size_t>(idx[a])] = false;
        }
      }
    }
  }
  // KKT residual, one-sided: a positive w_i means constraint i is still
  // violated, on the support or off it (blocked coordinates included).
  const Vector w = -(H * sol.u + c);
  sol.residual = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (sol.u(i) > 0.0 || H(i, i) > 0.0) sol.residual = std::max(sol.residual, w(i));
  }
  sol.converged = sol.residual <= tol;
  return sol;
}

ProjectionResult reconstruct(const ConstraintSet& cs, const Matrix& G, const Vector& u) {
  ProjectionResult r;
  r.projected = cs.proposed + G.transpose() * u;
  r.multipliers = u;
  r.active.resize(static_cast<std::size_t>(u.size()));
  for (Eigen::Index i = 0; i < u.size(); ++i) r.active[static_cast<std::size_t>(i)] = u(i) > 0.0;
  r.distortion = (cs.proposed - r.projected).norm();
  r.changed = true;
  return r;
}

double worst_violation(const ProjectionResult& r, const ConstraintSet& cs) {
  double worst = 0.0;
  for (const auto& g : cs.rows) worst = std::max(worst, -r.projected.dot(g));
  return worst;
}

}  // namespace

std::string to_string(const ConstraintTag& tag) {
  switch (tag.kind) {
    case ConstraintKind::Source: return "source";
    case ConstraintKind::DomainMemory: return "domain-memory";
    case ConstraintKind::Memory: return "memory-" + std::to_string(tag.domain_id);
  }
  return "unknown";
}

void ConstraintSet::validate() const {
  if (!proposed.allFinite()) throw InvalidInput("proposed gradient has non-finite entries");
  if (!tags.empty() && tags.size() != rows.size()) throw InvalidInput("constraint tags do not match rows");
  for (const auto& r : rows) {
    if (r.size() != proposed.size()) throw InvalidInput("constraint gradient length differs from g_t");
    if (!r.allFinite()) throw InvalidInput("constraint gradient has non-finite entries");
  }
}

Matrix ConstraintSet::stacked() const {
  Matrix G(static_cast<Eigen::Index>(rows.size()), proposed.size());
  for (std::size_t i = 0; i < rows.size(); ++i) G.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return G;
}

double default_feasibility_tolerance(const FlatGradient& proposed) { return 1e-9 * (1.0 + proposed.norm()); }

std::vector<bool> check_violation(const ConstraintSet& cs, double eps_feas) {
  std::vector<bool> out(cs.rows.size());
  for (std::size_t i = 0; i < cs.rows.size(); ++i) out[i] = cs.proposed.dot(cs.rows[i]) < -eps_feas;
  return out;
}

ProjectionResult project(const ConstraintSet& cs, double ridge, double eps_feas) {
  ProjectOptions opts;
  opts.ridge = ridge;
  opts.eps_feas = eps_feas;
  return project(cs, opts);
}

ProjectionResult project(const ConstraintSet& cs, const ProjectOptions& opts) {
  cs.validate();
  const double eps = opts.eps_feas >= 0.0 ? opts.eps_feas : default_feasibility_tolerance(cs.proposed);
  const auto violated = check_violation(cs, eps);
  const auto k = static_cast<Eigen::Index>(cs.size());
  if (std::none_of(violated.begin(), violated.end(), [](bool v) { return v; })) {
    ProjectionResult r;
    r.projected = cs.proposed;
    r.multipliers = Vector::Zero(k);
    r.active.assign(cs.size(), false);
    return r;
  }

  const Matrix G = cs.stacked();
  const Matrix H = G * G.transpose();
  const Vector c = G * cs.proposed;
  const double tol = 0.1 * eps;

  DualSolution sol = solve_dual(H, c, tol, opts, /*allow_ridge=*/true);
  ProjectionResult result = reconstruct(cs, G, sol.u);
  double violation = worst_violation(result, cs);
  if (sol.used_ridge && violation > eps) {
    // The ridge perturbs the tight constraints; redo the degenerate solves exactly.
    sol = solve_dual(H, c, tol, opts, /*allow_ridge=*/false);
    result = reconstruct(cs, G, sol.u);
    violation = worst_violation(result, cs);
  }
  if (!result.projected.allFinite()) {
    throw ProjectionError("projection produced non-finite values", result, sol.residual);
  }
  if (!sol.converged || violation > eps) {
    throw ProjectionError("dual solver did not reach a feasible point (violation " + std::to_string(violation) +
                              ", residual " + std::to_string(sol.residual) + ")",
                          result, std::max(violation, sol.residual));
  }
  return result;
}

}  // namespace grcl
