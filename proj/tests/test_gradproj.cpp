#include <doctest.h>

#include <cmath>
#include <limits>

#include "grcl/errors.hpp"
#include "grcl/gradproj.hpp"
#include "test_support.hpp"

using namespace grcl;
using grcl::testing::random_vector;

namespace {

FlatGradient vec(std::initializer_list<double> v) {
  FlatGradient out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) out(i++) = e;
  return out;
}

ConstraintSet random_set(Eigen::Index p, std::size_t k, std::uint64_t seed) {
  ConstraintSet cs;
  cs.proposed = random_vector(p, seed);
  for (std::size_t i = 0; i < k; ++i) cs.add(random_vector(p, seed * 31 + i + 1), {ConstraintKind::Memory, static_cast<int>(i)});
  return cs;
}

double slackness(const ConstraintSet& cs, const ProjectionResult& r) {
  double worst = 0.0;
  for (std::size_t i = 0; i < cs.size(); ++i)
    worst = std::max(worst, std::abs(r.multipliers(static_cast<Eigen::Index>(i)) * r.projected.dot(cs.rows[i])));
  return worst;
}

}  // namespace

TEST_CASE("single halfspace fixture") {
  ConstraintSet cs;
  cs.proposed = vec({1.0, -2.0});
  cs.add(vec({0.0, 1.0}), {});
  const auto r = project(cs);
  CHECK(r.changed);
  CHECK(std::abs(r.projected(0) - 1.0) <= 1e-12);
  CHECK(std::abs(r.projected(1)) <= 1e-12);
  CHECK(r.multipliers(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r.distortion == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r.active == std::vector<bool>{true});
}

TEST_CASE("orthant fixture: only the violated row is active") {
  ConstraintSet cs;
  cs.proposed = vec({1.0, -1.0});
  cs.add(vec({0.0, 1.0}), {ConstraintKind::Source});
  cs.add(vec({1.0, 0.0}), {ConstraintKind::DomainMemory});
  const auto r = project(cs);
  CHECK(std::abs(r.projected(0) - 1.0) <= 1e-10);
  CHECK(std::abs(r.projected(1)) <= 1e-10);
  CHECK(std::abs(r.multipliers(0) - 1.0) <= 1e-10);
  CHECK(std::abs(r.multipliers(1)) <= 1e-10);
  CHECK(r.active == std::vector<bool>{true, false});
}

TEST_CASE("violation check at the tolerance boundary") {
  ConstraintSet cs;
  cs.proposed = vec({1.0, 0.0});
  cs.add(vec({-1e-3, 1.0}), {});
  cs.add(vec({0.0, 1.0}), {});
  cs.add(vec({1.0, 0.0}), {});
  CHECK(check_violation(cs, 1e-4) == std::vector<bool>{true, false, false});
  CHECK(check_violation(cs, 1e-3) == std::vector<bool>{false, false, false});
  CHECK(default_feasibility_tolerance(vec({3.0, 4.0})) == doctest::Approx(6e-9).epsilon(1e-15));

  // Orthogonal and aligned rows leave g_t untouched, bit for bit.
  ConstraintSet ok;
  ok.proposed = vec({1.0, 2.0});
  ok.add(vec({2.0, -1.0}), {});
  ok.add(vec({1.0, 2.0}), {});
  const auto r = project(ok);
  CHECK_FALSE(r.changed);
  CHECK(r.projected == ok.proposed);
  CHECK(r.distortion == 0.0);
  CHECK(r.multipliers.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("projection agrees with the active-set oracle") {
  for (Eigen::Index p : {2, 8, 32}) {
    for (std::size_t k : {1u, 2u, 5u}) {
      for (std::uint64_t s = 0; s < 20; ++s) {
        const auto cs = random_set(p, k, 1000 * static_cast<std::uint64_t>(p) + 10 * k + s);
        const auto r = project(cs);
        const auto oracle = oracle_project(cs);
        CHECK((r.projected - oracle).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK(std::abs(r.distortion - (cs.proposed - oracle).norm()) <= 1e-6);
      }
    }
  }
}

TEST_CASE("KKT properties on random sets") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto cs = random_set(16, 1 + s % 5, 77 + s);
    const auto r = project(cs);
    const double eps = default_feasibility_tolerance(cs.proposed);
    for (std::size_t i = 0; i < cs.size(); ++i) CHECK(r.projected.dot(cs.rows[i]) >= -eps);
    CHECK(r.multipliers.minCoeff() >= 0.0);
    CHECK(slackness(cs, r) <= 1e-6);
    // g_hat - g_t lies in the row space of G.
    const Matrix G = cs.stacked();
    const Vector delta = r.projected - cs.proposed;
    const Vector coeffs = G.transpose().colPivHouseholderQr().solve(delta);
    CHECK((G.transpose() * coeffs - delta).norm() <= 1e-8 * (1.0 + delta.norm()));
  }
}

TEST_CASE("projection is idempotent and scale equivariant") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto cs = random_set(10, 3, 500 + s);
    const auto once = project(cs);
    ConstraintSet again = cs;
    again.proposed = once.projected;
    const auto twice = project(again);
    CHECK((twice.projected - once.projected).cwiseAbs().maxCoeff() <= 1e-9);

    ConstraintSet scaled = cs;
    scaled.proposed *= 3.0;
    CHECK((project(scaled).projected - 3.0 * once.projected).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("duplicate and opposite rows") {
  ConstraintSet dup;
  dup.proposed = vec({1.0, -2.0, 0.5});
  dup.add(vec({0.0, 1.0, 0.0}), {});
  dup.add(vec({0.0, 1.0, 0.0}), {});
  const auto r = project(dup);
  CHECK((r.projected - vec({1.0, 0.0, 0.5})).cwiseAbs().maxCoeff() <= 1e-10);

  // Opposite rows pin the update to their orthogonal complement.
  ConstraintSet opp;
  opp.proposed = vec({1.0, -2.0});
  opp.add(vec({0.0, 1.0}), {});
  opp.add(vec({0.0, -1.0}), {});
  const auto o = project(opp);
  CHECK((o.projected - vec({1.0, 0.0})).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("invalid constraint sets are rejected") {
  ConstraintSet cs;
  cs.proposed = vec({1.0, 2.0});
  cs.add(vec({1.0, 2.0, 3.0}), {});
  CHECK_THROWS_AS(project(cs), InvalidInput);
  ConstraintSet nan;
  nan.proposed = vec({1.0, std::numeric_limits<double>::quiet_NaN()});
  nan.add(vec({1.0, 0.0}), {});
  CHECK_THROWS_AS(project(nan), InvalidInput);
}

TEST_CASE("constraint tags print their kind") {
  CHECK(to_string(ConstraintTag{ConstraintKind::Source, -1}).find("source") != std::string::npos);
  CHECK(to_string(ConstraintTag{ConstraintKind::Memory, 3}).find('3') != std::string::npos);
}
