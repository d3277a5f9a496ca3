#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "grcl/errors.hpp"
#include "grcl/metrics.hpp"
#include "metric_fixtures.hpp"
#include "test_support.hpp"

using namespace grcl;

namespace {

// Logits equal to the 3-column input: encoder shifts by +10 so ReLU is the
// identity, the classifier is the identity, and argmax ignores the shift.
ParamVector passthrough_model() {
  ModelSpec m;
  m.input_dim = 3;
  m.hidden_dims = {};
  m.feature_dim = 3;
  m.num_classes = 3;
  m.head_hidden_dim = 1;
  m.key_dim = 1;
  ParamVector p(m);
  p.weight(p.layout().encoder[0]) = Matrix::Identity(3, 3);
  p.bias(p.layout().encoder[0]).setConstant(10.0);
  p.weight(p.layout().classifier) = Matrix::Identity(3, 3);
  return p;
}

Batch read_logit_fixture() {
  std::ifstream is(std::filesystem::path(GRCL_SOURCE_DIR) / "tests/fixtures/accuracy_10.csv");
  REQUIRE(is);
  std::string line;
  std::getline(is, line);
  Batch b;
  b.inputs.resize(10, 3);
  std::vector<int> y;
  Eigen::Index r = 0;
  while (std::getline(is, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    int label;
    ss >> label >> b.inputs(r, 0) >> b.inputs(r, 1) >> b.inputs(r, 2);
    y.push_back(label);
    ++r;
  }
  REQUIRE(r == 10);
  b.labels = y;
  return b;
}

}  // namespace

TEST_CASE("fixture matrices reproduce hand-computed ACC and BWT") {
  for (const auto& f : grcl::testing::metric_fixtures()) {
    CAPTURE(f.name);
    const auto m = f.matrix();
    CHECK(std::abs(compute_acc(m) - f.acc_true_mean) <= 1e-12);
    CHECK(std::abs(compute_acc(m, AccNormalization::PaperLiteral) - f.acc_paper_literal) <= 1e-12);
    if (f.bwt) CHECK(std::abs(compute_bwt(m) - *f.bwt) <= 1e-12);
    else CHECK_THROWS_AS(compute_bwt(m), InvalidInput);
  }
}

TEST_CASE("mean target accuracy skips the source column") {
  const auto m = grcl::testing::metric_fixtures()[0].matrix();
  CHECK(mean_target_accuracy(m) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("N = 0: true mean is the source accuracy, paper-literal is undefined") {
  AccuracyMatrix m(0);
  m.set(0, 0, 0.9);
  CHECK(compute_acc(m) == 0.9);
  CHECK_THROWS_AS(compute_acc(m, AccNormalization::PaperLiteral), InvalidInput);
  CHECK_THROWS_AS(mean_target_accuracy(m), InvalidInput);
}

TEST_CASE("accuracy matrix bookkeeping") {
  AccuracyMatrix m(2);
  CHECK(m.num_targets() == 2);
  CHECK_THROWS_AS(m.set(0, 1, 0.5), InvalidInput);
  CHECK_THROWS_AS(m.set(1, 0, 1.5), InvalidInput);
  CHECK_THROWS_AS(m.set(1, 0, -0.1), InvalidInput);
  m.set(2, 0, 0.5);
  CHECK(m.filled(2, 0));
  CHECK_FALSE(m.filled(2, 1));
  CHECK_FALSE(m.row_complete(2));
  CHECK_THROWS_AS(compute_acc(m), InvalidInput);
}

TEST_CASE("accuracy matrix CSV round trip") {
  grcl::testing::TempDir dir("metrics");
  const auto m = grcl::testing::metric_fixtures()[1].matrix();
  m.save_csv(dir.path() / "R.csv");
  const auto back = AccuracyMatrix::load_csv(dir.path() / "R.csv");
  for (std::size_t i = 0; i <= 3; ++i) CHECK(back.row(i) == m.row(i));
  std::ifstream is(dir.path() / "R.csv");
  std::string header, row0;
  std::getline(is, header);
  std::getline(is, row0);
  CHECK(header == "i,R0,R1,R2,R3");
  CHECK(row0 == "0,0.90000000000000002,,,");
}

TEST_CASE("hand-counted accuracy with ties toward class 0") {
  const auto p = passthrough_model();
  CHECK(evaluate_accuracy(p, read_logit_fixture()) == 0.5);

  Batch tie;
  tie.inputs = Matrix::Zero(2, 3);
  tie.labels = std::vector<int>{0, 1};
  CHECK(evaluate_accuracy(p, tie) == 0.5);
}

TEST_CASE("accuracy is invariant to a positive rescale of the logits") {
  auto p = passthrough_model();
  const auto b = read_logit_fixture();
  auto scaled = p;
  scaled.weight(scaled.layout().classifier) *= 3.0;
  CHECK(evaluate_accuracy(scaled, b) == evaluate_accuracy(p, b));
  // A large bias on class 2 makes every row predict 2: 4 of 10 labels.
  p.bias(p.layout().classifier)(2) = 100.0;
  CHECK(evaluate_accuracy(p, b) == doctest::Approx(0.4));
}
