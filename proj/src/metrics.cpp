#include "grcl/metrics.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "grcl/domains.hpp"
#include "grcl/errors.hpp"

namespace grcl {

AccuracyMatrix::AccuracyMatrix(std::size_t num_targets) {
  rows_.resize(num_targets + 1);
  for (std::size_t i = 0; i <= num_targets; ++i) rows_[i].resize(i + 1);
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  if (i >= rows_.size() || j > i) throw InvalidInput("accuracy matrix index outside the lower triangle");
  if (!(value >= 0.0 && value <= 1.0)) throw InvalidInput("accuracy must lie in [0, 1]");
  rows_[i][j] = value;
}

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
  if (!filled(i, j)) {
    throw InvalidInput("accuracy R(" + std::to_string(i) + "," + std::to_string(j) + ") is not filled");
  }
  return *rows_[i][j];
}

bool AccuracyMatrix::filled(std::size_t i, std::size_t j) const {
  return i < rows_.size() && j <= i && rows_[i][j].has_value();
}

bool AccuracyMatrix::row_complete(std::size_t i) const {
  if (i >= rows_.size()) return false;
  for (const auto& v : rows_[i])
    if (!v) return false;
  return true;
}

std::vector<double> AccuracyMatrix::row(std::size_t i) const {
  std::vector<double> out;
  for (std::size_t j = 0; j <= i; ++j) out.push_back(at(i, j));
  return out;
}

void AccuracyMatrix::save_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t n = rows_.size();
  os << "i";
  for (std::size_t j = 0; j < n; ++j) os << ",R" << j;
  os << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    os << i;
    for (std::size_t j = 0; j < n; ++j) {
      os << ',';
      if (j <= i && rows_[i][j]) os << format_double(*rows_[i][j]);
    }
    os << '\n';
  }
}

AccuracyMatrix AccuracyMatrix::load_csv(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + p);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    lines.push_back(std::move(cells));
  }
  if (lines.size() < 2) throw ParseError(p, 1, "accuracy matrix needs a header and at least one row");
  const std::size_t n = lines.size() - 1;
  if (lines[0].size() != n + 1) throw ParseError(p, 1, "header width does not match row count");
  AccuracyMatrix m(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cells = lines[i + 1];
    if (cells.size() != n + 1) throw ParseError(p, i + 2, "wrong column count");
    for (std::size_t j = 0; j < n; ++j) {
      const auto& c = cells[j + 1];
      if (c.empty()) continue;
      if (j > i) throw ParseError(p, i + 2, "entry above the diagonal");
      try {
        m.set(i, j, std::stod(c));
      } catch (const std::exception& e) {
        throw ParseError(p, i + 2, std::string("bad accuracy value: ") + e.what());
      }
    }
  }
  return m;
}

double evaluate_accuracy(const ParamVector& params, const Batch& test) {
  if (test.rows() == 0) throw InvalidInput("empty test set");
  if (!test.labeled()) throw InvalidInput("test set has no labels");
  const auto pred = predict(params, test.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == (*test.labels)[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double compute_acc(const AccuracyMatrix& r, AccNormalization norm) {
  const std::size_t n = r.num_targets();
  if (!r.row_complete(n)) throw InvalidInput("final row of the accuracy matrix is incomplete");
  double sum = 0.0;
  for (std::size_t j = 0; j <= n; ++j) sum += r.at(n, j);
  if (norm == AccNormalization::PaperLiteral) {
    if (n == 0) throw InvalidInput("paper-literal ACC divides by N and needs N >= 1");
    return sum / static_cast<double>(n);
  }
  return sum / static_cast<double>(n + 1);
}

double compute_bwt(const AccuracyMatrix& r) {
  const std::size_t n = r.num_targets();
  if (n < 2) throw InvalidInput("BWT is undefined for fewer than two target domains (N=" + std::to_string(n) + ")");
  double sum = 0.0;
  for (std::size_t i = 1; i < n; ++i) sum += r.at(n, i) - r.at(i, i);
  return sum / static_cast<double>(n - 1);
}

double mean_target_accuracy(const AccuracyMatrix& r) {
  const std::size_t n = r.num_targets();
  if (n == 0) throw InvalidInput("no target domains");
  double sum = 0.0;
  for (std::size_t j = 1; j <= n; ++j) sum += r.at(n, j);
  return sum / static_cast<double>(n);
}

}  // namespace grcl
