#include "grcl/domains.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "grcl/errors.hpp"
#include "grcl/rng.hpp"

namespace grcl {

namespace {

constexpr std::uint64_t kTrainTag = 1;
constexpr std::uint64_t kTestTag = 2;

void validate_transform(const DomainTransform& t, std::size_t d) {
  if (!(t.scale > 0.0)) throw InvalidInput("domain scale must be > 0");
  if (!(t.noise_sigma >= 0.0)) throw InvalidInput("domain noise sigma must be >= 0");
  if (t.translation.size() != 0 && static_cast<std::size_t>(t.translation.size()) != d) {
    throw InvalidInput("translation length must equal input_dim");
  }
}

Batch sample_domain(const DomainSequenceSpec& spec, const DomainTransform& t, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.num_classes);
  rng.shuffle(labels);

  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  const double c = std::cos(t.rotation);
  const double s = std::sin(t.rotation);
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    const double angle = 2.0 * std::numbers::pi * labels[i] / static_cast<double>(spec.num_classes);
    Vector x = Vector::Zero(d);
    x(0) = spec.class_radius * std::cos(angle);
    x(1) = spec.class_radius * std::sin(angle);
    for (Eigen::Index j = 0; j < d; ++j) x(j) += t.noise_sigma * rng.normal();
    const double x0 = c * x(0) - s * x(1);
    const double x1 = s * x(0) + c * x(1);
    x(0) = x0;
    x(1) = x1;
    x *= t.scale;
    if (t.translation.size() != 0) x += t.translation;
    b.inputs.row(static_cast<Eigen::Index>(i)) = x.transpose();
  }
  b.labels = std::move(labels);
  return b;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& path, std::size_t line) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ParseError(path, line, "not a number: '" + s + "'");
  return v;
}

long parse_int(const std::string& s, const std::string& path, std::size_t line, const char* what) {
  long v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ParseError(path, line, std::string("bad ") + what + ": '" + s + "'");
  return v;
}

}  // namespace

void DomainSequenceSpec::validate() const {
  if (num_classes < 2) throw InvalidInput("num_classes must be >= 2");
  if (input_dim < 2) throw InvalidInput("input_dim must be >= 2 (class means lie in the x0/x1 plane)");
  if (targets.empty()) throw InvalidInput("at least one target domain is required");
  if (train_per_domain < num_classes || test_per_domain < num_classes) {
    throw InvalidInput("train/test counts must be >= num_classes");
  }
  if (!(class_radius > 0.0)) throw InvalidInput("class radius must be > 0");
  validate_transform(source, input_dim);
  for (const auto& t : targets) validate_transform(t, input_dim);
}

DomainDataset::DomainDataset(int domain_id, Batch train, Batch test, bool labeled_for_training)
    : domain_id_(domain_id), train_(std::move(train)), test_(std::move(test)),
      labeled_for_training_(labeled_for_training) {
  if (labeled_for_training_ && !train_.labeled()) {
    throw InvalidInput("a domain labeled for training needs training labels");
  }
  if (train_.inputs.cols() != test_.inputs.cols() && test_.rows() > 0) {
    throw InvalidInput("train and test splits have different widths");
  }
}

const Batch& DomainDataset::labeled_train() const {
  if (!labeled_for_training_) {
    throw InvalidInput("domain " + std::to_string(domain_id_) + " is not labeled for training");
  }
  return train_;
}

bool DomainDataset::operator==(const DomainDataset& o) const {
  return domain_id_ == o.domain_id_ && labeled_for_training_ == o.labeled_for_training_ &&
         train_.inputs == o.train_.inputs && train_.labels == o.train_.labels && test_.inputs == o.test_.inputs &&
         test_.labels == o.test_.labels;
}

std::vector<DomainDataset> generate_sequence(const DomainSequenceSpec& spec) {
  spec.validate();
  std::vector<DomainDataset> out;
  out.reserve(spec.targets.size() + 1);
  for (std::size_t k = 0; k <= spec.targets.size(); ++k) {
    const auto& t = k == 0 ? spec.source : spec.targets[k - 1];
    auto train = sample_domain(spec, t, spec.train_per_domain, derive_seed(spec.seed, {k, kTrainTag}));
    auto test = sample_domain(spec, t, spec.test_per_domain, derive_seed(spec.seed, {k, kTestTag}));
    out.emplace_back(static_cast<int>(k), std::move(train), std::move(test), k == 0);
  }
  return out;
}

DomainSequenceSpec default_benchmark_spec(std::uint64_t seed) {
  DomainSequenceSpec spec;
  spec.seed = seed;
  for (double deg : {20.0, 40.0, 60.0, 80.0}) {
    DomainTransform t;
    t.rotation = deg * std::numbers::pi / 180.0;
    spec.targets.push_back(t);
  }
  return spec;
}

Vector augment(const Vector& x, const AugmentStrength& strength, std::uint64_t seed) {
  Rng rng(seed);
  const double s = strength.scale_lo == strength.scale_hi ? strength.scale_lo
                                                          : rng.uniform(strength.scale_lo, strength.scale_hi);
  Vector out = x * s;
  if (strength.noise_sigma > 0.0) {
    for (Eigen::Index j = 0; j < out.size(); ++j) out(j) += strength.noise_sigma * rng.normal();
  }
  return out;
}

Matrix augment_rows(const Matrix& x, const AugmentStrength& strength, std::uint64_t seed) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = augment(x.row(r).transpose(), strength, derive_seed(seed, {static_cast<std::uint64_t>(r)})).transpose();
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, ptr);
}

void save_dataset(const DomainDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const auto d = ds.train_inputs().cols();
  os << "domain_id,split,label";
  for (Eigen::Index j = 0; j < d; ++j) os << ",x" << j;
  os << '\n';
  auto write_split = [&](const char* split, const Matrix& x, const std::optional<std::vector<int>>& y) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      os << ds.domain_id() << ',' << split << ',';
      if (y) os << (*y)[static_cast<std::size_t>(r)];
      for (Eigen::Index j = 0; j < d; ++j) os << ',' << format_double(x(r, j));
      os << '\n';
    }
  };
  write_split("train", ds.train_inputs(), ds.train_labels_for_evaluation());
  write_split("test", ds.test().inputs, ds.test().labels);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

DomainDataset load_dataset(const std::filesystem::path& path, std::size_t num_classes) {
  const std::string p = path.string();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + p);
  std::string line;
  if (!std::getline(is, line)) throw ParseError(p, 1, "empty file");
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "domain_id" || header[1] != "split") {
    throw ParseError(p, 1, "header must start with domain_id,split");
  }
  const bool has_label_col = header[2] == "label";
  const std::size_t first_x = has_label_col ? 3 : 2;
  const std::size_t d = header.size() - first_x;
  if (d == 0) throw ParseError(p, 1, "no feature columns");
  for (std::size_t j = 0; j < d; ++j) {
    if (header[first_x + j] != "x" + std::to_string(j)) {
      throw ParseError(p, 1, "expected column x" + std::to_string(j) + ", got '" + header[first_x + j] + "'");
    }
  }

  std::vector<std::vector<double>> rows[2];
  std::vector<std::optional<int>> labels[2];
  std::optional<long> domain;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw ParseError(p, line_no, "expected " + std::to_string(header.size()) + " columns, got " +
                                       std::to_string(cells.size()));
    }
    const long dom = parse_int(cells[0], p, line_no, "domain_id");
    if (domain && *domain != dom) throw ParseError(p, line_no, "mixed domain ids in one file");
    domain = dom;
    int split;
    if (cells[1] == "train") split = 0;
    else if (cells[1] == "test") split = 1;
    else throw ParseError(p, line_no, "split must be train or test, got '" + cells[1] + "'");

    std::optional<int> y;
    if (has_label_col && !cells[2].empty()) {
      const long v = parse_int(cells[2], p, line_no, "label");
      if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
        throw ParseError(p, line_no, "label " + cells[2] + " outside [0, " + std::to_string(num_classes) + ")");
      }
      y = static_cast<int>(v);
    }
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) x[j] = parse_double(cells[first_x + j], p, line_no);
    rows[split].push_back(std::move(x));
    labels[split].push_back(y);
  }
  if (!domain) throw ParseError(p, line_no, "no data rows");
  if (rows[0].empty()) throw ParseError(p, line_no, "no train rows");

  auto build = [&](int split) {
    Batch b;
    b.inputs.resize(static_cast<Eigen::Index>(rows[split].size()), static_cast<Eigen::Index>(d));
    std::size_t present = 0;
    for (std::size_t r = 0; r < rows[split].size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) b.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = rows[split][r][j];
      if (labels[split][r]) ++present;
    }
    if (present == rows[split].size() && present > 0) {
      std::vector<int> y;
      for (const auto& l : labels[split]) y.push_back(*l);
      b.labels = std::move(y);
    } else if (present != 0) {
      throw ParseError(p, line_no, std::string("split ") + (split == 0 ? "train" : "test") +
                                       " mixes labeled and unlabeled rows");
    }
    return b;
  };
  Batch train = build(0);
  Batch test = build(1);
  const bool labeled = *domain == 0 && train.labeled();
  return DomainDataset(static_cast<int>(*domain), std::move(train), std::move(test), labeled);
}

}  // namespace grcl
