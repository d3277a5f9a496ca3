#include "grcl/memory.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "grcl/errors.hpp"
#include "grcl/rng.hpp"

namespace grcl {

namespace {

int nearest_centroid(const Matrix& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x, double& dist) {
  int best = 0;
  dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - x).squaredNorm();
    if (d < dist) {
      dist = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

Matrix seed_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
  const auto n = points.rows();
  Matrix centroids(static_cast<Eigen::Index>(k), points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  Vector d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc > target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centroids.row(static_cast<Eigen::Index>(c)) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }
  return centroids;
}

std::vector<std::size_t> canonical_order(const Matrix& x) {
  std::vector<std::size_t> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double va = x(static_cast<Eigen::Index>(a), j);
      const double vb = x(static_cast<Eigen::Index>(b), j);
      if (va != vb) return va < vb;
    }
    return false;
  });
  return order;
}

MemoryBatch draw(const std::vector<const EpisodicMemory*>& parts, std::size_t b, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> flat;  // (part, row)
  for (std::size_t p = 0; p < parts.size(); ++p)
    for (std::size_t r = 0; r < parts[p]->size(); ++r) flat.emplace_back(p, r);
  if (flat.empty()) throw EmptyMemoryError();
  if (b == 0) throw InvalidInput("memory batch size must be >= 1");

  Rng rng(seed);
  std::vector<std::size_t> picks;
  if (flat.size() >= b) {
    std::vector<std::size_t> idx(flat.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < b; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    picks.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(b));
  } else {
    for (std::size_t i = 0; i < b; ++i) picks.push_back(static_cast<std::size_t>(rng.below(flat.size())));
  }

  MemoryBatch out;
  const auto d = parts.front()->samples.cols();
  out.batch.inputs.resize(static_cast<Eigen::Index>(b), d);
  std::vector<int> labels(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto [p, r] = flat[picks[i]];
    out.batch.inputs.row(static_cast<Eigen::Index>(i)) = parts[p]->samples.row(static_cast<Eigen::Index>(r));
    labels[i] = parts[p]->pseudo_labels[r];
    out.provenance.push_back({parts[p]->domain_id, parts[p]->sample_ids[r]});
  }
  out.batch.labels = std::move(labels);
  return out;
}

}  // namespace

double within_cluster_ss(const Matrix& points, const std::vector<int>& assignments, const Matrix& centroids) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    total += (points.row(i) - centroids.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return total;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, int max_iterations) {
  const auto n = points.rows();
  if (k < 1 || static_cast<std::size_t>(n) < k) throw InvalidInput("kmeans needs 1 <= k <= number of points");
  Rng rng(seed);
  KMeansResult res;
  res.centroids = seed_plus_plus(points, k, rng);
  res.assignments.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));

  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      const int a = nearest_centroid(res.centroids, points.row(i), dist[ii]);
      if (a != res.assignments[ii]) {
        res.assignments[ii] = a;
        changed = true;
      }
    }
    if (!changed) break;
    res.iterations = it + 1;

    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto a = res.assignments[static_cast<std::size_t>(i)];
      sums.row(a) += points.row(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // Re-seed at the point farthest from its own centroid.
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (points.row(i) - res.centroids.row(res.assignments[static_cast<std::size_t>(i)])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(far);
    }

    const double w = within_cluster_ss(points, res.assignments, res.centroids);
    if (!res.wcss_history.empty() && w > res.wcss_history.back() * (1.0 + 1e-12) + 1e-300) {
      throw std::logic_error("k-means within-cluster sum of squares increased");
    }
    res.wcss_history.push_back(w);
  }
  if (res.wcss_history.empty()) res.wcss_history.push_back(within_cluster_ss(points, res.assignments, res.centroids));
  return res;
}

std::vector<int> pseudo_label(const ParamVector& params, const Matrix& samples, std::size_t num_classes,
                              std::uint64_t seed) {
  if (samples.rows() < 1) throw InvalidInput("pseudo_label needs at least one sample");
  if (num_classes != params.spec().num_classes) throw InvalidInput("num_classes does not match the model");
  const auto order = canonical_order(samples);
  Matrix sorted(samples.rows(), samples.cols());
  for (std::size_t i = 0; i < order.size(); ++i) sorted.row(static_cast<Eigen::Index>(i)) = samples.row(static_cast<Eigen::Index>(order[i]));

  const auto out = forward(params, sorted);
  const auto pred = predict(params, sorted);
  const std::size_t k = std::min<std::size_t>(num_classes, static_cast<std::size_t>(sorted.rows()));
  const auto km = kmeans(out.features, k, seed);

  std::vector<std::vector<std::size_t>> votes(k, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < order.size(); ++i) ++votes[static_cast<std::size_t>(km.assignments[i])][static_cast<std::size_t>(pred[i])];
  std::vector<int> cluster_label(k, 0);
  for (std::size_t c = 0; c < k; ++c) {
    cluster_label[c] = static_cast<int>(std::max_element(votes[c].begin(), votes[c].end()) - votes[c].begin());
  }
  std::vector<int> labels(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) labels[order[i]] = cluster_label[static_cast<std::size_t>(km.assignments[i])];
  return labels;
}

EpisodicMemory select_episodic(const ParamVector& params, const UnlabeledSet& data, std::size_t capacity,
                               std::uint64_t seed, SelectionMode mode) {
  const std::size_t C = params.spec().num_classes;
  if (capacity < C) throw InvalidInput("memory capacity must be >= num_classes");
  const auto n = static_cast<std::size_t>(data.inputs.rows());
  if (n == 0) throw InvalidInput("cannot select memory from an empty dataset");

  const auto out = forward(params, data.inputs);
  const Matrix probs = softmax_rows(out.logits);
  Vector conf(static_cast<Eigen::Index>(n));
  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    conf(static_cast<Eigen::Index>(i)) = probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    pred[i] = static_cast<int>(arg);
  }
  const auto labels = pseudo_label(params, data.inputs, C, seed);

  auto by_confidence = [&](std::size_t a, std::size_t b) {
    const double ca = conf(static_cast<Eigen::Index>(a));
    const double cb = conf(static_cast<Eigen::Index>(b));
    return ca != cb ? ca > cb : a < b;
  };
  std::vector<std::size_t> chosen;
  if (n <= capacity) {
    chosen.resize(n);
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  } else if (mode == SelectionMode::GlobalTop) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::sort(all.begin(), all.end(), by_confidence);
    chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(capacity));
  } else {
    const std::size_t per_class = (capacity + C - 1) / C;
    std::vector<std::vector<std::size_t>> buckets(C);
    for (std::size_t i = 0; i < n; ++i) buckets[static_cast<std::size_t>(pred[i])].push_back(i);
    std::vector<bool> taken(n, false);
    for (auto& b : buckets) {
      std::sort(b.begin(), b.end(), by_confidence);
      for (std::size_t j = 0; j < std::min(per_class, b.size()); ++j) {
        chosen.push_back(b[j]);
        taken[b[j]] = true;
      }
    }
    std::sort(chosen.begin(), chosen.end(), by_confidence);
    if (chosen.size() > capacity) chosen.resize(capacity);
    if (chosen.size() < capacity) {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) rest.push_back(i);
      std::sort(rest.begin(), rest.end(), by_confidence);
      for (std::size_t j = 0; chosen.size() < capacity && j < rest.size(); ++j) chosen.push_back(rest[j]);
    }
  }
  std::sort(chosen.begin(), chosen.end());

  EpisodicMemory mem;
  mem.domain_id = data.domain_id;
  mem.samples.resize(static_cast<Eigen::Index>(chosen.size()), data.inputs.cols());
  mem.confidences.resize(static_cast<Eigen::Index>(chosen.size()));
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    mem.samples.row(static_cast<Eigen::Index>(i)) = data.inputs.row(static_cast<Eigen::Index>(chosen[i]));
    mem.confidences(static_cast<Eigen::Index>(i)) = conf(static_cast<Eigen::Index>(chosen[i]));
    mem.sample_ids.push_back(chosen[i]);
    mem.pseudo_labels.push_back(labels[chosen[i]]);
  }
  return mem;
}

void DomainMemory::append(EpisodicMemory memory) {
  if (!episodic_.empty() && memory.domain_id <= episodic_.back().domain_id) {
    throw InvalidInput("episodic memories must have strictly increasing domain ids");
  }
  if (memory.sample_ids.size() != static_cast<std::size_t>(memory.samples.rows()) ||
      memory.pseudo_labels.size() != memory.sample_ids.size()) {
    throw InvalidInput("episodic memory fields have inconsistent lengths");
  }
  episodic_.push_back(std::move(memory));
}

std::size_t DomainMemory::size() const {
  std::size_t n = 0;
  for (const auto& m : episodic_) n += m.size();
  return n;
}

void DomainMemory::save_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const Eigen::Index d = episodic_.empty() ? 0 : episodic_.front().samples.cols();
  os << "domain_id,sample_id,pseudo_label,confidence";
  for (Eigen::Index j = 0; j < d; ++j) os << ",x" << j;
  os << '\n';
  for (const auto& m : episodic_) {
    for (std::size_t r = 0; r < m.size(); ++r) {
      const auto rr = static_cast<Eigen::Index>(r);
      os << m.domain_id << ',' << m.sample_ids[r] << ',' << m.pseudo_labels[r] << ',' << format_double(m.confidences(rr));
      for (Eigen::Index j = 0; j < d; ++j) os << ',' << format_double(m.samples(rr, j));
      os << '\n';
    }
  }
}

DomainMemory DomainMemory::load_csv(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + p);
  std::string line;
  if (!std::getline(is, line) || line.rfind("domain_id,sample_id,pseudo_label,confidence", 0) != 0) {
    throw ParseError(p, 1, "bad memory header");
  }
  const auto d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 3;

  struct Row {
    long domain;
    std::size_t id;
    int label;
    double conf;
    std::vector<double> x;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != d + 4) throw ParseError(p, line_no, "wrong column count");
    Row r;
    try {
      r.domain = std::stol(cells[0]);
      r.id = std::stoul(cells[1]);
      r.label = std::stoi(cells[2]);
      r.conf = std::stod(cells[3]);
      for (std::size_t j = 0; j < d; ++j) r.x.push_back(std::stod(cells[4 + j]));
    } catch (const std::exception&) {
      throw ParseError(p, line_no, "malformed number");
    }
    rows.push_back(std::move(r));
  }

  DomainMemory mem;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].domain == rows[i].domain) ++j;
    EpisodicMemory e;
    e.domain_id = static_cast<int>(rows[i].domain);
    e.samples.resize(static_cast<Eigen::Index>(j - i), static_cast<Eigen::Index>(d));
    e.confidences.resize(static_cast<Eigen::Index>(j - i));
    for (std::size_t r = i; r < j; ++r) {
      const auto rr = static_cast<Eigen::Index>(r - i);
      for (std::size_t c = 0; c < d; ++c) e.samples(rr, static_cast<Eigen::Index>(c)) = rows[r].x[c];
      e.confidences(rr) = rows[r].conf;
      e.sample_ids.push_back(rows[r].id);
      e.pseudo_labels.push_back(rows[r].label);
    }
    mem.append(std::move(e));
    i = j;
  }
  return mem;
}

MemoryBatch sample_memory_batch(const DomainMemory& memory, std::size_t b, std::uint64_t seed) {
  std::vector<const EpisodicMemory*> parts;
  for (const auto& m : memory.episodic()) parts.push_back(&m);
  return draw(parts, b, seed);
}

MemoryBatch sample_episodic_batch(const EpisodicMemory& memory, std::size_t b, std::uint64_t seed) {
  return draw({&memory}, b, seed);
}

}  // namespace grcl
