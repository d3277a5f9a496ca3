#include "grcl/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "grcl/errors.hpp"
#include "grcl/rng.hpp"

namespace grcl {

namespace {

constexpr double kDegenerateNorm = 1e-12;

double log_sum_exp(const Eigen::Ref<const Vector>& s) {
  const double mx = s.maxCoeff();
  return mx + std::log((s.array() - mx).exp().sum());
}

}  // namespace

void validate_contrast_params(double momentum, double temperature) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
}

FeatureBank::FeatureBank(Matrix keys, std::vector<SampleKey> samples, double momentum, double temperature)
    : keys_(std::move(keys)), samples_(std::move(samples)), momentum_(momentum), temperature_(temperature) {
  validate_contrast_params(momentum, temperature);
  if (static_cast<std::size_t>(keys_.rows()) != samples_.size()) {
    throw InvalidInput("bank key count does not match sample count");
  }
  for (std::size_t r = 0; r < samples_.size(); ++r) {
    if (!index_.emplace(samples_[r], r).second) {
      throw InvalidInput("duplicate bank sample (" + std::to_string(samples_[r].dataset_id) + ", " +
                         std::to_string(samples_[r].sample_id) + ")");
    }
  }
}

std::optional<std::size_t> FeatureBank::find(const SampleKey& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t FeatureBank::row_of(const SampleKey& key) const {
  auto row = find(key);
  if (!row) {
    throw InvalidInput("sample (" + std::to_string(key.dataset_id) + ", " + std::to_string(key.sample_id) +
                       ") is not in the feature bank");
  }
  return *row;
}

bool FeatureBank::update_key(std::size_t row, const Vector& fresh_key) {
  if (row >= size()) throw InvalidInput("bank row out of range");
  if (static_cast<std::size_t>(fresh_key.size()) != key_dim()) throw InvalidInput("fresh key has wrong dimension");
  const Vector blended = momentum_ * keys_.row(static_cast<Eigen::Index>(row)).transpose() + (1.0 - momentum_) * fresh_key;
  const double n = blended.norm();
  if (!(n >= kDegenerateNorm)) {
    spdlog::warn("bank row {}: blended key is degenerate (norm {}), keeping the old key", row, n);
    return false;
  }
  keys_.row(static_cast<Eigen::Index>(row)) = (blended / n).transpose();
  return true;
}

void FeatureBank::save_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "dataset_id,sample_id";
  for (std::size_t j = 0; j < key_dim(); ++j) os << ",k" << j;
  os << '\n';
  for (std::size_t r = 0; r < size(); ++r) {
    os << samples_[r].dataset_id << ',' << samples_[r].sample_id;
    for (Eigen::Index j = 0; j < keys_.cols(); ++j) os << ',' << format_double(keys_(static_cast<Eigen::Index>(r), j));
    os << '\n';
  }
}

FeatureBank build_feature_bank(const ParamVector& params, std::span<const BankSource> sources, double momentum,
                               double temperature) {
  if (sources.empty()) throw InvalidInput("feature bank needs at least one dataset");
  std::size_t total = 0;
  for (const auto& s : sources) {
    if (!s.inputs) throw InvalidInput("bank source without inputs");
    if (!s.sample_ids.empty() && s.sample_ids.size() != static_cast<std::size_t>(s.inputs->rows())) {
      throw InvalidInput("bank source sample_ids do not match row count");
    }
    total += static_cast<std::size_t>(s.inputs->rows());
  }
  Matrix keys(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(params.spec().key_dim));
  std::vector<SampleKey> samples;
  samples.reserve(total);
  Eigen::Index cursor = 0;
  for (const auto& s : sources) {
    if (s.inputs->rows() == 0) continue;
    const auto out = forward(params, *s.inputs);
    keys.middleRows(cursor, s.inputs->rows()) = project_key(params, out.features);
    cursor += s.inputs->rows();
    for (Eigen::Index r = 0; r < s.inputs->rows(); ++r) {
      const auto id = s.sample_ids.empty() ? static_cast<std::size_t>(r) : s.sample_ids[static_cast<std::size_t>(r)];
      samples.push_back({s.dataset_id, id});
    }
  }
  return FeatureBank(std::move(keys), std::move(samples), momentum, temperature);
}

double info_nce(const ContrastItem& item, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (item.query.size() != item.positive.size() ||
      (item.negatives.rows() > 0 && item.negatives.cols() != item.query.size())) {
    throw InvalidInput("contrast item vectors have mismatched dimensions");
  }
  Vector s(1 + item.negatives.rows());
  s(0) = item.query.dot(item.positive) / temperature;
  if (item.negatives.rows() > 0) s.tail(item.negatives.rows()) = item.negatives * item.query / temperature;
  return log_sum_exp(s) - s(0);
}

std::vector<std::size_t> sample_negative_rows(const FeatureBank& bank, std::size_t count,
                                              std::span<const std::size_t> exclude, std::uint64_t seed) {
  std::vector<bool> excluded(bank.size(), false);
  for (auto r : exclude) {
    if (r < bank.size()) excluded[r] = true;
  }
  std::vector<std::size_t> pool;
  pool.reserve(bank.size());
  for (std::size_t r = 0; r < bank.size(); ++r) {
    if (!excluded[r]) pool.push_back(r);
  }
  if (count > pool.size()) {
    spdlog::warn("requested {} negatives but only {} bank rows are available", count, pool.size());
    count = pool.size();
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

Matrix sample_negatives(const FeatureBank& bank, std::size_t count, std::span<const std::size_t> exclude,
                        std::uint64_t seed) {
  const auto rows = sample_negative_rows(bank, count, exclude, seed);
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(bank.key_dim()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = bank.keys().row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

ContrastiveResult contrastive_batch_loss(const ParamVector& params, const FeatureBank& bank,
                                         const ContrastiveBatch& batch, const ContrastiveOptions& opts) {
  const auto n = batch.inputs.rows();
  if (n < 1) throw InvalidInput("contrastive batch is empty");
  if (batch.bank_rows.size() != static_cast<std::size_t>(n)) throw InvalidInput("bank_rows must match batch size");
  for (auto r : batch.bank_rows) {
    if (r >= bank.size()) throw InvalidInput("batch sample is not registered in the bank");
  }
  if (params.spec().key_dim != bank.key_dim()) throw InvalidInput("bank key_dim does not match the model");
  const double tau = bank.temperature();

  Tape query_tape(params, batch.inputs, true);
  const Matrix augmented = augment_rows(batch.inputs, opts.augment, opts.aug_seed);
  Tape positive_tape(params, augmented, true);
  const Matrix& q = query_tape.keys();
  const Matrix& kp = positive_tape.keys();

  // Row r of `logits`: [q.k+, q.k-_1, ...] / tau. In full mode the sample's own
  // bank row is masked out of its negatives.
  const bool full = !opts.negatives.has_value();
  Matrix negatives;
  if (full) {
    negatives = bank.keys();
  } else {
    const auto rows = sample_negative_rows(bank, *opts.negatives, batch.bank_rows, opts.negative_seed);
    negatives.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(bank.key_dim()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      negatives.row(static_cast<Eigen::Index>(i)) = bank.keys().row(static_cast<Eigen::Index>(rows[i]));
    }
  }
  const Eigen::Index m = negatives.rows();
  Matrix logits(n, 1 + m);
  logits.col(0) = (q.array() * kp.array()).rowwise().sum() / tau;
  if (m > 0) logits.rightCols(m) = q * negatives.transpose() / tau;

  ContrastiveResult result;
  result.negatives_used = full ? (m > 0 ? static_cast<std::size_t>(m - 1) : 0) : static_cast<std::size_t>(m);
  result.degenerate_keys = query_tape.degenerate_keys() + positive_tape.degenerate_keys();

  Matrix probs(n, 1 + m);
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    Vector s = logits.row(r).transpose();
    if (full) s(1 + static_cast<Eigen::Index>(batch.bank_rows[static_cast<std::size_t>(r)])) =
        -std::numeric_limits<double>::infinity();
    const double lse = log_sum_exp(s);
    total += lse - s(0);
    probs.row(r) = (s.array() - lse).exp().transpose();
  }
  result.loss = total / static_cast<double>(n);
  result.fresh_keys = q;

  if (opts.compute_gradient) {
    // dL/dlogit = (p - e_0) / n; logits are (q.k) / tau.
    Matrix d_logits = probs;
    d_logits.col(0).array() -= 1.0;
    d_logits /= (static_cast<double>(n) * tau);
    Matrix d_q = d_logits.col(0).asDiagonal() * kp;
    if (m > 0) d_q += d_logits.rightCols(m) * negatives;
    Matrix d_kp = d_logits.col(0).asDiagonal() * q;
    result.gradient = FlatGradient::Zero(static_cast<Eigen::Index>(params.size()));
    query_tape.backward(nullptr, &d_q, result.gradient);
    positive_tape.backward(nullptr, &d_kp, result.gradient);
  }
  return result;
}

}  // namespace grcl
