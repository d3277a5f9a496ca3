#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "grcl/domains.hpp"
#include "grcl/model.hpp"

namespace grcl {

/// Identifies one training sample across datasets: (dataset_id, sample_id).
struct SampleKey {
  int dataset_id = 0;
  std::size_t sample_id = 0;
  auto operator<=>(const SampleKey&) const = default;
};

/// Samples contributed to a feature bank. `sample_ids` may be empty, in
/// which case rows are numbered 0..n-1.
struct BankSource {
  int dataset_id = 0;
  const Matrix* inputs = nullptr;
  std::vector<std::size_t> sample_ids;
};

/// Unit-norm key per sample of source, memory and current target, with the
/// momentum and temperature used to update and compare them.
class FeatureBank {
 public:
  FeatureBank(Matrix keys, std::vector<SampleKey> samples, double momentum, double temperature);

  std::size_t size() const { return samples_.size(); }
  std::size_t key_dim() const { return static_cast<std::size_t>(keys_.cols()); }
  const Matrix& keys() const { return keys_; }
  double momentum() const { return momentum_; }
  double temperature() const { return temperature_; }

  const SampleKey& sample_at(std::size_t row) const { return samples_.at(row); }
  std::optional<std::size_t> find(const SampleKey& key) const;
  /// Throws InvalidInput when the sample is not registered.
  std::size_t row_of(const SampleKey& key) const;

  /// Stores normalize(m * old + (1 - m) * fresh). Returns false, leaving the
  /// row untouched, when the blend has norm below 1e-12.
  bool update_key(std::size_t row, const Vector& fresh_key);

  /// CSV: dataset_id,sample_id,k0,...,k{K-1}
  void save_csv(const std::filesystem::path& path) const;

 private:
  Matrix keys_;
  std::vector<SampleKey> samples_;
  std::map<SampleKey, std::size_t> index_;
  double momentum_;
  double temperature_;
};

/// Throws ConfigError unless 0 <= m < 1 and tau > 0.
void validate_contrast_params(double momentum, double temperature);

/// Keys g(f(x)) of every sample under frozen params.
FeatureBank build_feature_bank(const ParamVector& params, std::span<const BankSource> sources, double momentum,
                               double temperature);

struct ContrastItem {
  Vector query;
  Vector positive;
  Matrix negatives;  // one key per row, may have zero rows
};

/// -log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_j e^{q.k-_j/tau}) )
double info_nce(const ContrastItem& item, double temperature);

/// `count` distinct rows drawn uniformly without replacement from the rows
/// not in `exclude` (clamped, with a warning, to what is available).
std::vector<std::size_t> sample_negative_rows(const FeatureBank& bank, std::size_t count,
                                              std::span<const std::size_t> exclude, std::uint64_t seed);
Matrix sample_negatives(const FeatureBank& bank, std::size_t count, std::span<const std::size_t> exclude,
                        std::uint64_t seed);

/// A contrastive mini-batch: inputs and the bank row of each sample.
struct ContrastiveBatch {
  Matrix inputs;
  std::vector<std::size_t> bank_rows;
};

struct ContrastiveOptions {
  AugmentStrength augment;
  /// Number of sampled negatives; nullopt uses every other bank row.
  std::optional<std::size_t> negatives = 256;
  std::uint64_t aug_seed = 0;
  std::uint64_t negative_seed = 0;
  bool compute_gradient = true;
};

struct ContrastiveResult {
  double loss = 0.0;
  Matrix fresh_keys;        // current-model queries, one row per batch sample
  FlatGradient gradient;    // empty when not requested
  std::size_t negatives_used = 0;
  std::size_t degenerate_keys = 0;
};

/// Mean InfoNCE over the batch. Queries q and positives k+ = key(augment(x))
/// are recomputed with the current params and differentiated; negatives come
/// from the bank and are constants. In sampled mode one negative set, drawn
/// from the rows outside the batch, is shared by the whole batch; in full
/// mode each sample contrasts against every row but its own.
ContrastiveResult contrastive_batch_loss(const ParamVector& params, const FeatureBank& bank,
                                         const ContrastiveBatch& batch, const ContrastiveOptions& opts);

}  // namespace grcl
