#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "grcl/model.hpp"

namespace grcl {

/// Affine covariate shift applied to the base class-conditional mixture:
/// x' = scale * R(rotation) * x + translation, where R rotates the (x0, x1)
/// plane. `noise_sigma` is the per-class isotropic spread before the transform.
struct DomainTransform {
  double rotation = 0.0;  // radians
  Vector translation;     // empty means zero
  double scale = 1.0;
  double noise_sigma = 0.25;
};

struct DomainSequenceSpec {
  std::size_t num_classes = 5;
  std::size_t input_dim = 2;
  DomainTransform source;
  std::vector<DomainTransform> targets;
  std::size_t train_per_domain = 500;
  std::size_t test_per_domain = 200;
  double class_radius = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_target_domains() const { return targets.size(); }
  void validate() const;
};

/// Unlabeled view of a target domain's training split. This is the only form
/// in which target data reaches the adaptation code.
struct UnlabeledSet {
  int domain_id = 0;
  Matrix inputs;
};

/// One domain's train/test splits. Domain 0 is the labeled source; target
/// training labels, when present, are reachable only through the
/// evaluation accessor.
class DomainDataset {
 public:
  DomainDataset(int domain_id, Batch train, Batch test, bool labeled_for_training);

  int domain_id() const { return domain_id_; }
  bool labeled_for_training() const { return labeled_for_training_; }
  const Matrix& train_inputs() const { return train_.inputs; }
  const Batch& test() const { return test_; }

  /// Throws InvalidInput for domains that are not labeled for training.
  const Batch& labeled_train() const;
  UnlabeledSet unlabeled_train() const { return {domain_id_, train_.inputs}; }

  /// Training labels for diagnostics and file round trips, never for adaptation.
  const std::optional<std::vector<int>>& train_labels_for_evaluation() const { return train_.labels; }

  bool operator==(const DomainDataset& o) const;

 private:
  int domain_id_;
  Batch train_;
  Batch test_;
  bool labeled_for_training_;
};

/// Source domain plus one dataset per target transform, deterministic per seed.
std::vector<DomainDataset> generate_sequence(const DomainSequenceSpec& spec);

/// Default desk-scale benchmark: C=5, d=2, four targets rotated by 20/40/60/80 degrees.
DomainSequenceSpec default_benchmark_spec(std::uint64_t seed = 0);

struct AugmentStrength {
  double noise_sigma = 0.05;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
};

/// x * s + N(0, noise_sigma^2 I), s ~ U[scale_lo, scale_hi]; deterministic per (x, seed).
Vector augment(const Vector& x, const AugmentStrength& strength, std::uint64_t seed);

/// Row-wise augment; row r uses the sub-seed derived from (seed, r).
Matrix augment_rows(const Matrix& x, const AugmentStrength& strength, std::uint64_t seed);

/// CSV with header `domain_id,split,label,x0,...,x{d-1}`; numbers written
/// with 17 significant digits so that save/load is bit exact.
void save_dataset(const DomainDataset& ds, const std::filesystem::path& path);
DomainDataset load_dataset(const std::filesystem::path& path, std::size_t num_classes);

/// Shortest round-trip formatting at 17 significant digits.
std::string format_double(double v);

}  // namespace grcl
