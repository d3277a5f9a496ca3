#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "grcl/contrast.hpp"
#include "grcl/model.hpp"

namespace grcl {

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;
  std::vector<double> wcss_history;  // after each Lloyd iteration
  int iterations = 0;
};

/// Lloyd's algorithm from k-means++ seeding; stops at an assignment fixpoint
/// or after `max_iterations`. Empty clusters are re-seeded at the point
/// farthest from its centroid. Throws std::logic_error if the within-cluster
/// sum of squares ever increases.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, int max_iterations = 100);

double within_cluster_ss(const Matrix& points, const std::vector<int>& assignments, const Matrix& centroids);

/// k-means (k = C) on encoder features, then each cluster takes the majority
/// predicted class of its members (ties toward the lowest class). Rows are
/// put in a canonical order first, so the labels follow the samples under
/// any permutation of the input.
std::vector<int> pseudo_label(const ParamVector& params, const Matrix& samples, std::size_t num_classes,
                              std::uint64_t seed);

/// Samples kept from one finished target domain with fixed pseudo-labels.
struct EpisodicMemory {
  int domain_id = 0;
  Matrix samples;
  std::vector<std::size_t> sample_ids;  // row index in the domain's training split
  std::vector<int> pseudo_labels;
  Vector confidences;

  std::size_t size() const { return sample_ids.size(); }
};

enum class SelectionMode { ClassBalanced, GlobalTop };

/// Top-confidence selection (confidence = max softmax probability). The
/// class-balanced mode takes the best ceil(capacity/C) per predicted class,
/// fills up by global confidence, then truncates to capacity.
EpisodicMemory select_episodic(const ParamVector& params, const UnlabeledSet& data, std::size_t capacity,
                               std::uint64_t seed, SelectionMode mode = SelectionMode::ClassBalanced);

/// Union of the episodic memories of completed target domains.
class DomainMemory {
 public:
  /// Domain ids must be strictly increasing.
  void append(EpisodicMemory memory);

  const std::vector<EpisodicMemory>& episodic() const { return episodic_; }
  std::size_t size() const;
  bool empty() const { return size() == 0; }

  void save_csv(const std::filesystem::path& path) const;
  static DomainMemory load_csv(const std::filesystem::path& path);

 private:
  std::vector<EpisodicMemory> episodic_;
};

class EmptyMemoryError : public std::runtime_error {
 public:
  EmptyMemoryError() : std::runtime_error("domain memory is empty; no memory constraint gradient available") {}
};

struct MemoryBatch {
  Batch batch;  // labels are pseudo-labels
  std::vector<SampleKey> provenance;
};

/// b samples drawn uniformly across all episodic memories, without
/// replacement when the memory holds at least b samples.
MemoryBatch sample_memory_batch(const DomainMemory& memory, std::size_t b, std::uint64_t seed);

/// Same draw restricted to a single episodic memory.
MemoryBatch sample_episodic_batch(const EpisodicMemory& memory, std::size_t b, std::uint64_t seed);

}  // namespace grcl
