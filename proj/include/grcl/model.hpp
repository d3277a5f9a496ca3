#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace grcl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using FlatGradient = Eigen::VectorXd;

/// Architecture of the classifier: an MLP encoder f (ReLU after every layer,
/// including the feature layer), a linear classifier head, and a bias-free
/// two layer projection head g(z) = W2 relu(W1 z).
struct ModelSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::size_t feature_dim = 16;
  std::size_t num_classes = 5;
  std::size_t head_hidden_dim = 32;
  std::size_t key_dim = 16;

  void validate() const;
  std::size_t param_count() const;

  bool operator==(const ModelSpec&) const = default;
};

/// Location of one dense layer inside the flat parameter vector. Weights are
/// stored row-major as (out x in); `bias_offset` is absent for bias-free layers.
struct LayerSlice {
  std::size_t weight_offset = 0;
  std::optional<std::size_t> bias_offset;
  std::size_t out = 0;
  std::size_t in = 0;
};

struct ParamLayout {
  std::vector<LayerSlice> encoder;
  LayerSlice classifier;
  LayerSlice head_hidden;
  LayerSlice head_out;
  std::size_t total = 0;

  static ParamLayout of(const ModelSpec& spec);
};

/// Flat parameter vector theta. All gradients share this coordinate system.
class ParamVector {
 public:
  /// All-zero parameters.
  explicit ParamVector(ModelSpec spec);
  /// Throws InvalidInput when the length does not match or an entry is not finite.
  ParamVector(ModelSpec spec, Vector values);

  /// Glorot-uniform weights, zero biases, deterministic per seed.
  static ParamVector initialize(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  const Vector& values() const { return values_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  Eigen::Map<const Matrix> weight(const LayerSlice& s) const;
  Eigen::Map<Matrix> weight(const LayerSlice& s);
  Eigen::Map<const Vector> bias(const LayerSlice& s) const;
  Eigen::Map<Vector> bias(const LayerSlice& s);

  bool operator==(const ParamVector& o) const { return spec_ == o.spec_ && values_ == o.values_; }

 private:
  ModelSpec spec_;
  ParamLayout layout_;
  Vector values_;
};

/// A mini-batch. Labels are absent for unlabeled target data.
struct Batch {
  Matrix inputs;
  std::optional<std::vector<int>> labels;

  std::size_t rows() const { return static_cast<std::size_t>(inputs.rows()); }
  bool labeled() const { return labels.has_value(); }
  /// Row count >= 1, label count matches, labels in [0, num_classes).
  void validate(std::size_t num_classes) const;
};

struct ForwardOutput {
  Matrix features;
  Matrix logits;
};

ForwardOutput forward(const ParamVector& params, const Matrix& inputs);

/// Unit-norm keys k = g(z) / ||g(z)||. Rows whose head output is (numerically)
/// zero get a 1e-12 offset on every coordinate before normalization; the
/// number of such rows is written to `degenerate` when given.
Matrix project_key(const ParamVector& params, const Matrix& features, std::size_t* degenerate = nullptr);

/// Mean cross-entropy of softmax(logits) against labels.
double ce_loss(const Matrix& logits, std::span<const int> labels);

/// Row-wise max-subtracted softmax.
Matrix softmax_rows(const Matrix& logits);

/// params - lr * grad. Throws TrainingDivergence on a non-finite gradient.
ParamVector sgd_step(const ParamVector& params, const FlatGradient& grad, double lr);

/// Records one forward pass so that gradients of any loss built from its
/// logits and/or keys can be pulled back to the flat parameter vector.
class Tape {
 public:
  Tape(const ParamVector& params, const Matrix& inputs, bool with_head);

  const Matrix& features() const { return activations_.back(); }
  const Matrix& logits() const { return logits_; }
  const Matrix& keys() const { return keys_; }
  std::size_t degenerate_keys() const { return degenerate_; }

  /// Accumulates d(loss)/d(theta) into `grad` given upstream gradients with
  /// respect to the logits and/or the normalized keys (either may be null).
  void backward(const Matrix* d_logits, const Matrix* d_keys, FlatGradient& grad) const;

 private:
  const ParamVector& params_;
  std::vector<Matrix> activations_;  // activations_[0] = inputs, back() = features
  std::vector<Matrix> pre_;          // encoder pre-activations
  Matrix logits_;
  Matrix head_pre_;
  Matrix head_hidden_;
  Matrix head_out_;
  Matrix keys_;
  Vector head_norms_;
  std::vector<bool> degenerate_rows_;
  std::size_t degenerate_ = 0;
  bool with_head_;
};

struct LossAndGradient {
  double loss = 0.0;
  FlatGradient gradient;
};

/// Mean cross-entropy on a labeled batch and its exact gradient.
LossAndGradient ce_loss_and_gradient(const ParamVector& params, const Matrix& inputs, std::span<const int> labels);

/// Predicted class per row (argmax, ties toward the lowest index).
std::vector<int> predict(const ParamVector& params, const Matrix& inputs);

}  // namespace grcl
