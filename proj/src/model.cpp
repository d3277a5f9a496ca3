#include "grcl/model.hpp"

#include <cmath>
#include <string>

#include "grcl/errors.hpp"
#include "grcl/rng.hpp"

namespace grcl {

namespace {

constexpr double kKeyEpsilon = 1e-12;

LayerSlice make_slice(std::size_t& cursor, std::size_t out, std::size_t in, bool with_bias) {
  LayerSlice s;
  s.weight_offset = cursor;
  s.out = out;
  s.in = in;
  cursor += out * in;
  if (with_bias) {
    s.bias_offset = cursor;
    cursor += out;
  }
  return s;
}

void relu_inplace(Matrix& m) { m = m.cwiseMax(0.0); }

// d/dz relu(z) with the convention relu'(0) = 0.
void relu_backward(Matrix& grad, const Matrix& pre) {
  grad.array() *= (pre.array() > 0.0).cast<double>();
}

Matrix dense(const ParamVector& p, const LayerSlice& s, const Matrix& in) {
  Matrix out = in * p.weight(s).transpose();
  if (s.bias_offset) out.rowwise() += p.bias(s).transpose();
  return out;
}

// Accumulates weight/bias gradients of `out = in * W^T + b` and returns d(in).
Matrix dense_backward(const ParamVector& p, const LayerSlice& s, const Matrix& in, const Matrix& d_out,
                      FlatGradient& grad) {
  Eigen::Map<Matrix> gw(grad.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
                        static_cast<Eigen::Index>(s.in));
  gw.noalias() += d_out.transpose() * in;
  if (s.bias_offset) {
    Eigen::Map<Vector> gb(grad.data() + *s.bias_offset, static_cast<Eigen::Index>(s.out));
    gb += d_out.colwise().sum().transpose();
  }
  return d_out * p.weight(s);
}

void check_inputs(const ParamVector& params, const Matrix& inputs) {
  if (static_cast<std::size_t>(inputs.cols()) != params.spec().input_dim) {
    throw InvalidInput("input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                       std::to_string(params.spec().input_dim));
  }
}

}  // namespace

void ModelSpec::validate() const {
  if (input_dim == 0 || feature_dim == 0 || head_hidden_dim == 0 || key_dim == 0) {
    throw InvalidInput("model dimensions must be >= 1");
  }
  if (num_classes < 2) throw InvalidInput("num_classes must be >= 2");
  for (auto h : hidden_dims) {
    if (h == 0) throw InvalidInput("hidden widths must be >= 1");
  }
}

std::size_t ModelSpec::param_count() const { return ParamLayout::of(*this).total; }

ParamLayout ParamLayout::of(const ModelSpec& spec) {
  spec.validate();
  ParamLayout layout;
  std::size_t cursor = 0;
  std::size_t in = spec.input_dim;
  for (auto h : spec.hidden_dims) {
    layout.encoder.push_back(make_slice(cursor, h, in, true));
    in = h;
  }
  layout.encoder.push_back(make_slice(cursor, spec.feature_dim, in, true));
  layout.classifier = make_slice(cursor, spec.num_classes, spec.feature_dim, true);
  layout.head_hidden = make_slice(cursor, spec.head_hidden_dim, spec.feature_dim, false);
  layout.head_out = make_slice(cursor, spec.key_dim, spec.head_hidden_dim, false);
  layout.total = cursor;
  return layout;
}

ParamVector::ParamVector(ModelSpec spec)
    : spec_(std::move(spec)), layout_(ParamLayout::of(spec_)),
      values_(Vector::Zero(static_cast<Eigen::Index>(layout_.total))) {}

ParamVector::ParamVector(ModelSpec spec, Vector values)
    : spec_(std::move(spec)), layout_(ParamLayout::of(spec_)), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.size()) != layout_.total) {
    throw InvalidInput("parameter vector has length " + std::to_string(values_.size()) + ", spec needs " +
                       std::to_string(layout_.total));
  }
  if (!values_.allFinite()) throw InvalidInput("parameter vector has non-finite entries");
}

ParamVector ParamVector::initialize(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector p(spec);
  Rng rng(derive_seed(seed, {0x1417}));
  auto fill = [&](const LayerSlice& s) {
    const double limit = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
    auto w = p.weight(s);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
  };
  for (const auto& s : p.layout_.encoder) fill(s);
  fill(p.layout_.classifier);
  fill(p.layout_.head_hidden);
  fill(p.layout_.head_out);
  return p;
}

Eigen::Map<const Matrix> ParamVector::weight(const LayerSlice& s) const {
  return {values_.data() + s.weight_offset, static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in)};
}
Eigen::Map<Matrix> ParamVector::weight(const LayerSlice& s) {
  return {values_.data() + s.weight_offset, static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in)};
}
Eigen::Map<const Vector> ParamVector::bias(const LayerSlice& s) const {
  return {values_.data() + s.bias_offset.value(), static_cast<Eigen::Index>(s.out)};
}
Eigen::Map<Vector> ParamVector::bias(const LayerSlice& s) {
  return {values_.data() + s.bias_offset.value(), static_cast<Eigen::Index>(s.out)};
}

void Batch::validate(std::size_t num_classes) const {
  if (inputs.rows() < 1) throw InvalidInput("batch must have at least one row");
  if (!labels) return;
  if (labels->size() != rows()) throw InvalidInput("label count does not match row count");
  for (int y : *labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw InvalidInput("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

ForwardOutput forward(const ParamVector& params, const Matrix& inputs) {
  check_inputs(params, inputs);
  Matrix h = inputs;
  for (const auto& s : params.layout().encoder) {
    h = dense(params, s, h);
    relu_inplace(h);
  }
  Matrix logits = dense(params, params.layout().classifier, h);
  return {std::move(h), std::move(logits)};
}

Matrix project_key(const ParamVector& params, const Matrix& features, std::size_t* degenerate) {
  if (static_cast<std::size_t>(features.cols()) != params.spec().feature_dim) {
    throw InvalidInput("feature matrix width does not match spec.feature_dim");
  }
  Matrix hidden = dense(params, params.layout().head_hidden, features);
  relu_inplace(hidden);
  Matrix keys = dense(params, params.layout().head_out, hidden);
  std::size_t bad = 0;
  for (Eigen::Index r = 0; r < keys.rows(); ++r) {
    double n = keys.row(r).norm();
    if (n < kKeyEpsilon) {
      keys.row(r).array() += kKeyEpsilon;
      n = keys.row(r).norm();
      ++bad;
    }
    keys.row(r) /= n;
  }
  if (degenerate) *degenerate = bad;
  return keys;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

double ce_loss(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != static_cast<std::size_t>(logits.rows())) {
    throw InvalidInput("label count does not match logit rows");
  }
  if (labels.empty()) throw InvalidInput("empty batch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw InvalidInput("label " + std::to_string(y) + " out of range");
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, y);
  }
  return total / static_cast<double>(logits.rows());
}

ParamVector sgd_step(const ParamVector& params, const FlatGradient& grad, double lr) {
  if (static_cast<std::size_t>(grad.size()) != params.size()) {
    throw InvalidInput("gradient length does not match parameter count");
  }
  if (!grad.allFinite()) throw TrainingDivergence("non-finite gradient entries; step refused");
  return ParamVector(params.spec(), params.values() - lr * grad);
}

Tape::Tape(const ParamVector& params, const Matrix& inputs, bool with_head)
    : params_(params), with_head_(with_head) {
  check_inputs(params, inputs);
  activations_.push_back(inputs);
  for (const auto& s : params.layout().encoder) {
    pre_.push_back(dense(params, s, activations_.back()));
    Matrix a = pre_.back();
    relu_inplace(a);
    activations_.push_back(std::move(a));
  }
  logits_ = dense(params, params.layout().classifier, activations_.back());
  if (!with_head_) return;

  head_pre_ = dense(params, params.layout().head_hidden, activations_.back());
  head_hidden_ = head_pre_.cwiseMax(0.0);
  head_out_ = dense(params, params.layout().head_out, head_hidden_);
  keys_ = head_out_;
  head_norms_.resize(keys_.rows());
  degenerate_rows_.assign(static_cast<std::size_t>(keys_.rows()), false);
  for (Eigen::Index r = 0; r < keys_.rows(); ++r) {
    double n = keys_.row(r).norm();
    if (n < kKeyEpsilon) {
      keys_.row(r).array() += kKeyEpsilon;
      n = keys_.row(r).norm();
      degenerate_rows_[static_cast<std::size_t>(r)] = true;
      ++degenerate_;
    }
    head_norms_(r) = n;
    keys_.row(r) /= n;
  }
}

void Tape::backward(const Matrix* d_logits, const Matrix* d_keys, FlatGradient& grad) const {
  if (static_cast<std::size_t>(grad.size()) != params_.size()) {
    grad = FlatGradient::Zero(static_cast<Eigen::Index>(params_.size()));
  }
  const auto& layout = params_.layout();
  const Matrix& feats = activations_.back();
  Matrix d_feat = Matrix::Zero(feats.rows(), feats.cols());

  if (d_logits) d_feat += dense_backward(params_, layout.classifier, feats, *d_logits, grad);

  if (d_keys) {
    if (!with_head_) throw InvalidInput("tape was recorded without the projection head");
    // k = h / |h|  =>  dh = (dk - k (k . dk)) / |h|. Degenerate rows are treated as constant.
    Matrix d_out(d_keys->rows(), d_keys->cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
      if (degenerate_rows_[static_cast<std::size_t>(r)]) {
        d_out.row(r).setZero();
        continue;
      }
      const double proj = keys_.row(r).dot(d_keys->row(r));
      d_out.row(r) = (d_keys->row(r) - proj * keys_.row(r)) / head_norms_(r);
    }
    Matrix d_hidden = dense_backward(params_, layout.head_out, head_hidden_, d_out, grad);
    relu_backward(d_hidden, head_pre_);
    d_feat += dense_backward(params_, layout.head_hidden, feats, d_hidden, grad);
  }

  Matrix d = std::move(d_feat);
  for (std::size_t i = layout.encoder.size(); i-- > 0;) {
    relu_backward(d, pre_[i]);
    d = dense_backward(params_, layout.encoder[i], activations_[i], d, grad);
  }
}

LossAndGradient ce_loss_and_gradient(const ParamVector& params, const Matrix& inputs, std::span<const int> labels) {
  Tape tape(params, inputs, false);
  LossAndGradient out;
  out.loss = ce_loss(tape.logits(), labels);
  Matrix d_logits = softmax_rows(tape.logits());
  const double inv_n = 1.0 / static_cast<double>(inputs.rows());
  for (Eigen::Index r = 0; r < d_logits.rows(); ++r) d_logits(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
  d_logits *= inv_n;
  out.gradient = FlatGradient::Zero(static_cast<Eigen::Index>(params.size()));
  tape.backward(&d_logits, nullptr, out.gradient);
  return out;
}

std::vector<int> predict(const ParamVector& params, const Matrix& inputs) {
  const auto out = forward(params, inputs);
  std::vector<int> pred(static_cast<std::size_t>(out.logits.rows()));
  for (Eigen::Index r = 0; r < out.logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < out.logits.cols(); ++c) {
      if (out.logits(r, c) > out.logits(r, best)) best = c;
    }
    pred[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return pred;
}

}  // namespace grcl
