#pragma once

#include "dis/types.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace dis::nn {

enum class Activation { Elu, Softplus, Identity };

std::string to_string(Activation act);
Activation activation_from_string(const std::string& name);

/// Named slice of a ParamVector.
struct Slice {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  bool is_weight = false;
};

/// Flat store of every trainable parameter. Slices are appended contiguously, so
/// they are disjoint and tile [0, size()).
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-initialised slice and returns it.
  const Slice& add(const std::string& name, std::size_t length, bool is_weight);

  std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }
  const std::vector<Slice>& layout() const noexcept { return layout_; }
  const Slice& slice(const std::string& name) const;

  std::span<double> view(const Slice& s) { return {values_.data() + s.offset, s.length}; }
  std::span<const double> view(const Slice& s) const { return {values_.data() + s.offset, s.length}; }

  Vector& values() noexcept { return values_; }
  const Vector& values() const noexcept { return values_; }
  ParamSpan span() const noexcept { return {values_.data(), size()}; }
  std::span<double> mutable_span() noexcept { return {values_.data(), size()}; }

  /// Copies `flat` into the store; lengths must agree.
  void assign(const Vector& flat);

  /// 1 on weight slices, 0 on bias slices.
  Vector weight_mask() const;

 private:
  Vector values_;
  std::vector<Slice> layout_;
};

struct DenseLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::Identity;
  std::size_t weight_offset = 0;  // out_dim x in_dim, column-major
  std::size_t bias_offset = 0;
};

/// Per-layer values kept from a forward pass for the backward pass.
struct MlpCache {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> preacts;      // W x + b for each layer
};

/// Dense feed-forward network whose parameters live in an external ParamVector.
/// Copyable: it only holds shapes and offsets.
class Mlp {
 public:
  Mlp() = default;

  /// `sizes` = {input, hidden..., output}. Hidden layers use `hidden`, the last layer `output`.
  Mlp(const std::string& name, const std::vector<std::size_t>& sizes, Activation hidden, Activation output,
      ParamVector& params);

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t output_dim() const noexcept { return output_dim_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::size_t param_count() const noexcept;

  /// Batched forward pass; one input per column.
  Matrix forward(ParamSpan params, const Matrix& input) const;
  Matrix forward(ParamSpan params, const Matrix& input, MlpCache& cache) const;
  Vector forward(ParamSpan params, const Vector& input) const;

  /// Accumulates d(sum_cols out_grad . output)/dparams into `grad` (indexed like `params`)
  /// and returns the gradient with respect to the input batch.
  Matrix backward(ParamSpan params, const MlpCache& cache, const Matrix& out_grad, GradSpan grad) const;

 private:
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
  std::vector<DenseLayer> layers_;
};

/// Biases to exactly 0, weights from N(0, sd^2) truncated at two standard deviations.
void init_near_zero(ParamVector& params, Rng& rng, double sd = 1e-3);

/// strength * sign(w) on weight slices, 0 elsewhere (and at exactly 0).
Vector l1_penalty_grad(const ParamVector& params, double strength);

/// strength * sum |w| over weight slices.
double l1_penalty(const ParamVector& params, double strength);

void apply_activation(Activation act, Matrix& x);
/// Elementwise derivative of the activation given its pre-activation.
Matrix activation_derivative(Activation act, const Matrix& pre);

double softplus(double x);
double sigmoid(double x);

}  // namespace dis::nn
