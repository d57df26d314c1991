#include "dis/nn.hpp"

#include "dis/errors.hpp"

#include <cmath>

namespace dis::nn {

std::string to_string(Activation act) {
  switch (act) {
    case Activation::Elu:
      return "elu";
    case Activation::Softplus:
      return "softplus";
    case Activation::Identity:
      return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "elu") return Activation::Elu;
  if (name == "softplus") return Activation::Softplus;
  if (name == "identity") return Activation::Identity;
  throw ContractError("unknown activation: " + name);
}

const Slice& ParamVector::add(const std::string& name, std::size_t length, bool is_weight) {
  for (const auto& s : layout_) {
    require(s.name != name, "duplicate parameter slice: " + name);
  }
  const auto offset = size();
  Vector grown = Vector::Zero(static_cast<Eigen::Index>(offset + length));
  grown.head(static_cast<Eigen::Index>(offset)) = values_;
  values_ = std::move(grown);
  layout_.push_back({name, offset, length, is_weight});
  return layout_.back();
}

const Slice& ParamVector::slice(const std::string& name) const {
  for (const auto& s : layout_) {
    if (s.name == name) return s;
  }
  throw ContractError("no parameter slice named " + name);
}

void ParamVector::assign(const Vector& flat) {
  require(flat.size() == values_.size(), "parameter length mismatch");
  values_ = flat;
}

Vector ParamVector::weight_mask() const {
  Vector mask = Vector::Zero(values_.size());
  for (const auto& s : layout_) {
    if (s.is_weight) {
      mask.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.length)).setOnes();
    }
  }
  return mask;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void apply_activation(Activation act, Matrix& x) {
  switch (act) {
    case Activation::Elu:
      x = x.unaryExpr([](double v) { return v > 0.0 ? v : std::expm1(v); });
      break;
    case Activation::Softplus:
      x = x.unaryExpr([](double v) { return softplus(v); });
      break;
    case Activation::Identity:
      break;
  }
}

Matrix activation_derivative(Activation act, const Matrix& pre) {
  switch (act) {
    case Activation::Elu:
      return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); });
    case Activation::Softplus:
      return pre.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::Identity:
      break;
  }
  return Matrix::Ones(pre.rows(), pre.cols());
}

Mlp::Mlp(const std::string& name, const std::vector<std::size_t>& sizes, Activation hidden, Activation output,
         ParamVector& params) {
  require(sizes.size() >= 2, "an Mlp needs at least input and output sizes");
  for (auto s : sizes) {
    require(s > 0, "layer sizes must be positive");
  }
  input_dim_ = sizes.front();
  output_dim_ = sizes.back();
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    DenseLayer layer;
    layer.in_dim = sizes[l];
    layer.out_dim = sizes[l + 1];
    layer.activation = (l + 2 == sizes.size()) ? output : hidden;
    const auto prefix = name + ".layer" + std::to_string(l);
    layer.weight_offset = params.add(prefix + ".weight", layer.in_dim * layer.out_dim, true).offset;
    layer.bias_offset = params.add(prefix + ".bias", layer.out_dim, false).offset;
    layers_.push_back(layer);
  }
}

std::size_t Mlp::param_count() const noexcept {
  std::size_t total = 0;
  for (const auto& l : layers_) {
    total += l.out_dim * (l.in_dim + 1);
  }
  return total;
}

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

ConstMap weights_of(ParamSpan params, const DenseLayer& l) {
  return {params.data() + l.weight_offset, static_cast<Eigen::Index>(l.out_dim), static_cast<Eigen::Index>(l.in_dim)};
}

ConstVecMap bias_of(ParamSpan params, const DenseLayer& l) {
  return {params.data() + l.bias_offset, static_cast<Eigen::Index>(l.out_dim)};
}

}  // namespace

Matrix Mlp::forward(ParamSpan params, const Matrix& input) const {
  require(static_cast<std::size_t>(input.rows()) == input_dim_, "Mlp input dimension mismatch");
  Matrix x = input;
  for (const auto& l : layers_) {
    Matrix pre = weights_of(params, l) * x;
    pre.colwise() += bias_of(params, l);
    apply_activation(l.activation, pre);
    x = std::move(pre);
  }
  return x;
}

Matrix Mlp::forward(ParamSpan params, const Matrix& input, MlpCache& cache) const {
  require(static_cast<std::size_t>(input.rows()) == input_dim_, "Mlp input dimension mismatch");
  cache.inputs.resize(layers_.size());
  cache.preacts.resize(layers_.size());
  Matrix x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    Matrix pre = weights_of(params, l) * x;
    pre.colwise() += bias_of(params, l);
    cache.inputs[i] = std::move(x);
    cache.preacts[i] = pre;
    apply_activation(l.activation, pre);
    x = std::move(pre);
  }
  return x;
}

Vector Mlp::forward(ParamSpan params, const Vector& input) const {
  Matrix in = input;
  return forward(params, in).col(0);
}

Matrix Mlp::backward(ParamSpan params, const MlpCache& cache, const Matrix& out_grad, GradSpan grad) const {
  require(cache.inputs.size() == layers_.size(), "Mlp cache does not match network");
  require(static_cast<std::size_t>(out_grad.rows()) == output_dim_, "Mlp output-gradient dimension mismatch");
  require(out_grad.cols() == cache.inputs.front().cols(), "Mlp output-gradient batch mismatch");
  require(grad.size() == params.size(), "gradient buffer size mismatch");
  Matrix g = out_grad;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& l = layers_[i];
    if (l.activation != Activation::Identity) {
      g.array() *= activation_derivative(l.activation, cache.preacts[i]).array();
    }
    Eigen::Map<Matrix> gw(grad.data() + l.weight_offset, static_cast<Eigen::Index>(l.out_dim),
                          static_cast<Eigen::Index>(l.in_dim));
    Eigen::Map<Vector> gb(grad.data() + l.bias_offset, static_cast<Eigen::Index>(l.out_dim));
    gw.noalias() += g * cache.inputs[i].transpose();
    gb += g.rowwise().sum();
    g = weights_of(params, l).transpose() * g;
  }
  return g;
}

void init_near_zero(ParamVector& params, Rng& rng, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  auto& values = params.values();
  for (const auto& s : params.layout()) {
    for (std::size_t k = 0; k < s.length; ++k) {
      double v = 0.0;
      if (s.is_weight) {
        do {
          v = normal(rng);
        } while (std::abs(v) > 2.0 * sd);
      }
      values[static_cast<Eigen::Index>(s.offset + k)] = v;
    }
  }
}

Vector l1_penalty_grad(const ParamVector& params, double strength) {
  require(std::isfinite(strength) && strength >= 0.0, "L1 strength must be finite and non-negative");
  const auto& v = params.values();
  Vector g = Vector::Zero(v.size());
  if (strength == 0.0) return g;
  for (const auto& s : params.layout()) {
    if (!s.is_weight) continue;
    for (std::size_t k = s.offset; k < s.offset + s.length; ++k) {
      const double x = v[static_cast<Eigen::Index>(k)];
      g[static_cast<Eigen::Index>(k)] = x > 0.0 ? strength : (x < 0.0 ? -strength : 0.0);
    }
  }
  return g;
}

double l1_penalty(const ParamVector& params, double strength) {
  return strength * (params.values().array().abs() * params.weight_mask().array()).sum();
}

}  // namespace dis::nn
