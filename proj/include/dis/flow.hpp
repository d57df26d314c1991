#pragma once

#include "dis/nn.hpp"
#include "dis/target.hpp"
#include "dis/types.hpp"

#include <cstdint>
#include <json.hpp>
#include <vector>

namespace dis::flow {

enum class PermutationKind { Reverse, Random };

struct FlowArchitecture {
  std::size_t dim = 2;
  std::size_t couplings = 4;
  std::vector<std::size_t> hidden = {10, 10, 10};
  nn::Activation activation = nn::Activation::Elu;
  PermutationKind permutation = PermutationKind::Reverse;
  std::uint64_t permutation_seed = 0;
  /// σ is soft-clamped to s·tanh(σ/s) before exponentiation.
  double sigma_clamp = 10.0;
};

nlohmann::json to_json(const FlowArchitecture& arch);
FlowArchitecture architecture_from_json(const nlohmann::json& j);

/// Fixed index permutation: out[i] = in[perm[i]].
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<std::size_t> perm);
  static Permutation reverse(std::size_t dim);
  static Permutation random(std::size_t dim, Rng& rng);

  const std::vector<std::size_t>& indices() const noexcept { return perm_; }
  Matrix apply(const Matrix& in) const;
  Matrix apply_inverse(const Matrix& in) const;

 private:
  std::vector<std::size_t> perm_;
};

/// Affine coupling: copies the first d coordinates, v_b = μ + exp(σ) ⊙ u_b with
/// (μ, σ) produced by one network fed u_{1:d}.
struct CouplingLayer {
  std::size_t dim = 0;
  std::size_t split = 0;  // d
  nn::Mlp net;            // d -> 2(D-d): rows [μ; σ_raw]
};

struct ForwardResult {
  Batch outputs;     // T(z)
  Vector log_det;    // Σ log|det J_forward| per column
};

/// Real NVP stack of couplings alternated with fixed permutations. Parameters are held
/// externally in a ParamVector.
class RealNvp {
 public:
  RealNvp() = default;
  RealNvp(const FlowArchitecture& arch, nn::ParamVector& params, const std::string& prefix = "flow");

  const FlowArchitecture& architecture() const noexcept { return arch_; }
  std::size_t dim() const noexcept { return arch_.dim; }
  const std::vector<CouplingLayer>& couplings() const noexcept { return couplings_; }
  const std::vector<Permutation>& permutations() const noexcept { return perms_; }

  ForwardResult forward(ParamSpan params, const Batch& z) const;
  /// Returns T^{-1}(ξ) and Σ log|det J_inverse|.
  ForwardResult inverse(ParamSpan params, const Batch& xi) const;

  Vector log_prob(ParamSpan params, const Batch& xi) const;

  /// grad += Σ_j coeffs_j ∇φ log q(ξ_j); returns log q. `extra_input_grad`, if non-null,
  /// receives ∂(Σ_j coeffs_j log q(ξ_j))/∂ξ.
  Vector accumulate_grad(ParamSpan params, const Batch& xi, const Vector& coeffs, GradSpan grad,
                         Matrix* input_grad = nullptr) const;

  /// (μ, exp σ) of one coupling at the given conditioner inputs.
  std::pair<Matrix, Matrix> shift_and_scale(ParamSpan params, std::size_t layer, const Matrix& conditioner) const;

 private:
  double clamp(double s) const;

  FlowArchitecture arch_;
  std::vector<CouplingLayer> couplings_;
  std::vector<Permutation> perms_;  // perms_[k] follows couplings_[k], k < couplings-1
};

double standard_normal_log_density(const Eigen::Ref<const Vector>& z);
Vector standard_normal_log_density(const Batch& z);

/// Real NVP as a stand-alone proposal over R^D with N(0, I) base.
class FlowProposal final : public Proposal {
 public:
  explicit FlowProposal(const FlowArchitecture& arch);

  /// Near-identity initialisation: biases 0, weights N(0, 0.001²) truncated at 2 sd.
  static FlowProposal init_identity(const FlowArchitecture& arch, Rng& rng);

  std::size_t dim() const override { return flow_.dim(); }
  ProposalDraw sample(Rng& rng, std::size_t n) const override;
  /// Sample from explicit base draws.
  ProposalDraw transform(const Batch& z) const;
  Vector log_prob(const Batch& xis) const override;
  Vector accumulate_grad(const Batch& xis, const Vector& coeffs, GradSpan grad) const override;

  nn::ParamVector& params() override { return params_; }
  const nn::ParamVector& params() const override { return params_; }
  std::unique_ptr<Proposal> clone() const override { return std::make_unique<FlowProposal>(*this); }
  nlohmann::json architecture() const override;

  const RealNvp& flow() const noexcept { return flow_; }

 private:
  nn::ParamVector params_;
  RealNvp flow_;
};

}  // namespace dis::flow
