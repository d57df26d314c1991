#pragma once

#include "dis/flow.hpp"
#include "dis/nn.hpp"
#include "dis/target.hpp"

#include <array>
#include <optional>
#include <vector>

namespace dis::models {

using State3 = Eigen::Vector3d;

/// Discretised stochastic Lorenz-63 system observed with Gaussian noise.
struct LorenzSpec {
  std::size_t steps = 100;                 // m
  double dt = 0.02;
  State3 x0{-30.0, 0.0, 30.0};
  double diffusion = 10.0;                 // x_{i+1} = x_i + αΔt + sqrt(diffusion Δt) ε
  std::vector<std::size_t> obs_steps{20, 40, 60, 80, 100};
  std::optional<double> known_sigma;       // unset: σ is the fourth parameter
  double prior_rate = 0.1;                 // independent Exp(rate) priors
  double guard = 1000.0;                   // zero weight when any |x_ij| exceeds this

  std::size_t param_dim() const noexcept { return known_sigma ? 3 : 4; }
  std::size_t xi_dim() const noexcept { return param_dim() + 3 * steps; }
  void validate() const;
  double sigma_of(const Eigen::Ref<const Vector>& theta) const;

  /// Next observation strictly after step i: (index into obs_steps, steps until it).
  /// After the last observation returns the last index and 0.
  std::pair<std::size_t, std::size_t> next_observation(std::size_t i) const;
};

/// (θ1(x2−x1), θ2x1 − x2 − x1x3, x1x2 − θ3x3).
State3 lorenz_drift(const State3& x, const Eigen::Ref<const Vector>& theta);

/// Euler–Maruyama path x_0..x_m (3 x (m+1)) with unit-normal increments `noise` (3 x m).
Matrix lorenz_path_from_noise(const LorenzSpec& spec, const Eigen::Ref<const Vector>& theta, const Matrix& noise,
                              double diffusion);
Matrix lorenz_simulate_unconditioned(const LorenzSpec& spec, const Eigen::Ref<const Vector>& theta, Rng& rng);

/// p̃_ε(ξ) = π(θ) p(x|θ) p(y|x,θ)^(1−ε), ξ = (θ, x_1..x_m).
class LorenzTarget final : public TemperedTarget {
 public:
  LorenzTarget(LorenzSpec spec, Matrix observations);

  std::string name() const override { return spec_.known_sigma ? "lorenz_fixed_sigma" : "lorenz"; }
  std::size_t dim() const override { return spec_.xi_dim(); }
  EpsDomain eps_domain() const override { return {0.0, 1.0, 0.0}; }

  /// base = log prior + log path density; tempered = Σ log N(y_k; x_{t_k}, σ²I).
  TemperTerms terms(const Eigen::Ref<const Vector>& xi) const override;
  double combine(const TemperTerms& t, double eps) const override;

  bool has_initial_sampler() const override { return true; }
  Batch sample_initial(Rng& rng, std::size_t n) const override;

  Vector parameters(const Eigen::Ref<const Vector>& xi) const override { return xi.head(spec_.param_dim()); }
  std::size_t parameter_dim() const override { return spec_.param_dim(); }

  double log_prior(const Eigen::Ref<const Vector>& theta) const;
  double log_path_density(const Eigen::Ref<const Vector>& theta, const Matrix& path) const;
  double log_observation_density(const Eigen::Ref<const Vector>& theta, const Matrix& path) const;
  bool guard_tripped(const Matrix& path) const;

  /// x_0..x_m (3 x (m+1)) recovered from ξ.
  Matrix path_of(const Eigen::Ref<const Vector>& xi) const;

  const LorenzSpec& spec() const noexcept { return spec_; }
  const Matrix& observations() const noexcept { return obs_; }

 private:
  LorenzSpec spec_;
  Matrix obs_;  // 3 x n_obs
};

struct LorenzProposalArchitecture {
  flow::FlowArchitecture theta_flow;       // dim must equal param_dim
  std::vector<std::size_t> step_hidden{80, 80, 80};
  nn::Activation activation = nn::Activation::Elu;
};

/// Feature count of the step network input.
std::size_t lorenz_feature_dim(const LorenzSpec& spec);

/// γ = (10 / log 2) softplus(η), so η = 0 gives γ = 10.
double gamma_transform(double eta);

/// q(ξ) = q(θ) Π q(x_{i+1} | x_i, θ): a real NVP over η = log θ and the conditioned
/// Euler–Maruyama step x_{i+1} = x_i + [α + β]Δt + sqrt(γΔt) ε with (β, γ) from a network.
class LorenzProposal final : public Proposal {
 public:
  LorenzProposal(LorenzSpec spec, Matrix observations, const LorenzProposalArchitecture& arch);

  static LorenzProposal init_identity(LorenzSpec spec, Matrix observations, const LorenzProposalArchitecture& arch,
                                      Rng& rng);

  std::size_t dim() const override { return spec_.xi_dim(); }
  ProposalDraw sample(Rng& rng, std::size_t n) const override;
  /// Deterministic given base draws for θ (P x n) and step noise (3m x n).
  ProposalDraw transform(const Batch& theta_base, const Batch& step_noise) const;
  Vector log_prob(const Batch& xis) const override;
  Vector accumulate_grad(const Batch& xis, const Vector& coeffs, GradSpan grad) const override;

  nn::ParamVector& params() override { return params_; }
  const nn::ParamVector& params() const override { return params_; }
  std::unique_ptr<Proposal> clone() const override { return std::make_unique<LorenzProposal>(*this); }
  nlohmann::json architecture() const override;

  /// Network features for state x_i at step i.
  Vector features(std::size_t step, const State3& x, const Eigen::Ref<const Vector>& theta) const;
  /// (β, γ) at one state.
  std::pair<State3, double> step_outputs(std::size_t step, const State3& x, const Eigen::Ref<const Vector>& theta) const;

  const flow::RealNvp& theta_flow() const noexcept { return theta_flow_; }
  const nn::Mlp& step_net() const noexcept { return step_net_; }
  const LorenzSpec& spec() const noexcept { return spec_; }

 private:
  Vector chunk_log_prob(const Batch& xis, const Vector* coeffs, GradSpan grad) const;
  void fill_features(std::size_t step, const Matrix& x, const Matrix& theta, Eigen::Ref<Matrix> out) const;

  LorenzSpec spec_;
  Matrix obs_;
  LorenzProposalArchitecture arch_;
  nn::ParamVector params_;
  flow::RealNvp theta_flow_;
  nn::Mlp step_net_;
};

}  // namespace dis::models
