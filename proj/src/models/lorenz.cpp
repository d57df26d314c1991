#include "dis/models/lorenz.hpp"

#include "dis/errors.hpp"
#include "dis/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dis::models {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr std::size_t kLorenzChunk = 64;

// Fixed input scalings that bring the step-network features to O(1).
constexpr double kThetaScale = 10.0;
constexpr double kStateScale = 20.0;
constexpr double kDriftScale = 200.0;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

void LorenzSpec::validate() const {
  require(steps >= 1, "Lorenz model needs at least one step");
  require(dt > 0.0 && diffusion > 0.0, "dt and diffusion must be positive");
  require(!obs_steps.empty(), "Lorenz model needs observation times");
  for (std::size_t k = 0; k < obs_steps.size(); ++k) {
    require(obs_steps[k] >= 1 && obs_steps[k] <= steps, "observation step out of range");
    require(k == 0 || obs_steps[k] > obs_steps[k - 1], "observation steps must increase");
  }
  require(!known_sigma || *known_sigma > 0.0, "known sigma must be positive");
  require(prior_rate > 0.0 && guard > 0.0, "prior rate and guard must be positive");
}

double LorenzSpec::sigma_of(const Eigen::Ref<const Vector>& theta) const {
  return known_sigma ? *known_sigma : theta[3];
}

std::pair<std::size_t, std::size_t> LorenzSpec::next_observation(std::size_t i) const {
  for (std::size_t k = 0; k < obs_steps.size(); ++k) {
    if (obs_steps[k] > i) return {k, obs_steps[k] - i};
  }
  return {obs_steps.size() - 1, 0};
}

State3 lorenz_drift(const State3& x, const Eigen::Ref<const Vector>& theta) {
  return {theta[0] * (x[1] - x[0]), theta[1] * x[0] - x[1] - x[0] * x[2], x[0] * x[1] - theta[2] * x[2]};
}

Matrix lorenz_path_from_noise(const LorenzSpec& spec, const Eigen::Ref<const Vector>& theta, const Matrix& noise,
                              double diffusion) {
  require(noise.rows() == 3 && static_cast<std::size_t>(noise.cols()) == spec.steps, "noise must be 3 x m");
  Matrix path(3, idx(spec.steps + 1));
  path.col(0) = spec.x0;
  const double sd = std::sqrt(diffusion * spec.dt);
  for (std::size_t i = 0; i < spec.steps; ++i) {
    const State3 x = path.col(idx(i));
    path.col(idx(i + 1)) = x + lorenz_drift(x, theta) * spec.dt + sd * noise.col(idx(i));
  }
  return path;
}

Matrix lorenz_simulate_unconditioned(const LorenzSpec& spec, const Eigen::Ref<const Vector>& theta, Rng& rng) {
  return lorenz_path_from_noise(spec, theta, standard_normal_matrix(rng, 3, idx(spec.steps)), spec.diffusion);
}

LorenzTarget::LorenzTarget(LorenzSpec spec, Matrix observations) : spec_(std::move(spec)), obs_(std::move(observations)) {
  spec_.validate();
  require(obs_.rows() == 3 && static_cast<std::size_t>(obs_.cols()) == spec_.obs_steps.size(),
          "observations must be 3 x (number of observation steps)");
}

Matrix LorenzTarget::path_of(const Eigen::Ref<const Vector>& xi) const {
  require(static_cast<std::size_t>(xi.size()) == dim(), "Lorenz input dimension mismatch");
  Matrix path(3, idx(spec_.steps + 1));
  path.col(0) = spec_.x0;
  path.rightCols(idx(spec_.steps)) =
      Eigen::Map<const Matrix>(xi.data() + spec_.param_dim(), 3, idx(spec_.steps));
  return path;
}

double LorenzTarget::log_prior(const Eigen::Ref<const Vector>& theta) const {
  double lp = 0.0;
  for (std::size_t j = 0; j < spec_.param_dim(); ++j) {
    const double t = theta[idx(j)];
    if (!(t > 0.0) || !std::isfinite(t)) return kNegInf;
    lp += std::log(spec_.prior_rate) - spec_.prior_rate * t;
  }
  return lp;
}

double LorenzTarget::log_path_density(const Eigen::Ref<const Vector>& theta, const Matrix& path) const {
  const double var = spec_.diffusion * spec_.dt;
  double lp = 0.0;
  for (std::size_t i = 0; i < spec_.steps; ++i) {
    const State3 x = path.col(idx(i));
    const State3 r = path.col(idx(i + 1)) - x - lorenz_drift(x, theta) * spec_.dt;
    lp += -1.5 * (kLog2Pi + std::log(var)) - r.squaredNorm() / (2.0 * var);
  }
  return lp;
}

double LorenzTarget::log_observation_density(const Eigen::Ref<const Vector>& theta, const Matrix& path) const {
  const double sigma = spec_.sigma_of(theta);
  const double var = sigma * sigma;
  double lp = 0.0;
  for (std::size_t k = 0; k < spec_.obs_steps.size(); ++k) {
    const State3 r = obs_.col(idx(k)) - path.col(idx(spec_.obs_steps[k]));
    lp += -1.5 * (kLog2Pi + std::log(var)) - r.squaredNorm() / (2.0 * var);
  }
  return lp;
}

bool LorenzTarget::guard_tripped(const Matrix& path) const {
  return !path.allFinite() || path.cwiseAbs().maxCoeff() > spec_.guard;
}

TemperTerms LorenzTarget::terms(const Eigen::Ref<const Vector>& xi) const {
  const Vector theta = xi.head(idx(spec_.param_dim()));
  TemperTerms t;
  t.base = log_prior(theta);
  if (t.base == kNegInf) {
    t.tempered = 0.0;
    return t;
  }
  const Matrix path = path_of(xi);
  if (guard_tripped(path)) {
    t.base = kNegInf;
    t.tempered = 0.0;
    return t;
  }
  t.base += log_path_density(theta, path);
  t.tempered = log_observation_density(theta, path);
  return t;
}

double LorenzTarget::combine(const TemperTerms& t, double eps) const {
  if (t.base == kNegInf) return kNegInf;
  if (eps >= 1.0) return t.base;
  return t.base + (1.0 - eps) * t.tempered;
}

Batch LorenzTarget::sample_initial(Rng& rng, std::size_t n) const {
  std::exponential_distribution<double> prior(spec_.prior_rate);
  const auto P = spec_.param_dim();
  Batch out(idx(dim()), idx(n));
  for (std::size_t j = 0; j < n; ++j) {
    // p̃ is zero beyond the guard, so exact draws are prior simulations that stay inside it.
    Vector theta(idx(P));
    Matrix path;
    do {
      for (std::size_t k = 0; k < P; ++k) theta[idx(k)] = prior(rng);
      path = lorenz_simulate_unconditioned(spec_, theta, rng);
    } while (guard_tripped(path));
    out.col(idx(j)).head(idx(P)) = theta;
    out.col(idx(j)).tail(idx(3 * spec_.steps)) =
        Eigen::Map<const Vector>(path.data() + 3, idx(3 * spec_.steps));
  }
  return out;
}

std::size_t lorenz_feature_dim(const LorenzSpec& spec) { return spec.param_dim() + 11; }

double gamma_transform(double eta) { return 10.0 / std::numbers::ln2 * nn::softplus(eta); }

namespace {

double gamma_derivative(double eta) { return 10.0 / std::numbers::ln2 * nn::sigmoid(eta); }

}  // namespace

LorenzProposal::LorenzProposal(LorenzSpec spec, Matrix observations, const LorenzProposalArchitecture& arch)
    : spec_(std::move(spec)), obs_(std::move(observations)), arch_(arch) {
  spec_.validate();
  require(arch_.theta_flow.dim == spec_.param_dim(), "theta flow dimension must equal the parameter count");
  require(obs_.rows() == 3 && static_cast<std::size_t>(obs_.cols()) == spec_.obs_steps.size(),
          "observations must be 3 x (number of observation steps)");
  theta_flow_ = flow::RealNvp(arch_.theta_flow, params_, "theta_flow");
  std::vector<std::size_t> sizes{lorenz_feature_dim(spec_)};
  sizes.insert(sizes.end(), arch_.step_hidden.begin(), arch_.step_hidden.end());
  sizes.push_back(4);
  step_net_ = nn::Mlp("step_net", sizes, arch_.activation, nn::Activation::Identity, params_);
}

LorenzProposal LorenzProposal::init_identity(LorenzSpec spec, Matrix observations,
                                             const LorenzProposalArchitecture& arch, Rng& rng) {
  LorenzProposal p(std::move(spec), std::move(observations), arch);
  nn::init_near_zero(p.params_, rng);
  return p;
}

void LorenzProposal::fill_features(std::size_t step, const Matrix& x, const Matrix& theta, Eigen::Ref<Matrix> out) const {
  const auto P = idx(spec_.param_dim());
  const auto [k, gap] = spec_.next_observation(step);
  const double gap_scale = static_cast<double>(std::max<std::size_t>(1, spec_.obs_steps.front()));
  const State3 next_obs = obs_.col(idx(k));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const State3 xj = x.col(j);
    const State3 a = lorenz_drift(xj, theta.col(j));
    out.col(j).head(P) = theta.col(j) / kThetaScale;
    out(P, j) = static_cast<double>(step) / static_cast<double>(spec_.steps);
    out.col(j).segment(P + 1, 3) = xj / kStateScale;
    out.col(j).segment(P + 4, 3) = a / kDriftScale;
    out(P + 7, j) = static_cast<double>(gap) / gap_scale;
    out.col(j).segment(P + 8, 3) = next_obs / kStateScale;
  }
}

Vector LorenzProposal::features(std::size_t step, const State3& x, const Eigen::Ref<const Vector>& theta) const {
  Matrix out(idx(lorenz_feature_dim(spec_)), 1);
  Matrix xm = x;
  Matrix tm = theta;
  fill_features(step, xm, tm, out);
  return out.col(0);
}

std::pair<State3, double> LorenzProposal::step_outputs(std::size_t step, const State3& x,
                                                       const Eigen::Ref<const Vector>& theta) const {
  const Vector out = step_net_.forward(params_.span(), features(step, x, theta));
  return {out.head(3), gamma_transform(out[3])};
}

ProposalDraw LorenzProposal::transform(const Batch& theta_base, const Batch& step_noise) const {
  const auto P = idx(spec_.param_dim());
  const auto m = spec_.steps;
  require(theta_base.rows() == P && step_noise.rows() == idx(3 * m) && theta_base.cols() == step_noise.cols(),
          "base draws have the wrong shape");
  const auto n = static_cast<std::size_t>(theta_base.cols());
  ProposalDraw draw{Batch(idx(dim()), idx(n)), Vector(idx(n))};
  const double dt = spec_.dt;
  parallel_chunks(
      n, threads_,
      [&](std::size_t, std::size_t b, std::size_t e) {
        const auto cols = idx(e - b);
        const auto start = idx(b);
        const Matrix z = theta_base.middleCols(start, cols);
        auto fwd = theta_flow_.forward(params_.span(), z);
        Vector lq = flow::standard_normal_log_density(z) - fwd.log_det - fwd.outputs.colwise().sum().transpose();
        const Matrix theta = fwd.outputs.array().exp().matrix();
        draw.xis.middleCols(start, cols).topRows(P) = theta;

        std::vector<char> frozen(static_cast<std::size_t>(cols), 0);
        for (Eigen::Index j = 0; j < cols; ++j) frozen[static_cast<std::size_t>(j)] = !theta.col(j).allFinite();
        Matrix x(3, cols);
        x.colwise() = spec_.x0;
        Matrix feats(idx(lorenz_feature_dim(spec_)), cols);
        for (std::size_t i = 0; i < m; ++i) {
          Matrix safe_theta = theta;
          for (Eigen::Index j = 0; j < cols; ++j) {
            if (frozen[static_cast<std::size_t>(j)]) safe_theta.col(j).setOnes();
          }
          fill_features(i, x, safe_theta, feats);
          const Matrix out = step_net_.forward(params_.span(), feats);
          for (Eigen::Index j = 0; j < cols; ++j) {
            auto& fz = frozen[static_cast<std::size_t>(j)];
            if (fz) continue;
            const State3 xj = x.col(j);
            const double gamma = gamma_transform(out(3, j));
            const State3 eps = step_noise.block(idx(3 * i), start + j, 3, 1);
            State3 next = xj + (lorenz_drift(xj, theta.col(j)) + out.col(j).head(3)) * dt + std::sqrt(gamma * dt) * eps;
            lq[j] += -1.5 * (kLog2Pi + std::log(gamma * dt)) - 0.5 * eps.squaredNorm();
            if (!next.allFinite()) {
              next.setConstant(10.0 * spec_.guard);
              fz = true;
            } else if (next.cwiseAbs().maxCoeff() > spec_.guard) {
              fz = true;
            }
            x.col(j) = next;
          }
          draw.xis.block(P + idx(3 * i), start, 3, cols) = x;
        }
        draw.log_q.segment(start, cols) = lq;
      },
      kLorenzChunk);
  return draw;
}

ProposalDraw LorenzProposal::sample(Rng& rng, std::size_t n) const {
  require(n >= 1, "sample count must be >= 1");
  const Batch z = standard_normal_matrix(rng, idx(spec_.param_dim()), idx(n));
  const Batch noise = standard_normal_matrix(rng, idx(3 * spec_.steps), idx(n));
  return transform(z, noise);
}

Vector LorenzProposal::chunk_log_prob(const Batch& xis, const Vector* coeffs, GradSpan grad) const {
  const auto P = idx(spec_.param_dim());
  const auto m = spec_.steps;
  const auto n = xis.cols();
  const double dt = spec_.dt;
  const Matrix theta = xis.topRows(P);
  Vector lp(n);
  if ((theta.array() <= 0.0).any()) {
    require(coeffs == nullptr, "gradient requested at a point outside the proposal support");
    for (Eigen::Index j = 0; j < n; ++j) {
      lp[j] = (theta.col(j).array() > 0.0).all() ? 0.0 : kNegInf;
    }
    // Recurse on the valid columns only.
    std::vector<Eigen::Index> valid;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (lp[j] == 0.0) valid.push_back(j);
    }
    if (!valid.empty()) {
      Batch sub(xis.rows(), idx(valid.size()));
      for (std::size_t k = 0; k < valid.size(); ++k) sub.col(idx(k)) = xis.col(valid[k]);
      const Vector sub_lp = chunk_log_prob(sub, nullptr, grad);
      for (std::size_t k = 0; k < valid.size(); ++k) lp[valid[k]] = sub_lp[idx(k)];
    }
    return lp;
  }
  const Matrix eta = theta.array().log().matrix();
  if (coeffs != nullptr) {
    lp = theta_flow_.accumulate_grad(params_.span(), eta, *coeffs, grad);
  } else {
    lp = theta_flow_.log_prob(params_.span(), eta);
  }
  lp -= eta.colwise().sum().transpose();

  // All (step, sample) pairs at once; column i * n + j.
  const auto F = idx(lorenz_feature_dim(spec_));
  Matrix feats(F, idx(m) * n);
  Matrix x_cur(3, n);
  x_cur.colwise() = spec_.x0;
  Matrix resid(3, idx(m) * n);
  std::vector<Matrix> states;
  for (std::size_t i = 0; i < m; ++i) {
    fill_features(i, x_cur, theta, feats.middleCols(idx(i) * n, n));
    const Matrix x_next = xis.middleRows(P + idx(3 * i), 3);
    for (Eigen::Index j = 0; j < n; ++j) {
      const State3 xj = x_cur.col(j);
      resid.col(idx(i) * n + j) = x_next.col(j) - xj - lorenz_drift(xj, theta.col(j)) * dt;
    }
    x_cur = x_next;
  }
  nn::MlpCache cache;
  const Matrix out = coeffs != nullptr ? step_net_.forward(params_.span(), feats, cache)
                                       : step_net_.forward(params_.span(), feats);
  Matrix out_grad;
  if (coeffs != nullptr) out_grad.resize(4, out.cols());
  for (std::size_t i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index c = idx(i) * n + j;
      const double gamma = gamma_transform(out(3, c));
      const State3 r = resid.col(c) - out.col(c).head(3) * dt;
      const double rr = r.squaredNorm();
      lp[j] += -1.5 * (kLog2Pi + std::log(gamma * dt)) - rr / (2.0 * gamma * dt);
      if (coeffs != nullptr) {
        const double w = (*coeffs)[j];
        out_grad.col(c).head(3) = w * r / gamma;
        out_grad(3, c) = w * (-1.5 / gamma + rr / (2.0 * gamma * gamma * dt)) * gamma_derivative(out(3, c));
      }
    }
  }
  if (coeffs != nullptr) step_net_.backward(params_.span(), cache, out_grad, grad);
  return lp;
}

Vector LorenzProposal::log_prob(const Batch& xis) const {
  require(static_cast<std::size_t>(xis.rows()) == dim(), "Lorenz proposal input dimension mismatch");
  Vector out(xis.cols());
  parallel_chunks(
      static_cast<std::size_t>(xis.cols()), threads_,
      [&](std::size_t, std::size_t b, std::size_t e) {
        out.segment(idx(b), idx(e - b)) = chunk_log_prob(xis.middleCols(idx(b), idx(e - b)), nullptr, {});
      },
      kLorenzChunk);
  return out;
}

Vector LorenzProposal::accumulate_grad(const Batch& xis, const Vector& coeffs, GradSpan grad) const {
  require(static_cast<std::size_t>(xis.rows()) == dim(), "Lorenz proposal input dimension mismatch");
  require(coeffs.size() == xis.cols(), "one coefficient per sample required");
  require(grad.size() == params_.size(), "gradient buffer size mismatch");
  const auto n = static_cast<std::size_t>(xis.cols());
  std::vector<Vector> partial(chunk_count(n, kLorenzChunk), Vector::Zero(idx(params_.size())));
  Vector out(xis.cols());
  parallel_chunks(
      n, threads_,
      [&](std::size_t c, std::size_t b, std::size_t e) {
        const Vector cf = coeffs.segment(idx(b), idx(e - b));
        out.segment(idx(b), idx(e - b)) =
            chunk_log_prob(xis.middleCols(idx(b), idx(e - b)), &cf, {partial[c].data(), params_.size()});
      },
      kLorenzChunk);
  Eigen::Map<Vector> g(grad.data(), idx(grad.size()));
  for (const auto& p : partial) g += p;
  return out;
}

nlohmann::json LorenzProposal::architecture() const {
  auto flow_json = flow::to_json(arch_.theta_flow);
  nlohmann::json perms = nlohmann::json::array();
  for (const auto& p : theta_flow_.permutations()) perms.push_back(p.indices());
  flow_json["permutations"] = perms;
  return {{"type", "lorenz_proposal"},
          {"theta_flow", flow_json},
          {"step_hidden", arch_.step_hidden},
          {"activation", nn::to_string(arch_.activation)},
          {"feature_dim", lorenz_feature_dim(spec_)}};
}

}  // namespace dis::models
