#include "dis/flow.hpp"

#include "dis/errors.hpp"
#include "dis/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace dis::flow {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

Eigen::Index rows(std::size_t n) { return static_cast<Eigen::Index>(n); }

void check_finite(const Matrix& m, std::size_t layer, const char* what) {
  if (!m.allFinite()) {
    throw EvaluationError(layer, std::string("non-finite ") + what);
  }
}

}  // namespace

nlohmann::json to_json(const FlowArchitecture& arch) {
  return {{"type", "real_nvp"},
          {"dim", arch.dim},
          {"couplings", arch.couplings},
          {"hidden", arch.hidden},
          {"activation", nn::to_string(arch.activation)},
          {"permutation", arch.permutation == PermutationKind::Reverse ? "reverse" : "random"},
          {"permutation_seed", arch.permutation_seed},
          {"sigma_clamp", arch.sigma_clamp}};
}

FlowArchitecture architecture_from_json(const nlohmann::json& j) {
  FlowArchitecture a;
  a.dim = j.at("dim").get<std::size_t>();
  a.couplings = j.at("couplings").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.activation = nn::activation_from_string(j.value("activation", std::string("elu")));
  const auto kind = j.value("permutation", std::string("reverse"));
  require(kind == "reverse" || kind == "random", "permutation must be 'reverse' or 'random'");
  a.permutation = kind == "reverse" ? PermutationKind::Reverse : PermutationKind::Random;
  a.permutation_seed = j.value("permutation_seed", std::uint64_t{0});
  a.sigma_clamp = j.value("sigma_clamp", 10.0);
  return a;
}

Permutation::Permutation(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
  std::vector<bool> seen(perm_.size(), false);
  for (auto p : perm_) {
    require(p < perm_.size() && !seen[p], "permutation is not a bijection");
    seen[p] = true;
  }
}

Permutation Permutation::reverse(std::size_t dim) {
  std::vector<std::size_t> p(dim);
  for (std::size_t i = 0; i < dim; ++i) p[i] = dim - 1 - i;
  return Permutation(std::move(p));
}

Permutation Permutation::random(std::size_t dim, Rng& rng) {
  std::vector<std::size_t> p(dim);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Fisher-Yates with an explicit draw so the result is library-independent.
  for (std::size_t i = dim; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return Permutation(std::move(p));
}

Matrix Permutation::apply(const Matrix& in) const {
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < perm_.size(); ++i) out.row(rows(i)) = in.row(rows(perm_[i]));
  return out;
}

Matrix Permutation::apply_inverse(const Matrix& in) const {
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < perm_.size(); ++i) out.row(rows(perm_[i])) = in.row(rows(i));
  return out;
}

RealNvp::RealNvp(const FlowArchitecture& arch, nn::ParamVector& params, const std::string& prefix) : arch_(arch) {
  require(arch.dim >= 2, "real NVP needs dimension >= 2");
  require(arch.couplings >= 1, "real NVP needs at least one coupling layer");
  require(arch.sigma_clamp > 0.0, "sigma clamp must be positive");
  const std::size_t d = arch.dim / 2;
  Rng perm_rng = derive_rng(arch.permutation_seed, 0x7065726dULL);
  for (std::size_t k = 0; k < arch.couplings; ++k) {
    std::vector<std::size_t> sizes{d};
    sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
    sizes.push_back(2 * (arch.dim - d));
    couplings_.push_back({arch.dim, d,
                          nn::Mlp(prefix + ".coupling" + std::to_string(k), sizes, arch.activation,
                                  nn::Activation::Identity, params)});
    if (k + 1 < arch.couplings) {
      perms_.push_back(arch.permutation == PermutationKind::Reverse ? Permutation::reverse(arch.dim)
                                                                    : Permutation::random(arch.dim, perm_rng));
    }
  }
}

double RealNvp::clamp(double s) const { return arch_.sigma_clamp * std::tanh(s / arch_.sigma_clamp); }

std::pair<Matrix, Matrix> RealNvp::shift_and_scale(ParamSpan params, std::size_t layer, const Matrix& conditioner) const {
  const auto& c = couplings_.at(layer);
  const auto rest = rows(c.dim - c.split);
  Matrix out = c.net.forward(params, conditioner);
  Matrix scale = out.bottomRows(rest).unaryExpr([this](double s) { return std::exp(clamp(s)); });
  return {out.topRows(rest), scale};
}

ForwardResult RealNvp::forward(ParamSpan params, const Batch& z) const {
  require(static_cast<std::size_t>(z.rows()) == arch_.dim, "flow input dimension mismatch");
  Matrix u = z;
  Vector log_det = Vector::Zero(z.cols());
  for (std::size_t k = 0; k < couplings_.size(); ++k) {
    const auto& c = couplings_[k];
    const auto d = rows(c.split);
    const auto rest = rows(c.dim - c.split);
    Matrix out = c.net.forward(params, Matrix(u.topRows(d)));
    Matrix s = out.bottomRows(rest).unaryExpr([this](double v) { return clamp(v); });
    u.bottomRows(rest) = out.topRows(rest).array() + s.array().exp() * u.bottomRows(rest).array();
    log_det += s.colwise().sum().transpose();
    check_finite(u, k, "forward coupling output");
    if (k < perms_.size()) u = perms_[k].apply(u);
  }
  return {std::move(u), std::move(log_det)};
}

ForwardResult RealNvp::inverse(ParamSpan params, const Batch& xi) const {
  require(static_cast<std::size_t>(xi.rows()) == arch_.dim, "flow input dimension mismatch");
  Matrix v = xi;
  Vector log_det = Vector::Zero(xi.cols());
  for (std::size_t k = couplings_.size(); k-- > 0;) {
    if (k < perms_.size()) v = perms_[k].apply_inverse(v);
    const auto& c = couplings_[k];
    const auto d = rows(c.split);
    const auto rest = rows(c.dim - c.split);
    Matrix out = c.net.forward(params, Matrix(v.topRows(d)));
    Matrix s = out.bottomRows(rest).unaryExpr([this](double x) { return clamp(x); });
    v.bottomRows(rest) = (v.bottomRows(rest) - out.topRows(rest)).array() * (-s.array()).exp();
    log_det -= s.colwise().sum().transpose();
    check_finite(v, k, "inverse coupling output");
  }
  return {std::move(v), std::move(log_det)};
}

double standard_normal_log_density(const Eigen::Ref<const Vector>& z) {
  return -0.5 * (static_cast<double>(z.size()) * kLogTwoPi + z.squaredNorm());
}

Vector standard_normal_log_density(const Batch& z) {
  return (-0.5 * (static_cast<double>(z.rows()) * kLogTwoPi + z.colwise().squaredNorm().array())).matrix().transpose();
}

Vector RealNvp::log_prob(ParamSpan params, const Batch& xi) const {
  auto inv = inverse(params, xi);
  return standard_normal_log_density(inv.outputs) + inv.log_det;
}

Vector RealNvp::accumulate_grad(ParamSpan params, const Batch& xi, const Vector& coeffs, GradSpan grad,
                                Matrix* input_grad) const {
  require(static_cast<std::size_t>(xi.rows()) == arch_.dim, "flow input dimension mismatch");
  require(coeffs.size() == xi.cols(), "one coefficient per sample required");
  const std::size_t K = couplings_.size();

  struct Saved {
    nn::MlpCache cache;
    Matrix s_raw;
    Matrix s;
    Matrix u_rest;  // (v_b - μ) ⊙ exp(-σ)
  };
  std::vector<Saved> saved(K);

  Matrix v = xi;
  Vector log_det = Vector::Zero(xi.cols());
  for (std::size_t k = K; k-- > 0;) {
    if (k < perms_.size()) v = perms_[k].apply_inverse(v);
    const auto& c = couplings_[k];
    const auto d = rows(c.split);
    const auto rest = rows(c.dim - c.split);
    auto& sv = saved[k];
    Matrix out = c.net.forward(params, v.topRows(d), sv.cache);
    sv.s_raw = out.bottomRows(rest);
    sv.s = sv.s_raw.unaryExpr([this](double x) { return clamp(x); });
    v.bottomRows(rest) = (v.bottomRows(rest) - out.topRows(rest)).array() * (-sv.s.array()).exp();
    sv.u_rest = v.bottomRows(rest);
    log_det -= sv.s.colwise().sum().transpose();
    check_finite(v, k, "inverse coupling output");
  }
  Vector lp = standard_normal_log_density(v) + log_det;

  // Back-propagate from the base point z toward ξ.
  Matrix g = -v;
  g.array().rowwise() *= coeffs.transpose().array();
  const double cl = arch_.sigma_clamp;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = couplings_[k];
    const auto d = rows(c.split);
    const auto rest = rows(c.dim - c.split);
    const auto& sv = saved[k];
    Matrix exp_neg_s = (-sv.s.array()).exp();
    Matrix g_rest = g.bottomRows(rest);
    Matrix net_grad(2 * rest, g.cols());
    net_grad.topRows(rest) = -(g_rest.array() * exp_neg_s.array());
    Matrix g_s = -(g_rest.array() * sv.u_rest.array());
    g_s.array().rowwise() -= coeffs.transpose().array();
    net_grad.bottomRows(rest) =
        g_s.array() * sv.s_raw.unaryExpr([cl](double x) { const double t = std::tanh(x / cl); return 1.0 - t * t; })
                          .array();
    Matrix g_cond = c.net.backward(params, sv.cache, net_grad, grad);
    g.bottomRows(rest) = g_rest.array() * exp_neg_s.array();
    g.topRows(d) += g_cond;
    if (k < perms_.size()) g = perms_[k].apply(g);
  }
  if (input_grad != nullptr) *input_grad = std::move(g);
  return lp;
}

FlowProposal::FlowProposal(const FlowArchitecture& arch) : flow_(arch, params_) {}

FlowProposal FlowProposal::init_identity(const FlowArchitecture& arch, Rng& rng) {
  FlowProposal p(arch);
  nn::init_near_zero(p.params_, rng);
  return p;
}

ProposalDraw FlowProposal::transform(const Batch& z) const {
  const auto n = static_cast<std::size_t>(z.cols());
  ProposalDraw draw{Batch(z.rows(), z.cols()), Vector(z.cols())};
  parallel_chunks(n, threads_, [&](std::size_t, std::size_t b, std::size_t e) {
    const auto cols = static_cast<Eigen::Index>(e - b);
    const auto start = static_cast<Eigen::Index>(b);
    Matrix zc = z.middleCols(start, cols);
    auto fwd = flow_.forward(params_.span(), zc);
    draw.xis.middleCols(start, cols) = fwd.outputs;
    draw.log_q.segment(start, cols) = standard_normal_log_density(zc) - fwd.log_det;
  });
  return draw;
}

ProposalDraw FlowProposal::sample(Rng& rng, std::size_t n) const {
  require(n >= 1, "sample count must be >= 1");
  return transform(standard_normal_matrix(rng, rows(dim()), static_cast<Eigen::Index>(n)));
}

Vector FlowProposal::log_prob(const Batch& xis) const {
  Vector out(xis.cols());
  parallel_chunks(static_cast<std::size_t>(xis.cols()), threads_, [&](std::size_t, std::size_t b, std::size_t e) {
    const auto cols = static_cast<Eigen::Index>(e - b);
    const auto start = static_cast<Eigen::Index>(b);
    out.segment(start, cols) = flow_.log_prob(params_.span(), xis.middleCols(start, cols));
  });
  return out;
}

Vector FlowProposal::accumulate_grad(const Batch& xis, const Vector& coeffs, GradSpan grad) const {
  require(grad.size() == params_.size(), "gradient buffer size mismatch");
  const auto n = static_cast<std::size_t>(xis.cols());
  const auto chunks = chunk_count(n);
  std::vector<Vector> partial(chunks, Vector::Zero(static_cast<Eigen::Index>(params_.size())));
  Vector out(xis.cols());
  parallel_chunks(n, threads_, [&](std::size_t c, std::size_t b, std::size_t e) {
    const auto cols = static_cast<Eigen::Index>(e - b);
    const auto start = static_cast<Eigen::Index>(b);
    out.segment(start, cols) = flow_.accumulate_grad(params_.span(), xis.middleCols(start, cols),
                                                     coeffs.segment(start, cols),
                                                     {partial[c].data(), params_.size()});
  });
  Eigen::Map<Vector> g(grad.data(), static_cast<Eigen::Index>(grad.size()));
  for (const auto& p : partial) g += p;
  return out;
}

nlohmann::json FlowProposal::architecture() const {
  auto j = to_json(flow_.architecture());
  nlohmann::json perms = nlohmann::json::array();
  for (const auto& p : flow_.permutations()) perms.push_back(p.indices());
  j["permutations"] = perms;
  return j;
}

}  // namespace dis::flow
