#include "dis/errors.hpp"
#include "dis/nn.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace dis;
using namespace dis::nn;

namespace {

// Straight-line forward pass reading the layout by name.
std::vector<double> reference_forward(const ParamVector& p, const std::string& name, const std::vector<std::size_t>& sizes,
                                      Activation hidden, Activation output, std::vector<double> u) {
  auto act = [](Activation a, double x) {
    switch (a) {
      case Activation::Elu: return x > 0 ? x : std::exp(x) - 1.0;
      case Activation::Softplus: return std::log1p(std::exp(x));
      default: return x;
    }
  };
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const auto w = p.view(p.slice(name + ".layer" + std::to_string(l) + ".weight"));
    const auto b = p.view(p.slice(name + ".layer" + std::to_string(l) + ".bias"));
    std::vector<double> out(sizes[l + 1]);
    for (std::size_t o = 0; o < sizes[l + 1]; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < sizes[l]; ++i) s += w[i * sizes[l + 1] + o] * u[i];
      out[o] = act(l + 2 == sizes.size() ? output : hidden, s);
    }
    u = std::move(out);
  }
  return u;
}

void randomise(ParamVector& p, Rng& rng, double sd = 0.5) {
  std::normal_distribution<double> n(0.0, sd);
  for (Eigen::Index i = 0; i < p.values().size(); ++i) p.values()[i] = n(rng);
}

}  // namespace

TEST_CASE("zero network maps every input to zero") {
  ParamVector p;
  Mlp net("net", {3, 10, 10, 10, 2}, Activation::Elu, Activation::Identity, p);
  Rng rng(1);
  const Matrix x = standard_normal_matrix(rng, 3, 50) * 5.0;
  CHECK(net.forward(p.span(), x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single identity layer is affine") {
  ParamVector p;
  Mlp net("lin", {3, 3}, Activation::Identity, Activation::Identity, p);
  auto w = p.view(p.slice("lin.layer0.weight"));
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  auto b = p.view(p.slice("lin.layer0.bias"));
  b[0] = 0.5;
  b[1] = -1.0;
  b[2] = 2.0;
  const Vector u{{1.0, 2.0, 3.0}};
  const Vector out = net.forward(p.span(), u);
  CHECK(out[0] == 1.5);
  CHECK(out[1] == 1.0);
  CHECK(out[2] == 5.0);
}

TEST_CASE("forward pass matches an independent implementation") {
  for (auto act : {Activation::Elu, Activation::Softplus}) {
    ParamVector p;
    const std::vector<std::size_t> sizes{4, 7, 5, 3};
    Mlp net("net", sizes, act, Activation::Identity, p);
    Rng rng(42);
    randomise(p, rng);
    const Matrix x = standard_normal_matrix(rng, 4, 20);
    const Matrix y = net.forward(p.span(), x);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const auto ref = reference_forward(p, "net", sizes, act, Activation::Identity,
                                         std::vector<double>(x.col(j).data(), x.col(j).data() + 4));
      for (std::size_t k = 0; k < 3; ++k) CHECK(y(static_cast<Eigen::Index>(k), j) == doctest::Approx(ref[k]).epsilon(1e-13));
    }
  }
}

TEST_CASE("parameter count and layout tiling") {
  ParamVector p;
  Mlp net("a", {3, 10, 10, 10, 4}, Activation::Elu, Activation::Identity, p);
  Mlp net2("b", {2, 5, 1}, Activation::Softplus, Activation::Identity, p);
  CHECK(net.param_count() == 10 * 4 + 10 * 11 + 10 * 11 + 4 * 11);
  CHECK(p.size() == net.param_count() + net2.param_count());
  std::size_t offset = 0;
  for (const auto& s : p.layout()) {
    CHECK(s.offset == offset);
    offset += s.length;
  }
  CHECK(offset == p.size());
  CHECK_THROWS_AS(p.add("a.layer0.weight", 3, true), ContractError);
}

TEST_CASE("pack and unpack are inverse") {
  ParamVector p;
  Mlp net("n", {2, 3, 2}, Activation::Elu, Activation::Identity, p);
  Rng rng(3);
  randomise(p, rng);
  const Vector flat = p.values();
  ParamVector q = p;
  q.values().setZero();
  q.assign(flat);
  CHECK(q.values() == flat);
  q.view(q.slice("n.layer1.bias"))[1] = 123.0;
  CHECK(q.values()[static_cast<Eigen::Index>(q.slice("n.layer1.bias").offset + 1)] == 123.0);
  CHECK_THROWS_AS(q.assign(Vector::Zero(3)), ContractError);
}

TEST_CASE("forward rejects a wrong input dimension") {
  ParamVector p;
  Mlp net("n", {2, 3, 2}, Activation::Elu, Activation::Identity, p);
  CHECK_THROWS_AS(net.forward(p.span(), Matrix(Matrix::Zero(3, 4))), ContractError);
}

TEST_CASE("identity layer backward is linear calculus") {
  ParamVector p;
  Mlp net("lin", {3, 2}, Activation::Identity, Activation::Identity, p);
  Rng rng(5);
  randomise(p, rng);
  const Matrix u = standard_normal_matrix(rng, 3, 1);
  const Matrix g = standard_normal_matrix(rng, 2, 1);
  MlpCache cache;
  net.forward(p.span(), u, cache);
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.size()));
  const Matrix in_grad = net.backward(p.span(), cache, g, {grad.data(), p.size()});
  const Eigen::Map<const Matrix> w(p.view(p.slice("lin.layer0.weight")).data(), 2, 3);
  CHECK((in_grad - w.transpose() * g).cwiseAbs().maxCoeff() < 1e-15);
  const auto ws = p.slice("lin.layer0.weight");
  const Eigen::Map<const Matrix> gw(grad.data() + ws.offset, 2, 3);
  CHECK((gw - g * u.transpose()).cwiseAbs().maxCoeff() < 1e-15);
  const auto bs = p.slice("lin.layer0.bias");
  CHECK((grad.segment(static_cast<Eigen::Index>(bs.offset), 2) - g.col(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("zero output gradient gives zero gradients") {
  ParamVector p;
  Mlp net("n", {3, 6, 6, 2}, Activation::Elu, Activation::Identity, p);
  Rng rng(8);
  randomise(p, rng);
  MlpCache cache;
  const Matrix u = standard_normal_matrix(rng, 3, 5);
  net.forward(p.span(), u, cache);
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.size()));
  const Matrix in_grad = net.backward(p.span(), cache, Matrix::Zero(2, 5), {grad.data(), p.size()});
  CHECK(grad.cwiseAbs().maxCoeff() == 0.0);
  CHECK(in_grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward matches central finite differences on random nets") {
  Rng rng(11);
  std::uniform_int_distribution<int> width(1, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto act = trial % 3 == 0 ? Activation::Softplus : (trial % 3 == 1 ? Activation::Elu : Activation::Identity);
    const std::vector<std::size_t> sizes{static_cast<std::size_t>(width(rng)), static_cast<std::size_t>(width(rng)),
                                         static_cast<std::size_t>(width(rng)), static_cast<std::size_t>(width(rng))};
    ParamVector p;
    Mlp net("n", sizes, act, trial % 2 ? Activation::Identity : Activation::Softplus, p);
    randomise(p, rng, 0.7);
    const Matrix u = standard_normal_matrix(rng, static_cast<Eigen::Index>(sizes[0]), 3);
    const Matrix g = standard_normal_matrix(rng, static_cast<Eigen::Index>(sizes.back()), 3);
    MlpCache cache;
    net.forward(p.span(), u, cache);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(p.size()));
    const Matrix in_grad = net.backward(p.span(), cache, g, {grad.data(), p.size()});

    const auto objective = [&](const Vector& theta) {
      return (net.forward({theta.data(), p.size()}, u).array() * g.array()).sum();
    };
    worst = std::max(worst, oracle::max_rel_error(grad, oracle::central_diff(objective, p.values()), 1e-4));

    Vector flat_u = Eigen::Map<const Vector>(u.data(), u.size());
    const auto input_objective = [&](const Vector& x) {
      const Matrix xm = Eigen::Map<const Matrix>(x.data(), u.rows(), u.cols());
      return (net.forward(p.span(), xm).array() * g.array()).sum();
    };
    const Vector ig = Eigen::Map<const Vector>(in_grad.data(), in_grad.size());
    worst = std::max(worst, oracle::max_rel_error(ig, oracle::central_diff(input_objective, flat_u), 1e-4));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("near-zero initialisation") {
  ParamVector p;
  Mlp net("n", {50, 100, 100, 50}, Activation::Elu, Activation::Identity, p);
  Rng rng(13);
  init_near_zero(p, rng);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : p.layout()) {
    for (double v : p.view(s)) {
      if (s.is_weight) {
        CHECK(std::abs(v) <= 0.002);
        sum += v;
        ++count;
      } else {
        CHECK(v == 0.0);
      }
    }
  }
  REQUIRE(count == 20000);
  CHECK(std::abs(sum / static_cast<double>(count)) < 1e-4);
}

TEST_CASE("L1 penalty gradient") {
  ParamVector p;
  p.add("w", 3, true);
  p.add("b", 2, false);
  p.values() << 2.0, -3.0, 0.0, 5.0, -5.0;
  const Vector g = l1_penalty_grad(p, 0.1);
  CHECK(g[0] == doctest::Approx(0.1));
  CHECK(g[1] == doctest::Approx(-0.1));
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
  CHECK(g[4] == 0.0);
  CHECK(l1_penalty_grad(p, 0.0).cwiseAbs().maxCoeff() == 0.0);

  const double before = l1_penalty(p, 0.1);
  p.values() -= 0.5 * l1_penalty_grad(p, 0.1);
  CHECK(l1_penalty(p, 0.1) < before);
}

TEST_CASE("activations preserve zero") {
  Matrix z = Matrix::Zero(2, 2);
  apply_activation(Activation::Elu, z);
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  apply_activation(Activation::Identity, z);
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  CHECK(to_string(activation_from_string("softplus")) == "softplus");
  CHECK_THROWS_AS(activation_from_string("relu6"), ContractError);
}
