#include "dis/optim.hpp"

#include "dis/errors.hpp"

#include <cmath>

namespace dis {

nlohmann::json to_json(const AdamSettings& s) {
  return {{"step_size", s.step_size}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"epsilon", s.epsilon}};
}

AdamSettings adam_from_json(const nlohmann::json& j) {
  AdamSettings s;
  s.step_size = j.value("step_size", s.step_size);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.epsilon = j.value("epsilon", s.epsilon);
  require(s.step_size > 0.0, "Adam step size must be positive");
  require(s.beta1 >= 0.0 && s.beta1 < 1.0 && s.beta2 >= 0.0 && s.beta2 < 1.0, "Adam decay rates must be in [0, 1)");
  require(s.epsilon > 0.0, "Adam epsilon must be positive");
  return s;
}

Adam::Adam(std::size_t size, AdamSettings settings)
    : settings_(settings),
      m_(Vector::Zero(static_cast<Eigen::Index>(size))),
      v_(Vector::Zero(static_cast<Eigen::Index>(size))) {}

void Adam::ascend(Vector& params, const Vector& grad) {
  require(params.size() == m_.size() && grad.size() == m_.size(), "Adam size mismatch");
  ++t_;
  m_ = settings_.beta1 * m_ + (1.0 - settings_.beta1) * grad;
  v_ = settings_.beta2 * v_ + (1.0 - settings_.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
  params.array() += settings_.step_size * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + settings_.epsilon);
}

void Adam::restore(std::size_t steps, Vector m, Vector v) {
  require(m.size() == m_.size() && v.size() == v_.size(), "Adam state size mismatch");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace dis
