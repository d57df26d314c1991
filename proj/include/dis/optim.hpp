#pragma once

#include "dis/types.hpp"

#include <cstddef>
#include <json.hpp>

namespace dis {

struct AdamSettings {
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

nlohmann::json to_json(const AdamSettings& s);
AdamSettings adam_from_json(const nlohmann::json& j);

/// Adam for gradient *ascent*: params += step * m̂ / (sqrt(v̂) + eps).
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t size, AdamSettings settings);

  void ascend(Vector& params, const Vector& grad);

  std::size_t steps() const noexcept { return t_; }
  const AdamSettings& settings() const noexcept { return settings_; }
  const Vector& first_moment() const noexcept { return m_; }
  const Vector& second_moment() const noexcept { return v_; }
  void restore(std::size_t steps, Vector m, Vector v);

 private:
  AdamSettings settings_;
  Vector m_;
  Vector v_;
  std::size_t t_ = 0;
};

}  // namespace dis
