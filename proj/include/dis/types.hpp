#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>

namespace dis {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

using ParamSpan = std::span<const double>;
using GradSpan = std::span<double>;

/// Column-major batch: one sample per column.
using Batch = Matrix;

inline Matrix standard_normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      out(i, j) = normal(rng);
    }
  }
  return out;
}

/// Independent child stream, stable for a given (seed, stream) pair.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace dis
