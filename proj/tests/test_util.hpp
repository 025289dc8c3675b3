#pragma once

#include <random>
#include <vector>

#include "dinf/numerics/tensor.hpp"

namespace dinf::test {

inline Tensord random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensord t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

inline std::vector<double> random_weights(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& x : w) x = dist(rng);
  return w;
}

inline double max_abs_diff(const Tensord& a, const Tensord& b) { return (a.data() - b.data()).cwiseAbs().maxCoeff(); }

}  // namespace dinf::test
