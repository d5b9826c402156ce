#pragma once

#include <cstdint>
#include <random>

#include "clwf/tensor.hpp"

namespace clwf {

using Rng = std::mt19937_64;

/// Independent stream derived from a base seed and a stream index.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), 0x434c5746u};
  return Rng(seq);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data()) v = stddev * dist(rng);
  return t;
}

}  // namespace clwf
