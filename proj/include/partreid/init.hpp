#ifndef PARTREID_INIT_HPP_
#define PARTREID_INIT_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "partreid/tensor.hpp"

namespace partreid {

// Stable 64-bit FNV-1a; seeds per-parameter RNG streams so that a weight's
// initial value depends only on (seed, name).
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t key) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  return std::mt19937_64(seq);
}

// He-normal: N(0, 2 / fan_in).
template <Real T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, std::uint64_t seed, std::string_view name) {
  Tensor<T> t(std::move(shape));
  auto rng = stream_rng(seed, fnv1a(name));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace partreid

#endif  // PARTREID_INIT_HPP_
