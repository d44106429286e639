#ifndef PARTREID_TESTS_TEST_UTIL_HPP_
#define PARTREID_TESTS_TEST_UTIL_HPP_

#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "partreid/tensor.hpp"

namespace testutil {

template <partreid::Real T = double>
partreid::Tensor<T> random_tensor(partreid::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  partreid::Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (T& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
bool bitwise_equal(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("partreid_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil

#endif  // PARTREID_TESTS_TEST_UTIL_HPP_
