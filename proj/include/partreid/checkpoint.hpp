#ifndef PARTREID_CHECKPOINT_HPP_
#define PARTREID_CHECKPOINT_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "partreid/tensor.hpp"

namespace partreid {

// On-disk layout: one line of compact JSON
//   {"format":"partreid-checkpoint","version":1,"precision":"f32"|"f64",
//    "tensors":[{"name":..., "shape":[...]}, ...], "meta":{...}}
// terminated by '\n', followed by each tensor's scalars as raw
// little-endian IEEE-754 values, in header order.
template <Real T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <Real T>
struct Checkpoint {
  std::string precision;
  std::vector<NamedTensor<T>> tensors;
  nlohmann::json meta;

  const Tensor<T>& at(const std::string& name) const;
};

template <Real T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors,
                     const nlohmann::json& meta = nlohmann::json::object());

// Reads either precision and converts to T.
template <Real T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

namespace io {

// Little-endian scalar helpers shared by the binary formats.
template <Real T>
void write_le(std::ostream& os, std::span<const T> values);
template <Real T>
void read_le(std::istream& is, std::span<T> values);

}  // namespace io

}  // namespace partreid

#endif  // PARTREID_CHECKPOINT_HPP_
