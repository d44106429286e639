#include "partreid/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace partreid {

namespace io {

namespace {

template <typename U>
U to_little(U bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((bits >> (8 * i)) & 0xFF);
    return out;
  }
}

template <Real T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace

template <Real T>
void write_le(std::ostream& os, std::span<const T> values) {
  std::vector<Bits<T>> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) buf[i] = to_little(std::bit_cast<Bits<T>>(values[i]));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
}

template <Real T>
void read_le(std::istream& is, std::span<T> values) {
  std::vector<Bits<T>> buf(values.size());
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (!is) throw std::runtime_error("binary payload truncated");
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<T>(to_little(buf[i]));
}

template void write_le<float>(std::ostream&, std::span<const float>);
template void write_le<double>(std::ostream&, std::span<const double>);
template void read_le<float>(std::istream&, std::span<float>);
template void read_le<double>(std::istream&, std::span<double>);

}  // namespace io

template <Real T>
const Tensor<T>& Checkpoint<T>::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
}

template <Real T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = "partreid-checkpoint";
  header["version"] = 1;
  header["precision"] = std::string(precision_name<T>());
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  header["meta"] = meta;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os << header.dump() << '\n';
  for (const auto& t : tensors) io::write_le<T>(os, t.tensor.data());
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

template <Real T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint has no header: " + path.string());
  const auto header = nlohmann::json::parse(line);
  if (header.value("format", "") != "partreid-checkpoint") {
    throw std::runtime_error("not a partreid checkpoint: " + path.string());
  }
  Checkpoint<T> ck;
  ck.precision = header.at("precision").get<std::string>();
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor<T> t(shape);
    if (ck.precision == "f32") {
      std::vector<float> raw(t.size());
      io::read_le<float>(is, raw);
      std::copy(raw.begin(), raw.end(), t.data().begin());
    } else if (ck.precision == "f64") {
      std::vector<double> raw(t.size());
      io::read_le<double>(is, raw);
      std::copy(raw.begin(), raw.end(), t.data().begin());
    } else {
      throw std::runtime_error("unknown checkpoint precision '" + ck.precision + "'");
    }
    ck.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  return ck;
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;
template void save_checkpoint<float>(const std::filesystem::path&, const std::vector<NamedTensor<float>>&,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const std::vector<NamedTensor<double>>&,
                                      const nlohmann::json&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace partreid
