#ifndef PARTREID_IMAGE_IO_HPP_
#define PARTREID_IMAGE_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

namespace partreid::io {

// 8-bit single channel, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// 8-bit RGB, interleaved row-major (the P6 byte order).
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

}  // namespace partreid::io

#endif  // PARTREID_IMAGE_IO_HPP_
