#include "partreid/image_io.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>
#include <string>

namespace partreid::io {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

struct Header {
  std::size_t width, height;
};

Header read_header(std::istream& is, const char* magic, const std::filesystem::path& path) {
  if (token(is) != magic) throw std::runtime_error(path.string() + ": expected " + magic + " netpbm file");
  const std::size_t w = std::stoul(token(is));
  const std::size_t h = std::stoul(token(is));
  const unsigned long maxval = std::stoul(token(is));
  if (maxval != 255) throw std::runtime_error(path.string() + ": only maxval 255 is supported");
  if (w == 0 || h == 0) throw std::runtime_error(path.string() + ": empty image");
  return {w, h};
}

template <typename Image>
Image read_netpbm(const std::filesystem::path& path, const char* magic, std::size_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const Header hd = read_header(is, magic, path);
  Image img;
  img.width = hd.width;
  img.height = hd.height;
  img.pixels.resize(hd.width * hd.height * channels);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error(path.string() + ": truncated pixel data");
  return img;
}

void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<std::uint8_t>& pixels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) { return read_netpbm<GrayImage>(path, "P5", 1); }

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw std::invalid_argument("write_pgm: size mismatch");
  write_netpbm(path, "P5", image.width, image.height, image.pixels);
}

RgbImage read_ppm(const std::filesystem::path& path) { return read_netpbm<RgbImage>(path, "P6", 3); }

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw std::invalid_argument("write_ppm: size mismatch");
  write_netpbm(path, "P6", image.width, image.height, image.pixels);
}

}  // namespace partreid::io
