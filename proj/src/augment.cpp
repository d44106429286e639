#include "partreid/augment.hpp"

#include <algorithm>
#include <cmath>

namespace partreid::augment {

AugmentFlags AugmentFlags::none() {
  AugmentFlags f;
  f.flip = false;
  f.erase = false;
  return f;
}

nlohmann::json AugmentFlags::to_json() const {
  return {{"flip", flip},
          {"flip_probability", flip_probability},
          {"erase", erase},
          {"erase_probability", erase_probability},
          {"area_min", area_min},
          {"area_max", area_max},
          {"aspect_min", aspect_min},
          {"aspect_max", aspect_max},
          {"fill_mean", fill_mean},
          {"max_attempts", max_attempts}};
}

AugmentFlags AugmentFlags::from_json(const nlohmann::json& j) {
  AugmentFlags f;
  f.flip = j.value("flip", f.flip);
  f.flip_probability = j.value("flip_probability", f.flip_probability);
  f.erase = j.value("erase", f.erase);
  f.erase_probability = j.value("erase_probability", f.erase_probability);
  f.area_min = j.value("area_min", f.area_min);
  f.area_max = j.value("area_max", f.area_max);
  f.aspect_min = j.value("aspect_min", f.aspect_min);
  f.aspect_max = j.value("aspect_max", f.aspect_max);
  f.fill_mean = j.value("fill_mean", f.fill_mean);
  f.max_attempts = j.value("max_attempts", f.max_attempts);
  return f;
}

void flip_image(io::RgbImage& image) {
  for (std::size_t y = 0; y < image.height; ++y) {
    std::uint8_t* row = image.pixels.data() + y * image.width * 3;
    for (std::size_t x = 0; x < image.width / 2; ++x) {
      std::swap_ranges(row + x * 3, row + x * 3 + 3, row + (image.width - 1 - x) * 3);
    }
  }
}

void flip_labels(parts::RawParsingMap& labels) {
  for (std::size_t y = 0; y < labels.height; ++y) {
    auto first = labels.labels.begin() + static_cast<std::ptrdiff_t>(y * labels.width);
    std::reverse(first, first + static_cast<std::ptrdiff_t>(labels.width));
  }
}

void erase_rect(io::RgbImage& image, const Rect& rect, const std::array<double, 3>& fill) {
  if (rect.x + rect.width > image.width || rect.y + rect.height > image.height) {
    throw std::out_of_range("erase_rect: rectangle exceeds the image");
  }
  std::array<std::uint8_t, 3> v{};
  for (int c = 0; c < 3; ++c) v[c] = static_cast<std::uint8_t>(std::clamp(std::round(fill[c]), 0.0, 255.0));
  for (std::size_t y = rect.y; y < rect.y + rect.height; ++y) {
    for (std::size_t x = rect.x; x < rect.x + rect.width; ++x) {
      std::copy(v.begin(), v.end(), image.pixels.begin() + static_cast<std::ptrdiff_t>((y * image.width + x) * 3));
    }
  }
}

std::optional<Rect> sample_erase_rect(std::size_t width, std::size_t height, std::mt19937_64& rng,
                                      const AugmentFlags& flags) {
  std::uniform_real_distribution<double> area_dist(flags.area_min, flags.area_max);
  std::uniform_real_distribution<double> aspect_dist(flags.aspect_min, flags.aspect_max);
  const double total = static_cast<double>(width * height);
  for (int attempt = 0; attempt < flags.max_attempts; ++attempt) {
    const double target = area_dist(rng) * total;
    const double aspect = aspect_dist(rng);
    const auto h = static_cast<std::size_t>(std::round(std::sqrt(target * aspect)));
    const auto w = static_cast<std::size_t>(std::round(std::sqrt(target / aspect)));
    if (h == 0 || w == 0 || h > height || w > width) continue;
    const double ratio = static_cast<double>(w * h) / total;
    if (ratio < flags.area_min || ratio > flags.area_max) continue;
    std::uniform_int_distribution<std::size_t> xs(0, width - w), ys(0, height - h);
    const std::size_t y = ys(rng);
    const std::size_t x = xs(rng);
    return Rect{x, y, w, h};
  }
  return std::nullopt;
}

AugmentResult augment(io::RgbImage& image, parts::RawParsingMap* labels, std::mt19937_64& rng,
                      const AugmentFlags& flags) {
  AugmentResult res;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (flags.flip && u(rng) < flags.flip_probability) {
    flip_image(image);
    if (labels) flip_labels(*labels);
    res.flipped = true;
  }
  if (flags.erase && u(rng) < flags.erase_probability) {
    res.erased = sample_erase_rect(image.width, image.height, rng, flags);
    if (res.erased) erase_rect(image, *res.erased, flags.fill_mean);
  }
  return res;
}

std::array<double, 3> channel_mean(std::span<const io::RgbImage> images) {
  std::array<double, 3> sum{};
  std::size_t count = 0;
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
      for (int c = 0; c < 3; ++c) sum[c] += img.pixels[i * 3 + c];
    }
    count += img.width * img.height;
  }
  if (count == 0) return {0.0, 0.0, 0.0};
  for (double& s : sum) s /= static_cast<double>(count);
  return sum;
}

}  // namespace partreid::augment
