#ifndef PARTREID_AUGMENT_HPP_
#define PARTREID_AUGMENT_HPP_

#include <array>
#include <optional>
#include <random>

#include "json.hpp"
#include "partreid/image_io.hpp"
#include "partreid/parts.hpp"

namespace partreid::augment {

struct Rect {
  std::size_t x = 0, y = 0, width = 0, height = 0;
  std::size_t area() const { return width * height; }
  bool contains(std::size_t px, std::size_t py) const {
    return px >= x && px < x + width && py >= y && py < y + height;
  }
};

struct AugmentFlags {
  bool flip = true;
  double flip_probability = 0.5;
  bool erase = true;
  double erase_probability = 0.5;
  double area_min = 0.02;
  double area_max = 0.4;
  double aspect_min = 0.3;
  double aspect_max = 3.33;
  // Per-channel fill value on the 0..255 scale.
  std::array<double, 3> fill_mean{124.0, 116.0, 104.0};
  int max_attempts = 100;

  static AugmentFlags none();
  nlohmann::json to_json() const;
  static AugmentFlags from_json(const nlohmann::json& j);
};

struct AugmentResult {
  bool flipped = false;
  std::optional<Rect> erased;
};

void flip_image(io::RgbImage& image);
void flip_labels(parts::RawParsingMap& labels);
void erase_rect(io::RgbImage& image, const Rect& rect, const std::array<double, 3>& fill);

// Samples a rectangle with area ratio in [area_min, area_max] and aspect
// (height / width) in [aspect_min, aspect_max]; nullopt if none fits within
// max_attempts.
std::optional<Rect> sample_erase_rect(std::size_t width, std::size_t height, std::mt19937_64& rng,
                                      const AugmentFlags& flags);

// Flip applies to image and label map alike; erasing touches only the image.
AugmentResult augment(io::RgbImage& image, parts::RawParsingMap* labels, std::mt19937_64& rng,
                      const AugmentFlags& flags);

// Per-channel mean over a set of images, 0..255 scale.
std::array<double, 3> channel_mean(std::span<const io::RgbImage> images);

}  // namespace partreid::augment

#endif  // PARTREID_AUGMENT_HPP_
