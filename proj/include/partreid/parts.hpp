#ifndef PARTREID_PARTS_HPP_
#define PARTREID_PARTS_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "partreid/tensor.hpp"

namespace partreid::parts {

// Raw human-parsing categories (LIP label set), as stored in label PGMs.
enum RawLabel : std::uint8_t {
  kBackground = 0,
  kHat,
  kHair,
  kGlove,
  kSunglasses,
  kUpperClothes,
  kDress,
  kCoat,
  kSocks,
  kPants,
  kJumpsuits,
  kScarf,
  kSkirt,
  kFace,
  kRightArm,
  kLeftArm,
  kRightLeg,
  kLeftLeg,
  kRightShoe,
  kLeftShoe,
};
inline constexpr std::size_t kRawLabelCount = 20;

struct RawParsingMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> labels;
};

// Total map from the 20 raw categories onto K part groups.
struct GroupingScheme {
  std::size_t k = 1;
  std::array<std::uint8_t, kRawLabelCount> table{};

  // Throws unless indices are < K, every group is used, and for K >= 2
  // group 0 is exactly the background category.
  void validate() const;

  static GroupingScheme whole_image();        // K=1
  static GroupingScheme foreground();         // K=2: background / person
  static GroupingScheme five_part();          // K=5: background, head, upper torso, lower torso, shoe
  static GroupingScheme identity();           // K=20
  static GroupingScheme for_k(std::size_t k);  // one of the above

  static GroupingScheme from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static GroupingScheme load(const std::filesystem::path& path);
};

struct PartLabelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t k = 1;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

// K maps of N L1-normalized weights, row-major [K,N].
template <Real T>
struct ConfidenceMaps {
  std::size_t k = 0;
  std::size_t n = 0;
  std::vector<T> weights;
  std::vector<std::size_t> counts;

  T at(std::size_t part, std::size_t pixel) const { return weights[part * n + pixel]; }
};

// Rejects labels >= 20, naming the offending pixel.
RawParsingMap make_raw_map(std::size_t width, std::size_t height, std::vector<std::uint8_t> labels);
RawParsingMap load_raw_map(const std::filesystem::path& path);

PartLabelMap group_labels(const RawParsingMap& raw, const GroupingScheme& scheme);

// Nearest neighbour with source index floor((i + 0.5) * in / out).
PartLabelMap resize_nearest(const PartLabelMap& map, std::size_t out_h, std::size_t out_w);

// Horizontal mirror.
PartLabelMap flip_horizontal(const PartLabelMap& map);

template <Real T>
ConfidenceMaps<T> build_confidence_maps(const PartLabelMap& map);

// Mask over pixels: 1 where the pixel is background (non-human), or the
// complement when `human` is set. Requires K >= 2.
std::vector<std::uint8_t> binary_human_mask(const PartLabelMap& map, bool human = false);

}  // namespace partreid::parts

#endif  // PARTREID_PARTS_HPP_
