#ifndef PARTREID_SYNTH_HPP_
#define PARTREID_SYNTH_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "partreid/dataset.hpp"
#include "partreid/image_io.hpp"
#include "partreid/parts.hpp"

namespace partreid::synth {

struct SyntheticDatasetSpec {
  std::size_t num_identities = 64;
  std::size_t images_per_identity = 8;
  std::size_t cameras = 4;
  std::size_t height = 96;
  std::size_t width = 32;
  // Identities [0, num_identities - test_identities) are train, the rest are
  // split into query (last camera) and gallery (other cameras).
  std::size_t test_identities = 32;
  // Number of clothing colours; small palettes force identities to share outfits.
  std::size_t palette_size = 6;
  // Identities 2m and 2m+1 wear the same outfit and differ by accessory.
  bool paired_outfits = false;
  // Per-identity bag-like blob beside the body, labelled background.
  double accessory_probability = 1.0;
  // Standard deviation of additive pixel noise on the 0..1 scale.
  double noise = 0.08;
  // Scales random body shift/stretch; 0 pins the layout.
  double pose_jitter = 1.0;
  // Expected number of background distractor blobs per image.
  double clutter = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticDatasetSpec from_json(const nlohmann::json& j);
};

struct RenderedSample {
  io::RgbImage image;
  parts::RawParsingMap labels;
};

// Multiplicative per-channel colour cast of a camera.
std::array<double, 3> camera_tint(const SyntheticDatasetSpec& spec, std::size_t camera);

// Deterministic in (spec, identity, index); index selects camera index % cameras.
RenderedSample render(const SyntheticDatasetSpec& spec, std::size_t identity, std::size_t index);

// Renders the whole dataset in memory with the same split rules as synth_generate.
data::Dataset render_dataset(const SyntheticDatasetSpec& spec);

// Writes images/<id>_c<cam>_<n>.ppm, matching .pgm label maps, manifest.csv
// and spec.json under out_dir.
std::vector<data::Sample> synth_generate(const SyntheticDatasetSpec& spec, const std::filesystem::path& out_dir);

}  // namespace partreid::synth

#endif  // PARTREID_SYNTH_HPP_
