#ifndef PARTREID_DATASET_HPP_
#define PARTREID_DATASET_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "partreid/image_io.hpp"
#include "partreid/parts.hpp"

namespace partreid::data {

enum class Split : std::uint8_t { kTrain, kQuery, kGallery };

const char* split_name(Split s);
Split split_from(const std::string& s);

// One manifest row. Paths are relative to the manifest's directory; the
// label map sits beside the image with the same stem and a .pgm extension.
struct Sample {
  std::string path;
  int identity = 0;
  int camera = 0;
  Split split = Split::kTrain;
  bool junk = false;
};

inline constexpr const char* kManifestHeader = "path,identity,camera,split,junk_flag";

void write_manifest(const std::filesystem::path& path, const std::vector<Sample>& samples);
std::vector<Sample> read_manifest(const std::filesystem::path& path);
std::filesystem::path label_path_for(const std::filesystem::path& image_path);

// A fully loaded dataset; every image and label map is kept in memory.
struct Dataset {
  std::filesystem::path root;
  std::vector<Sample> samples;
  std::vector<io::RgbImage> images;
  std::vector<parts::RawParsingMap> labels;

  std::size_t size() const { return samples.size(); }
  std::vector<std::size_t> indices(Split split) const;

  // Accepts a dataset directory (containing manifest.csv) or the manifest itself.
  static Dataset load(const std::filesystem::path& path);
};

}  // namespace partreid::data

#endif  // PARTREID_DATASET_HPP_
