#include "partreid/dataset.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace partreid::data {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kQuery:
      return "query";
    case Split::kGallery:
      return "gallery";
  }
  return "train";
}

Split split_from(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "query") return Split::kQuery;
  if (s == "gallery") return Split::kGallery;
  throw std::invalid_argument("unknown split '" + s + "'");
}

void write_manifest(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << kManifestHeader << '\n';
  for (const auto& s : samples) {
    os << s.path << ',' << s.identity << ',' << s.camera << ',' << split_name(s.split) << ',' << (s.junk ? 1 : 0)
       << '\n';
  }
}

std::vector<Sample> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader) {
    throw std::runtime_error("manifest " + path.string() + ": expected header '" + kManifestHeader + "'");
  }
  std::vector<Sample> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) {
      throw std::runtime_error("manifest " + path.string() + ":" + std::to_string(line_no) + ": expected 5 columns");
    }
    try {
      out.push_back({cells[0], std::stoi(cells[1]), std::stoi(cells[2]), split_from(cells[3]), std::stoi(cells[4]) != 0});
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest " + path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::filesystem::path label_path_for(const std::filesystem::path& image_path) {
  std::filesystem::path p = image_path;
  p.replace_extension(".pgm");
  return p;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) out.push_back(i);
  }
  return out;
}

Dataset Dataset::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset not found: " + path.string());
  Dataset d;
  std::filesystem::path manifest = path;
  if (std::filesystem::is_directory(path)) manifest = path / "manifest.csv";
  d.root = manifest.parent_path();
  d.samples = read_manifest(manifest);
  d.images.reserve(d.samples.size());
  d.labels.reserve(d.samples.size());
  for (const auto& s : d.samples) {
    const auto image_path = d.root / s.path;
    d.images.push_back(io::read_ppm(image_path));
    d.labels.push_back(parts::load_raw_map(label_path_for(image_path)));
    const auto& img = d.images.back();
    const auto& lab = d.labels.back();
    if (img.width != lab.width || img.height != lab.height) {
      throw std::runtime_error("label map for " + s.path + " does not match the image size");
    }
    if (img.width != d.images.front().width || img.height != d.images.front().height) {
      throw std::runtime_error("image " + s.path + " differs in size from the first image");
    }
  }
  return d;
}

}  // namespace partreid::data
