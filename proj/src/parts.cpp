#include "partreid/parts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "partreid/image_io.hpp"

namespace partreid::parts {

void GroupingScheme::validate() const {
  if (k == 0 || k > kRawLabelCount) throw std::invalid_argument("grouping scheme: K must be in [1,20]");
  std::vector<bool> used(k, false);
  for (std::size_t raw = 0; raw < kRawLabelCount; ++raw) {
    if (table[raw] >= k) {
      throw std::invalid_argument("grouping scheme: raw label " + std::to_string(raw) + " maps to group " +
                                  std::to_string(table[raw]) + " >= K=" + std::to_string(k));
    }
    used[table[raw]] = true;
  }
  for (std::size_t g = 0; g < k; ++g) {
    if (!used[g]) throw std::invalid_argument("grouping scheme: group " + std::to_string(g) + " is never used");
  }
  if (k >= 2) {
    if (table[kBackground] != 0) throw std::invalid_argument("grouping scheme: background must map to group 0");
    for (std::size_t raw = 1; raw < kRawLabelCount; ++raw) {
      if (table[raw] == 0) {
        throw std::invalid_argument("grouping scheme: human label " + std::to_string(raw) + " maps to background group");
      }
    }
  }
}

GroupingScheme GroupingScheme::whole_image() {
  GroupingScheme s;
  s.k = 1;
  s.table.fill(0);
  return s;
}

GroupingScheme GroupingScheme::foreground() {
  GroupingScheme s;
  s.k = 2;
  s.table.fill(1);
  s.table[kBackground] = 0;
  return s;
}

GroupingScheme GroupingScheme::five_part() {
  GroupingScheme s;
  s.k = 5;
  s.table[kBackground] = 0;
  for (RawLabel l : {kHat, kHair, kSunglasses, kFace, kScarf}) s.table[l] = 1;
  for (RawLabel l : {kUpperClothes, kDress, kCoat, kGlove, kRightArm, kLeftArm, kJumpsuits}) s.table[l] = 2;
  for (RawLabel l : {kPants, kSkirt, kSocks, kRightLeg, kLeftLeg}) s.table[l] = 3;
  for (RawLabel l : {kRightShoe, kLeftShoe}) s.table[l] = 4;
  return s;
}

GroupingScheme GroupingScheme::identity() {
  GroupingScheme s;
  s.k = kRawLabelCount;
  for (std::size_t i = 0; i < kRawLabelCount; ++i) s.table[i] = static_cast<std::uint8_t>(i);
  return s;
}

GroupingScheme GroupingScheme::for_k(std::size_t k) {
  switch (k) {
    case 1: return whole_image();
    case 2: return foreground();
    case 5: return five_part();
    case kRawLabelCount: return identity();
    default: throw std::invalid_argument("no built-in grouping scheme for K=" + std::to_string(k));
  }
}

GroupingScheme GroupingScheme::from_json(const nlohmann::json& j) {
  GroupingScheme s;
  s.k = j.at("K").get<std::size_t>();
  const auto table = j.at("table").get<std::vector<int>>();
  if (table.size() != kRawLabelCount) {
    throw std::invalid_argument("grouping scheme: table needs 20 entries, got " + std::to_string(table.size()));
  }
  for (std::size_t i = 0; i < kRawLabelCount; ++i) {
    if (table[i] < 0) throw std::invalid_argument("grouping scheme: negative group index");
    s.table[i] = static_cast<std::uint8_t>(table[i]);
  }
  s.validate();
  return s;
}

nlohmann::json GroupingScheme::to_json() const {
  std::vector<int> t(table.begin(), table.end());
  return {{"K", k}, {"table", t}};
}

GroupingScheme GroupingScheme::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open grouping scheme " + path.string());
  return from_json(nlohmann::json::parse(is));
}

RawParsingMap make_raw_map(std::size_t width, std::size_t height, std::vector<std::uint8_t> labels) {
  if (labels.size() != width * height) throw DimensionError("raw parsing map: label count does not match extent");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kRawLabelCount) {
      throw std::invalid_argument("raw parsing map: label " + std::to_string(labels[i]) + " at (x=" +
                                  std::to_string(i % width) + ", y=" + std::to_string(i / width) + ") is >= 20");
    }
  }
  return {width, height, std::move(labels)};
}

RawParsingMap load_raw_map(const std::filesystem::path& path) {
  auto img = io::read_pgm(path);
  return make_raw_map(img.width, img.height, std::move(img.pixels));
}

PartLabelMap group_labels(const RawParsingMap& raw, const GroupingScheme& scheme) {
  scheme.validate();
  PartLabelMap out{raw.width, raw.height, scheme.k, std::vector<std::uint8_t>(raw.labels.size())};
  for (std::size_t i = 0; i < raw.labels.size(); ++i) {
    if (raw.labels[i] >= kRawLabelCount) {
      throw std::invalid_argument("group_labels: label " + std::to_string(raw.labels[i]) + " at (x=" +
                                  std::to_string(i % raw.width) + ", y=" + std::to_string(i / raw.width) + ") is >= 20");
    }
    out.labels[i] = scheme.table[raw.labels[i]];
  }
  return out;
}

namespace {

std::size_t nearest_source(std::size_t i, std::size_t in, std::size_t out) {
  const auto src = static_cast<std::size_t>(std::floor((static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                                                       static_cast<double>(out)));
  return std::min(src, in - 1);
}

}  // namespace

PartLabelMap resize_nearest(const PartLabelMap& map, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_nearest: target extent must be positive");
  PartLabelMap out{out_w, out_h, map.k, std::vector<std::uint8_t>(out_h * out_w)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = nearest_source(y, map.height, out_h);
    for (std::size_t x = 0; x < out_w; ++x) out.labels[y * out_w + x] = map.at(sy, nearest_source(x, map.width, out_w));
  }
  return out;
}

PartLabelMap flip_horizontal(const PartLabelMap& map) {
  PartLabelMap out = map;
  for (std::size_t y = 0; y < map.height; ++y) {
    std::reverse(out.labels.begin() + static_cast<std::ptrdiff_t>(y * map.width),
                 out.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * map.width));
  }
  return out;
}

template <Real T>
ConfidenceMaps<T> build_confidence_maps(const PartLabelMap& map) {
  if (map.k == 0) throw std::invalid_argument("build_confidence_maps: K must be >= 1");
  ConfidenceMaps<T> c;
  c.k = map.k;
  c.n = map.size();
  c.weights.assign(c.k * c.n, T(0));
  c.counts.assign(c.k, 0);
  for (std::uint8_t l : map.labels) {
    if (l >= map.k) throw std::invalid_argument("build_confidence_maps: label exceeds K");
    ++c.counts[l];
  }
  for (std::size_t i = 0; i < c.n; ++i) {
    const std::uint8_t l = map.labels[i];
    c.weights[l * c.n + i] = T(1) / static_cast<T>(c.counts[l]);
  }
  return c;
}

template ConfidenceMaps<float> build_confidence_maps<float>(const PartLabelMap&);
template ConfidenceMaps<double> build_confidence_maps<double>(const PartLabelMap&);

std::vector<std::uint8_t> binary_human_mask(const PartLabelMap& map, bool human) {
  if (map.k < 2) throw std::invalid_argument("binary_human_mask: K=1 label maps carry no foreground/background split");
  std::vector<std::uint8_t> mask(map.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool background = map.labels[i] == 0;
    mask[i] = (background != human) ? 1 : 0;
  }
  return mask;
}

}  // namespace partreid::parts
