#include "partreid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>

#include "partreid/init.hpp"

namespace partreid::synth {

namespace {

using Color = std::array<double, 3>;

constexpr std::array<Color, 12> kPalette{{{220, 40, 40},
                                          {40, 160, 60},
                                          {40, 70, 220},
                                          {230, 200, 40},
                                          {200, 60, 200},
                                          {40, 200, 210},
                                          {240, 140, 30},
                                          {120, 60, 20},
                                          {245, 245, 245},
                                          {25, 25, 25},
                                          {150, 150, 230},
                                          {100, 170, 120}}};
constexpr std::array<Color, 4> kHair{{{20, 15, 10}, {90, 55, 25}, {210, 180, 90}, {160, 160, 160}}};
constexpr std::array<Color, 3> kSkin{{{240, 200, 170}, {200, 150, 110}, {120, 80, 55}}};
constexpr Color kBackground{110, 110, 110};

struct Outfit {
  Color hair, skin, upper, lower, shoes;
  bool striped = false;
  bool skirt = false;
};

struct Accessory {
  bool present = false;
  Color color{};
  bool left = false;
  double center_y = 0.5;
  double width = 0.25;
  double height = 0.15;
};

struct Canvas {
  std::size_t w, h;
  std::vector<Color> rgb;
  std::vector<std::uint8_t> labels;

  void fill(double x0, double y0, double x1, double y1, const Color& c, std::uint8_t label) {
    const auto clampi = [](double v, std::size_t hi) {
      return static_cast<std::size_t>(std::clamp(std::lround(v), 0L, static_cast<long>(hi)));
    };
    const std::size_t xa = clampi(x0, w), xb = clampi(x1, w), ya = clampi(y0, h), yb = clampi(y1, h);
    for (std::size_t y = ya; y < yb; ++y) {
      for (std::size_t x = xa; x < xb; ++x) {
        rgb[y * w + x] = c;
        labels[y * w + x] = label;
      }
    }
  }
};

std::mt19937_64 keyed(std::uint64_t seed, const std::string& key) { return stream_rng(seed, fnv1a(key)); }

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

Outfit make_outfit(const SyntheticDatasetSpec& spec, std::size_t identity) {
  const std::size_t key = spec.paired_outfits ? identity / 2 : identity;
  auto rng = keyed(spec.seed, "outfit:" + std::to_string(key));
  Outfit o;
  o.hair = kHair[pick(rng, kHair.size())];
  o.skin = kSkin[pick(rng, kSkin.size())];
  o.upper = kPalette[pick(rng, spec.palette_size)];
  o.lower = kPalette[pick(rng, spec.palette_size)];
  o.shoes = kPalette[pick(rng, spec.palette_size)];
  o.striped = pick(rng, 2) == 1;
  o.skirt = pick(rng, 3) == 0;
  return o;
}

Accessory make_accessory(const SyntheticDatasetSpec& spec, std::size_t identity) {
  auto rng = keyed(spec.seed, "accessory:" + std::to_string(identity));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Accessory a;
  a.present = u(rng) < spec.accessory_probability;
  a.color = kPalette[pick(rng, spec.palette_size)];
  a.left = u(rng) < 0.5;
  a.center_y = 0.3 + 0.4 * u(rng);
  a.width = 0.2 + 0.08 * u(rng);
  a.height = 0.12 + 0.08 * u(rng);
  return a;
}

}  // namespace

void SyntheticDatasetSpec::validate() const {
  if (num_identities == 0 || images_per_identity == 0 || cameras == 0) {
    throw std::invalid_argument("synth: identities, images per identity and cameras must be positive");
  }
  if (height < 8 || width < 8) throw std::invalid_argument("synth: images must be at least 8x8");
  if (test_identities > num_identities) throw std::invalid_argument("synth: test_identities exceeds num_identities");
  if (palette_size == 0 || palette_size > kPalette.size()) {
    throw std::invalid_argument("synth: palette_size must be in 1.." + std::to_string(kPalette.size()));
  }
  if (noise < 0 || pose_jitter < 0 || clutter < 0 || accessory_probability < 0 || accessory_probability > 1) {
    throw std::invalid_argument("synth: noise, pose_jitter, clutter must be >= 0 and accessory_probability in [0,1]");
  }
}

nlohmann::json SyntheticDatasetSpec::to_json() const {
  return {{"num_identities", num_identities},
          {"images_per_identity", images_per_identity},
          {"cameras", cameras},
          {"height", height},
          {"width", width},
          {"test_identities", test_identities},
          {"palette_size", palette_size},
          {"paired_outfits", paired_outfits},
          {"accessory_probability", accessory_probability},
          {"noise", noise},
          {"pose_jitter", pose_jitter},
          {"clutter", clutter},
          {"seed", seed}};
}

SyntheticDatasetSpec SyntheticDatasetSpec::from_json(const nlohmann::json& j) {
  SyntheticDatasetSpec s;
  s.num_identities = j.value("num_identities", s.num_identities);
  s.images_per_identity = j.value("images_per_identity", s.images_per_identity);
  s.cameras = j.value("cameras", s.cameras);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.test_identities = j.value("test_identities", s.test_identities);
  s.palette_size = j.value("palette_size", s.palette_size);
  s.paired_outfits = j.value("paired_outfits", s.paired_outfits);
  s.accessory_probability = j.value("accessory_probability", s.accessory_probability);
  s.noise = j.value("noise", s.noise);
  s.pose_jitter = j.value("pose_jitter", s.pose_jitter);
  s.clutter = j.value("clutter", s.clutter);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::array<double, 3> camera_tint(const SyntheticDatasetSpec& spec, std::size_t camera) {
  auto rng = keyed(spec.seed, "camera:" + std::to_string(camera));
  std::uniform_real_distribution<double> u(0.8, 1.2);
  std::array<double, 3> t{};
  for (double& v : t) v = u(rng);
  return t;
}

RenderedSample render(const SyntheticDatasetSpec& spec, std::size_t identity, std::size_t index) {
  using parts::RawLabel;
  const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
  Canvas cv{spec.width, spec.height, std::vector<Color>(spec.width * spec.height, kBackground),
            std::vector<std::uint8_t>(spec.width * spec.height, RawLabel::kBackground)};
  const Outfit o = make_outfit(spec, identity);
  const Accessory acc = make_accessory(spec, identity);
  auto rng = keyed(spec.seed, "image:" + std::to_string(identity) + ":" + std::to_string(index));
  std::uniform_real_distribution<double> u(0.0, 1.0), sym(-1.0, 1.0);

  // Every draw below happens regardless of the knobs so that the stream
  // positions, and hence the remaining content, do not depend on them.
  const double dx = sym(rng) * spec.pose_jitter * 0.12 * W;
  const double dy = sym(rng) * spec.pose_jitter * 0.04 * H;
  const double stretch = 1.0 + sym(rng) * spec.pose_jitter * 0.08;

  std::poisson_distribution<int> clutter_count(std::max(spec.clutter, 1e-9));
  const int n_clutter = spec.clutter > 0 ? clutter_count(rng) : 0;
  for (int i = 0; i < n_clutter; ++i) {
    const Color c = kPalette[pick(rng, spec.palette_size)];
    const double bw = (0.1 + 0.2 * u(rng)) * W, bh = (0.05 + 0.1 * u(rng)) * H;
    const double x0 = u(rng) * (W - bw), y0 = u(rng) * (H - bh);
    cv.fill(x0, y0, x0 + bw, y0 + bh, c, RawLabel::kBackground);
  }

  const double cx = 0.5 * W + dx;
  const double bw = 0.22 * W, aw = 0.08 * W;
  const auto Y = [&](double f) { return dy + H * (0.04 + (f - 0.04) * stretch); };

  if (acc.present) {
    const double w = acc.width * W, h = acc.height * H;
    const double x0 = acc.left ? cx - bw - aw - w : cx + bw + aw;
    const double yc = Y(acc.center_y);
    cv.fill(x0, yc - h / 2, x0 + w, yc + h / 2, acc.color, RawLabel::kBackground);
  }

  cv.fill(cx - 0.2 * W, Y(0.04), cx + 0.2 * W, Y(0.09), o.hair, RawLabel::kHair);
  cv.fill(cx - 0.16 * W, Y(0.09), cx + 0.16 * W, Y(0.17), o.skin, RawLabel::kFace);
  cv.fill(cx - bw, Y(0.17), cx + bw, Y(0.50), o.upper, RawLabel::kUpperClothes);
  if (o.striped) {
    const Color dark{o.upper[0] * 0.55, o.upper[1] * 0.55, o.upper[2] * 0.55};
    for (double f = 0.20; f < 0.48; f += 0.06) {
      cv.fill(cx - bw, Y(f), cx + bw, Y(f + 0.025), dark, RawLabel::kUpperClothes);
    }
  }
  cv.fill(cx - bw - aw, Y(0.18), cx - bw, Y(0.46), o.upper, RawLabel::kRightArm);
  cv.fill(cx + bw, Y(0.18), cx + bw + aw, Y(0.46), o.upper, RawLabel::kLeftArm);
  cv.fill(cx - bw - aw, Y(0.46), cx - bw, Y(0.50), o.skin, RawLabel::kRightArm);
  cv.fill(cx + bw, Y(0.46), cx + bw + aw, Y(0.50), o.skin, RawLabel::kLeftArm);
  if (o.skirt) {
    cv.fill(cx - bw - 0.04 * W, Y(0.50), cx + bw + 0.04 * W, Y(0.66), o.lower, RawLabel::kSkirt);
    cv.fill(cx - 0.18 * W, Y(0.66), cx - 0.04 * W, Y(0.84), o.skin, RawLabel::kRightLeg);
    cv.fill(cx + 0.04 * W, Y(0.66), cx + 0.18 * W, Y(0.84), o.skin, RawLabel::kLeftLeg);
  } else {
    cv.fill(cx - 0.2 * W, Y(0.50), cx + 0.2 * W, Y(0.60), o.lower, RawLabel::kPants);
    cv.fill(cx - 0.2 * W, Y(0.60), cx - 0.02 * W, Y(0.84), o.lower, RawLabel::kPants);
    cv.fill(cx + 0.02 * W, Y(0.60), cx + 0.2 * W, Y(0.84), o.lower, RawLabel::kPants);
  }
  cv.fill(cx - 0.2 * W, Y(0.84), cx - 0.02 * W, Y(0.90), o.shoes, RawLabel::kRightShoe);
  cv.fill(cx + 0.02 * W, Y(0.84), cx + 0.2 * W, Y(0.90), o.shoes, RawLabel::kLeftShoe);

  const auto tint = camera_tint(spec, index % spec.cameras);
  std::normal_distribution<double> noise(0.0, 1.0);
  RenderedSample out;
  out.image = {spec.width, spec.height, std::vector<std::uint8_t>(spec.width * spec.height * 3)};
  for (std::size_t i = 0; i < cv.rgb.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double v = cv.rgb[i][c] * tint[c];
      const double n = noise(rng);
      if (spec.noise > 0) v += n * spec.noise * 255.0;
      out.image.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
  }
  out.labels = parts::make_raw_map(spec.width, spec.height, std::move(cv.labels));
  return out;
}

namespace {

std::vector<data::Sample> layout(const SyntheticDatasetSpec& spec) {
  std::vector<data::Sample> samples;
  const std::size_t first_test = spec.num_identities - spec.test_identities;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    for (std::size_t n = 0; n < spec.images_per_identity; ++n) {
      const std::size_t cam = n % spec.cameras;
      char name[64];
      std::snprintf(name, sizeof(name), "images/%04zu_c%zu_%03zu.ppm", id, cam, n);
      data::Split split = data::Split::kTrain;
      if (id >= first_test) split = cam + 1 == spec.cameras ? data::Split::kQuery : data::Split::kGallery;
      samples.push_back({name, static_cast<int>(id), static_cast<int>(cam), split, false});
    }
  }
  return samples;
}

}  // namespace

data::Dataset render_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  data::Dataset d;
  d.samples = layout(spec);
  d.images.resize(d.samples.size());
  d.labels.resize(d.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    auto r = render(spec, static_cast<std::size_t>(d.samples[i].identity), i % spec.images_per_identity);
    d.images[i] = std::move(r.image);
    d.labels[i] = std::move(r.labels);
  }
  return d;
}

std::vector<data::Sample> synth_generate(const SyntheticDatasetSpec& spec, const std::filesystem::path& out_dir) {
  data::Dataset d = render_dataset(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("synth: cannot create " + (out_dir / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto image_path = out_dir / d.samples[i].path;
    io::write_ppm(image_path, d.images[i]);
    io::write_pgm(data::label_path_for(image_path), {d.labels[i].width, d.labels[i].height, d.labels[i].labels});
  }
  data::write_manifest(out_dir / "manifest.csv", d.samples);
  std::ofstream(out_dir / "spec.json") << spec.to_json().dump(2) << '\n';
  return d.samples;
}

}  // namespace partreid::synth
