#ifndef PARTREID_MODEL_HPP_
#define PARTREID_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "partreid/dpb.hpp"
#include "partreid/image_io.hpp"
#include "partreid/ops.hpp"
#include "partreid/parts.hpp"

namespace partreid::model {

using ops::Mode;

// `count` blocks placed after stage `stage` (1-based, Res-1..Res-4).
struct Insertion {
  std::size_t stage = 2;
  std::size_t count = 1;
  bool operator==(const Insertion&) const = default;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t input_height = 96;
  std::size_t input_width = 32;
  // Stride-2 3x3 stem ahead of the stages.
  std::size_t stem_channels = 16;
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::vector<std::size_t> strides{2, 2, 2, 1};
  std::vector<Insertion> insertions;
  std::size_t embedding_dim = 256;
  std::size_t num_identities = 0;
  parts::GroupingScheme grouping = parts::GroupingScheme::five_part();
  // Template for every inserted block; channels and k are filled in per stage.
  dpb::DpbConfig dpb;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t dpb_count() const;
  // (height, width) after each stage.
  std::vector<std::pair<std::size_t, std::size_t>> stage_sizes() const;
  bool needs_labels() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

template <Real T>
struct ConvBn {
  Var<T> weight;
  Var<T> gamma;
  Var<T> beta;
  ops::BatchNormState<T> bn;
  std::size_t stride = 1;

  ConvBn(std::size_t in, std::size_t out, std::size_t stride, std::uint64_t seed, const std::string& name);
  Var<T> apply(Graph<T>& g, const Var<T>& x, Mode mode);
};

template <Real T>
struct DpbBlock {
  std::size_t stage = 0;
  dpb::DpbConfig config;
  dpb::DpbParams<T> params;
};

template <Real T>
struct ModelOutput {
  Var<T> embedding;  // [B, embedding_dim], after FC + BN + ReLU
  Var<T> logits;     // [B, num_identities]
};

template <Real T>
class Model {
 public:
  explicit Model(BackboneConfig config);

  // images: [B, in_channels, H, W]. labels: one raw parsing map per image at
  // input resolution; may be empty when no inserted block needs them.
  ModelOutput<T> forward(Graph<T>& g, const Var<T>& images, std::span<const parts::RawParsingMap> labels, Mode mode,
                         std::vector<dpb::DpbTrace<T>>* traces = nullptr);

  const BackboneConfig& config() const { return config_; }
  std::vector<DpbBlock<T>>& blocks() { return blocks_; }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const;
  std::vector<Var<T>> parameters() const;
  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers();

  // Parameters and running statistics, with the config in the header meta.
  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = nlohmann::json::object());
  static Model load(const std::filesystem::path& path);
  // Copies every tensor whose name exists in both models; returns the count.
  std::size_t copy_matching_from(Model& other);

 private:
  BackboneConfig config_;
  ConvBn<T> stem_;
  std::vector<ConvBn<T>> stages_;
  std::vector<DpbBlock<T>> blocks_;
  Var<T> fc_weight_, fc_bias_, emb_gamma_, emb_beta_;
  ops::BatchNormState<T> emb_bn_;
  Var<T> cls_weight_, cls_bias_;
};

// Maps 8-bit RGB to [B,3,H,W] with (v/255 - 0.5) / 0.25.
template <Real T>
Tensor<T> images_to_tensor(std::span<const io::RgbImage> images);

}  // namespace partreid::model

#endif  // PARTREID_MODEL_HPP_
