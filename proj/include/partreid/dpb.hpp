#ifndef PARTREID_DPB_HPP_
#define PARTREID_DPB_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "partreid/ops.hpp"
#include "partreid/parts.hpp"

namespace partreid::dpb {

using ops::Mode;

enum class LatentMask : std::uint8_t {
  kNone,
  kKeepNonHumanOnly,  // "Latent w/o HP": attention restricted to background pixels
  kKeepHumanOnly,     // "Latent w/o NHP": attention restricted to person pixels
};

enum class TransformKind : std::uint8_t { kIdentity, kLinear, kLinearBnRelu };

struct DpbConfig {
  std::size_t channels = 16;
  std::size_t k = 5;
  // theta/phi output width is channels / reduction.
  std::size_t reduction = 2;
  bool enable_human = true;
  bool enable_latent = true;
  LatentMask latent_mask = LatentMask::kNone;
  // With false, only keys are masked; every query row still attends.
  bool mask_queries = true;
  TransformKind g = TransformKind::kLinearBnRelu;
  TransformKind theta_phi = TransformKind::kLinear;
  TransformKind psi = TransformKind::kLinearBnRelu;
  // kIdentity disables the per-branch output projection.
  TransformKind projection = TransformKind::kLinear;
  bool zero_init_projection = true;

  // Throws when both branches are off or channels % reduction != 0.
  void validate() const;
  std::size_t key_channels() const;

  nlohmann::json to_json() const;
  static DpbConfig from_json(const nlohmann::json& j);
};

// A pointwise (1x1) map on [B,C,H,W]: identity, linear, or linear + BN + ReLU.
template <Real T>
struct PointwiseTransform {
  TransformKind kind = TransformKind::kIdentity;
  Var<T> weight;
  Var<T> bias;
  Var<T> gamma;
  Var<T> beta;
  std::optional<ops::BatchNormState<T>> bn;

  static PointwiseTransform identity();
  // has_bias=false uses a fixed zero bias so that zero input rows map to 0.
  static PointwiseTransform make(TransformKind kind, std::size_t in, std::size_t out, bool has_bias, bool zero_init,
                                 std::uint64_t seed, const std::string& name);

  Var<T> apply(Graph<T>& g, const Var<T>& x, Mode mode);
};

template <Real T>
struct DpbParams {
  PointwiseTransform<T> g;
  PointwiseTransform<T> theta;
  PointwiseTransform<T> phi;
  PointwiseTransform<T> psi;
  PointwiseTransform<T> human_out;
  PointwiseTransform<T> latent_out;

  static DpbParams init(const DpbConfig& config, std::uint64_t seed, const std::string& name);

  // Trainable tensors with stable names, for optimizers and checkpoints.
  std::vector<std::pair<std::string, Var<T>>> named_parameters(const std::string& prefix) const;
  // Running BN statistics: (name, tensor*) pairs.
  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(const std::string& prefix);
};

// Per-image inputs resolved to the feature map's resolution.
template <Real T>
struct PartInputs {
  std::vector<parts::PartLabelMap> labels;
  std::vector<parts::ConfidenceMaps<T>> confidence;

  static PartInputs from_labels(std::vector<parts::PartLabelMap> labels);
};

// Values captured during a forward pass for visualization.
template <Real T>
struct DpbTrace {
  std::size_t batch = 0, pixels = 0;
  std::vector<T> attention;  // [B,N,N], row i is Q_i
};

// x^Human_i = out(g(sum_j p_kj x_j)) for k = l_i. Background is part 0 and
// is handled like any other part.
template <Real T>
Var<T> human_branch(Graph<T>& g, const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config,
                    DpbParams<T>& params, Mode mode);

// x^Latent_i = out(sum_j q_ij psi(x_j)), q_ij = softmax_j(theta(x_j) . phi(x_i)).
template <Real T>
Var<T> latent_branch(Graph<T>& g, const Var<T>& x, DpbParams<T>& params, Mode mode, DpbTrace<T>* trace = nullptr);

// Attention restricted to pixels with mask[b*N + i] = 1. Masked keys get zero
// weight; masked query rows (when mask_queries) output exactly zero.
template <Real T>
Var<T> latent_branch_masked(Graph<T>& g, const Var<T>& x, std::span<const std::uint8_t> mask, DpbParams<T>& params,
                            Mode mode, bool mask_queries = true, DpbTrace<T>* trace = nullptr);

// Z = X + X^Human + X^Latent; disabled branches contribute nothing.
template <Real T>
Var<T> dpb_forward(Graph<T>& g, const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config,
                   DpbParams<T>& params, Mode mode, DpbTrace<T>* trace = nullptr);

// h_k = g(pooled part k) per image, [B,K,C], with h_k = 0 for empty parts.
template <Real T>
Tensor<T> part_representations(const Var<T>& x, const PartInputs<T>& parts, DpbParams<T>& params);

// Scales values by 255 / max (all zero when max <= 0) and rounds.
template <Real T>
std::vector<std::uint8_t> to_graymap(std::span<const T> values);

// Writes part_<k>.pgm for every part and attn_<i>.pgm for each requested
// attention row, for batch item 0, at the feature map's resolution.
template <Real T>
void export_masks(const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config, DpbParams<T>& params,
                  const std::filesystem::path& out_dir, std::span<const std::size_t> rows);

}  // namespace partreid::dpb

#endif  // PARTREID_DPB_HPP_
