#include "partreid/dpb.hpp"

#include <algorithm>
#include <cmath>
#include <system_error>

#include "partreid/image_io.hpp"
#include "partreid/init.hpp"

namespace partreid::dpb {

namespace {

const char* kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::kIdentity: return "identity";
    case TransformKind::kLinear: return "linear";
    case TransformKind::kLinearBnRelu: return "linear_bn_relu";
  }
  return "identity";
}

TransformKind kind_from(const std::string& s) {
  if (s == "identity") return TransformKind::kIdentity;
  if (s == "linear") return TransformKind::kLinear;
  if (s == "linear_bn_relu") return TransformKind::kLinearBnRelu;
  throw std::invalid_argument("unknown transform kind '" + s + "'");
}

const char* mask_name(LatentMask m) {
  switch (m) {
    case LatentMask::kNone: return "none";
    case LatentMask::kKeepNonHumanOnly: return "keep_nonhuman_only";
    case LatentMask::kKeepHumanOnly: return "keep_human_only";
  }
  return "none";
}

LatentMask mask_from(const std::string& s) {
  if (s == "none") return LatentMask::kNone;
  if (s == "keep_nonhuman_only") return LatentMask::kKeepNonHumanOnly;
  if (s == "keep_human_only") return LatentMask::kKeepHumanOnly;
  throw std::invalid_argument("unknown latent mask mode '" + s + "'");
}

struct MapDims {
  std::size_t batch, channels, height, width;
  std::size_t pixels() const { return height * width; }
};

MapDims map_dims(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected [B,C,H,W], got " + shape_string(s));
  return {s[0], s[1], s[2], s[3]};
}

template <Real T>
void check_parts(const MapDims& d, const PartInputs<T>& parts, std::size_t k, const char* op) {
  if (parts.labels.size() != d.batch || parts.confidence.size() != d.batch) {
    throw DimensionError(std::string(op) + ": got label maps for " + std::to_string(parts.labels.size()) +
                         " images, batch has " + std::to_string(d.batch));
  }
  for (std::size_t b = 0; b < d.batch; ++b) {
    const auto& l = parts.labels[b];
    if (l.height != d.height || l.width != d.width) {
      throw DimensionError(std::string(op) + ": label map " + std::to_string(l.height) + "x" + std::to_string(l.width) +
                           " does not match feature map " + std::to_string(d.height) + "x" + std::to_string(d.width));
    }
    if (l.k != k || parts.confidence[b].k != k) {
      throw DimensionError(std::string(op) + ": label map has K=" + std::to_string(l.k) + ", block expects K=" +
                           std::to_string(k));
    }
  }
}

// Attention core shared by the plain and masked latent branch.
template <Real T>
Var<T> attend(Graph<T>& g, const Var<T>& x, DpbParams<T>& p, Mode mode, std::span<const std::uint8_t> key_mask,
              std::span<const std::uint8_t> row_mask, bool masked, DpbTrace<T>* trace) {
  const MapDims d = map_dims(x.shape(), "latent_branch");
  Var<T> queries = ops::to_pixels(g, p.phi.apply(g, x, mode));
  Var<T> keys = ops::to_pixels(g, p.theta.apply(g, x, mode));
  Var<T> logits = ops::matmul(g, queries, keys, ops::Trans::kYes);
  Var<T> attn = masked ? ops::masked_softmax_rows(g, logits, key_mask, row_mask) : ops::softmax_rows(g, logits);
  if (trace) {
    trace->batch = d.batch;
    trace->pixels = d.pixels();
    trace->attention.assign(attn.value().begin(), attn.value().end());
  }
  Var<T> values = ops::to_pixels(g, p.psi.apply(g, x, mode));
  Var<T> mixed = ops::from_pixels(g, ops::matmul(g, attn, values), d.height, d.width);
  return p.latent_out.apply(g, mixed, mode);
}

}  // namespace

void DpbConfig::validate() const {
  if (!enable_human && !enable_latent) throw std::invalid_argument("dpb: at least one branch must be enabled");
  if (channels == 0) throw std::invalid_argument("dpb: channels must be positive");
  if (theta_phi != TransformKind::kIdentity && (reduction == 0 || channels % reduction != 0)) {
    throw std::invalid_argument("dpb: channels " + std::to_string(channels) + " not divisible by reduction " +
                                std::to_string(reduction));
  }
  if (k == 0) throw std::invalid_argument("dpb: K must be >= 1");
  if (projection == TransformKind::kLinearBnRelu) {
    throw std::invalid_argument("dpb: output projection must be identity or linear");
  }
  if (latent_mask != LatentMask::kNone && k < 2) {
    throw std::invalid_argument("dpb: masked latent attention needs K >= 2 label maps");
  }
}

std::size_t DpbConfig::key_channels() const {
  return theta_phi == TransformKind::kIdentity ? channels : channels / reduction;
}

nlohmann::json DpbConfig::to_json() const {
  return {{"channels", channels},
          {"K", k},
          {"reduction", reduction},
          {"enable_human", enable_human},
          {"enable_latent", enable_latent},
          {"latent_mask", mask_name(latent_mask)},
          {"mask_queries", mask_queries},
          {"g", kind_name(g)},
          {"theta_phi", kind_name(theta_phi)},
          {"psi", kind_name(psi)},
          {"projection", kind_name(projection)},
          {"zero_init_projection", zero_init_projection}};
}

DpbConfig DpbConfig::from_json(const nlohmann::json& j) {
  DpbConfig c;
  c.channels = j.value("channels", c.channels);
  c.k = j.value("K", c.k);
  c.reduction = j.value("reduction", c.reduction);
  c.enable_human = j.value("enable_human", c.enable_human);
  c.enable_latent = j.value("enable_latent", c.enable_latent);
  c.latent_mask = mask_from(j.value("latent_mask", std::string(mask_name(c.latent_mask))));
  c.mask_queries = j.value("mask_queries", c.mask_queries);
  c.g = kind_from(j.value("g", std::string(kind_name(c.g))));
  c.theta_phi = kind_from(j.value("theta_phi", std::string(kind_name(c.theta_phi))));
  c.psi = kind_from(j.value("psi", std::string(kind_name(c.psi))));
  c.projection = kind_from(j.value("projection", std::string(kind_name(c.projection))));
  c.zero_init_projection = j.value("zero_init_projection", c.zero_init_projection);
  return c;
}

template <Real T>
PointwiseTransform<T> PointwiseTransform<T>::identity() {
  return PointwiseTransform{};
}

template <Real T>
PointwiseTransform<T> PointwiseTransform<T>::make(TransformKind kind, std::size_t in, std::size_t out, bool has_bias,
                                                  bool zero_init, std::uint64_t seed, const std::string& name) {
  PointwiseTransform t;
  t.kind = kind;
  if (kind == TransformKind::kIdentity) {
    if (in != out) throw std::invalid_argument("identity transform '" + name + "' cannot change channel count");
    return t;
  }
  t.weight = Var<T>::parameter(zero_init ? Tensor<T>(Shape{out, in}) : kaiming_normal<T>(Shape{out, in}, in, seed, name + ".weight"));
  t.bias = has_bias ? Var<T>::parameter(Tensor<T>(Shape{out})) : Var<T>::constant(Tensor<T>(Shape{out}));
  if (kind == TransformKind::kLinearBnRelu) {
    t.gamma = Var<T>::parameter(Tensor<T>(Shape{out}, T(1)));
    t.beta = Var<T>::parameter(Tensor<T>(Shape{out}));
    t.bn.emplace(out);
  }
  return t;
}

template <Real T>
Var<T> PointwiseTransform<T>::apply(Graph<T>& g, const Var<T>& x, Mode mode) {
  switch (kind) {
    case TransformKind::kIdentity:
      return x;
    case TransformKind::kLinear:
      return ops::pointwise_linear(g, x, weight, bias);
    case TransformKind::kLinearBnRelu:
      return ops::relu(g, ops::batch_norm(g, ops::pointwise_linear(g, x, weight, bias), *bn, mode, gamma, beta));
  }
  return x;
}

template <Real T>
DpbParams<T> DpbParams<T>::init(const DpbConfig& config, std::uint64_t seed, const std::string& name) {
  config.validate();
  const std::size_t c = config.channels, ck = config.key_channels();
  using PT = PointwiseTransform<T>;
  DpbParams p;
  // A bias ahead of BN, or on theta (a per-query constant logit), has no
  // effect on the output, so those transforms carry none.
  const auto biased = [](TransformKind k) { return k != TransformKind::kLinearBnRelu; };
  if (config.enable_human) {
    p.g = PT::make(config.g, c, c, biased(config.g), false, seed, name + ".g");
    p.human_out = PT::make(config.projection, c, c, false, config.zero_init_projection, seed, name + ".human_out");
  }
  if (config.enable_latent) {
    p.theta = PT::make(config.theta_phi, c, ck, false, false, seed, name + ".theta");
    p.phi = PT::make(config.theta_phi, c, ck, biased(config.theta_phi), false, seed, name + ".phi");
    p.psi = PT::make(config.psi, c, c, biased(config.psi), false, seed, name + ".psi");
    p.latent_out = PT::make(config.projection, c, c, false, config.zero_init_projection, seed, name + ".latent_out");
  }
  return p;
}

template <Real T>
std::vector<std::pair<std::string, Var<T>>> DpbParams<T>::named_parameters(const std::string& prefix) const {
  std::vector<std::pair<std::string, Var<T>>> out;
  const auto add = [&](const PointwiseTransform<T>& t, const char* tag) {
    if (t.kind == TransformKind::kIdentity) return;
    const std::string base = prefix + "." + tag;
    out.emplace_back(base + ".weight", t.weight);
    if (t.bias.requires_grad()) out.emplace_back(base + ".bias", t.bias);
    if (t.bn) {
      out.emplace_back(base + ".bn.gamma", t.gamma);
      out.emplace_back(base + ".bn.beta", t.beta);
    }
  };
  add(g, "g");
  add(theta, "theta");
  add(phi, "phi");
  add(psi, "psi");
  add(human_out, "human_out");
  add(latent_out, "latent_out");
  return out;
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>*>> DpbParams<T>::named_buffers(const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  const auto add = [&](PointwiseTransform<T>& t, const char* tag) {
    if (!t.bn) return;
    const std::string base = prefix + "." + tag + ".bn";
    out.emplace_back(base + ".running_mean", &t.bn->running_mean);
    out.emplace_back(base + ".running_var", &t.bn->running_var);
  };
  add(g, "g");
  add(psi, "psi");
  return out;
}

template <Real T>
PartInputs<T> PartInputs<T>::from_labels(std::vector<parts::PartLabelMap> labels) {
  PartInputs in;
  in.confidence.reserve(labels.size());
  for (const auto& l : labels) in.confidence.push_back(parts::build_confidence_maps<T>(l));
  in.labels = std::move(labels);
  return in;
}

template <Real T>
Var<T> human_branch(Graph<T>& g, const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config,
                    DpbParams<T>& params, Mode mode) {
  const MapDims d = map_dims(x.shape(), "human_branch");
  check_parts(d, parts, config.k, "human_branch");
  const std::size_t n = d.pixels(), k = config.k;
  Tensor<T> weights(Shape{d.batch, k, n});
  std::vector<std::size_t> index(d.batch * n);
  for (std::size_t b = 0; b < d.batch; ++b) {
    std::copy(parts.confidence[b].weights.begin(), parts.confidence[b].weights.end(),
              weights.data().begin() + static_cast<std::ptrdiff_t>(b * k * n));
    for (std::size_t i = 0; i < n; ++i) index[b * n + i] = parts.labels[b].labels[i];
  }
  // pooled[b,k,:] = sum_i p_ki x_i; empty parts pool to zero and are never scattered.
  Var<T> pooled = ops::matmul(g, Var<T>::constant(std::move(weights)), ops::to_pixels(g, x));
  Var<T> scattered = ops::from_pixels(g, ops::gather_rows(g, pooled, index, n), d.height, d.width);
  return params.human_out.apply(g, params.g.apply(g, scattered, mode), mode);
}

template <Real T>
Var<T> latent_branch(Graph<T>& g, const Var<T>& x, DpbParams<T>& params, Mode mode, DpbTrace<T>* trace) {
  return attend(g, x, params, mode, {}, {}, false, trace);
}

template <Real T>
Var<T> latent_branch_masked(Graph<T>& g, const Var<T>& x, std::span<const std::uint8_t> mask, DpbParams<T>& params,
                            Mode mode, bool mask_queries, DpbTrace<T>* trace) {
  const MapDims d = map_dims(x.shape(), "latent_branch_masked");
  if (mask.size() != d.batch * d.pixels()) {
    throw DimensionError("latent_branch_masked: mask has " + std::to_string(mask.size()) + " entries, need " +
                         std::to_string(d.batch * d.pixels()));
  }
  return attend(g, x, params, mode, mask, mask_queries ? mask : std::span<const std::uint8_t>{}, true, trace);
}

template <Real T>
Var<T> dpb_forward(Graph<T>& g, const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config,
                   DpbParams<T>& params, Mode mode, DpbTrace<T>* trace) {
  config.validate();
  const MapDims d = map_dims(x.shape(), "dpb_forward");
  if (d.channels != config.channels) {
    throw DimensionError("dpb_forward: input has " + std::to_string(d.channels) + " channels, block expects " +
                         std::to_string(config.channels));
  }
  Var<T> z = x;
  if (config.enable_human) z = ops::add(g, z, human_branch(g, x, parts, config, params, mode));
  if (config.enable_latent) {
    if (config.latent_mask == LatentMask::kNone) {
      z = ops::add(g, z, latent_branch(g, x, params, mode, trace));
    } else {
      check_parts(d, parts, config.k, "dpb_forward");
      std::vector<std::uint8_t> mask;
      mask.reserve(d.batch * d.pixels());
      for (const auto& l : parts.labels) {
        const auto m = parts::binary_human_mask(l, config.latent_mask == LatentMask::kKeepHumanOnly);
        mask.insert(mask.end(), m.begin(), m.end());
      }
      z = ops::add(g, z, latent_branch_masked(g, x, mask, params, mode, config.mask_queries, trace));
    }
  }
  return z;
}

template <Real T>
Tensor<T> part_representations(const Var<T>& x, const PartInputs<T>& parts, DpbParams<T>& params) {
  const MapDims d = map_dims(x.shape(), "part_representations");
  if (parts.confidence.size() != d.batch) throw DimensionError("part_representations: batch mismatch");
  const std::size_t k = parts.confidence.front().k, n = d.pixels();
  check_parts(d, parts, k, "part_representations");
  Graph<T> g;
  g.set_recording(false);
  Tensor<T> weights(Shape{d.batch, k, n});
  for (std::size_t b = 0; b < d.batch; ++b) {
    std::copy(parts.confidence[b].weights.begin(), parts.confidence[b].weights.end(),
              weights.data().begin() + static_cast<std::ptrdiff_t>(b * k * n));
  }
  Var<T> pooled = ops::matmul(g, Var<T>::constant(std::move(weights)), ops::to_pixels(g, x));
  Var<T> h = ops::to_pixels(g, params.g.apply(g, ops::from_pixels(g, pooled, k, 1), Mode::kEval));
  Tensor<T> out = h.tensor();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t part = 0; part < k; ++part) {
      if (parts.confidence[b].counts[part] != 0) continue;
      std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>((b * k + part) * d.channels), d.channels, T(0));
    }
  }
  return out;
}

template <Real T>
std::vector<std::uint8_t> to_graymap(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  T mx = T(0);
  for (T v : values) mx = std::max(mx, v);
  if (!(mx > T(0))) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double s = std::round(255.0 * static_cast<double>(values[i]) / static_cast<double>(mx));
    out[i] = static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
  }
  return out;
}

template <Real T>
void export_masks(const Var<T>& x, const PartInputs<T>& parts, const DpbConfig& config, DpbParams<T>& params,
                  const std::filesystem::path& out_dir, std::span<const std::size_t> rows) {
  const MapDims d = map_dims(x.shape(), "export_masks");
  check_parts(d, parts, config.k, "export_masks");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("export_masks: cannot create directory " + out_dir.string());
  }
  Graph<T> g;
  g.set_recording(false);
  DpbTrace<T> trace;
  dpb_forward(g, x, parts, config, params, Mode::kEval, &trace);

  const std::size_t n = d.pixels();
  const auto& conf = parts.confidence.front();
  for (std::size_t k = 0; k < conf.k; ++k) {
    io::GrayImage img{d.width, d.height, to_graymap<T>(std::span<const T>(conf.weights).subspan(k * n, n))};
    io::write_pgm(out_dir / ("part_" + std::to_string(k) + ".pgm"), img);
  }
  if (!rows.empty() && trace.attention.empty()) {
    throw std::invalid_argument("export_masks: attention rows requested but the latent branch is disabled");
  }
  for (std::size_t r : rows) {
    if (r >= n) throw std::out_of_range("export_masks: attention row " + std::to_string(r) + " >= N=" + std::to_string(n));
    io::GrayImage img{d.width, d.height, to_graymap<T>(std::span<const T>(trace.attention).subspan(r * n, n))};
    io::write_pgm(out_dir / ("attn_" + std::to_string(r) + ".pgm"), img);
  }
}

#define PARTREID_INSTANTIATE(T)                                                                                  \
  template struct PointwiseTransform<T>;                                                                         \
  template struct DpbParams<T>;                                                                                  \
  template struct PartInputs<T>;                                                                                 \
  template Var<T> human_branch(Graph<T>&, const Var<T>&, const PartInputs<T>&, const DpbConfig&, DpbParams<T>&, \
                               Mode);                                                                            \
  template Var<T> latent_branch(Graph<T>&, const Var<T>&, DpbParams<T>&, Mode, DpbTrace<T>*);                    \
  template Var<T> latent_branch_masked(Graph<T>&, const Var<T>&, std::span<const std::uint8_t>, DpbParams<T>&,   \
                                       Mode, bool, DpbTrace<T>*);                                                \
  template Var<T> dpb_forward(Graph<T>&, const Var<T>&, const PartInputs<T>&, const DpbConfig&, DpbParams<T>&,   \
                              Mode, DpbTrace<T>*);                                                               \
  template Tensor<T> part_representations(const Var<T>&, const PartInputs<T>&, DpbParams<T>&);                   \
  template std::vector<std::uint8_t> to_graymap<T>(std::span<const T>);                                          \
  template void export_masks(const Var<T>&, const PartInputs<T>&, const DpbConfig&, DpbParams<T>&,               \
                             const std::filesystem::path&, std::span<const std::size_t>);

PARTREID_INSTANTIATE(float)
PARTREID_INSTANTIATE(double)

#undef PARTREID_INSTANTIATE

}  // namespace partreid::dpb
