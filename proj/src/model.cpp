#include "partreid/model.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "partreid/checkpoint.hpp"
#include "partreid/init.hpp"

namespace partreid::model {

namespace {

std::size_t conv_out(std::size_t in, std::size_t stride) { return (in + 2 - 3) / stride + 1; }

template <Real T>
Var<T> he_param(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  return Var<T>::parameter(kaiming_normal<T>(std::move(shape), fan_in, seed, name));
}

}  // namespace

void BackboneConfig::validate() const {
  if (in_channels == 0 || input_height == 0 || input_width == 0 || stem_channels == 0) {
    throw std::invalid_argument("backbone: input geometry and stem width must be positive");
  }
  if (widths.empty() || widths.size() != strides.size()) {
    throw std::invalid_argument("backbone: widths and strides must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) throw std::invalid_argument("backbone: stage widths must be positive");
    if (strides[i] != 1 && strides[i] != 2) throw std::invalid_argument("backbone: strides must be 1 or 2");
  }
  if (embedding_dim == 0) throw std::invalid_argument("backbone: embedding_dim must be positive");
  if (num_identities == 0) throw std::invalid_argument("backbone: num_identities must be positive");
  grouping.validate();
  for (const auto& ins : insertions) {
    if (ins.stage < 1 || ins.stage > widths.size()) {
      throw std::invalid_argument("backbone: insertion stage " + std::to_string(ins.stage) + " outside 1.." +
                                  std::to_string(widths.size()));
    }
    dpb::DpbConfig c = dpb;
    c.channels = widths[ins.stage - 1];
    c.k = grouping.k;
    c.validate();
  }
}

std::size_t BackboneConfig::dpb_count() const {
  std::size_t n = 0;
  for (const auto& ins : insertions) n += ins.count;
  return n;
}

std::vector<std::pair<std::size_t, std::size_t>> BackboneConfig::stage_sizes() const {
  std::size_t h = conv_out(input_height, 2), w = conv_out(input_width, 2);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s : strides) {
    h = conv_out(h, s);
    w = conv_out(w, s);
    out.emplace_back(h, w);
  }
  return out;
}

bool BackboneConfig::needs_labels() const {
  if (dpb_count() == 0) return false;
  return dpb.enable_human || (dpb.enable_latent && dpb.latent_mask != dpb::LatentMask::kNone);
}

nlohmann::json BackboneConfig::to_json() const {
  nlohmann::json ins = nlohmann::json::array();
  for (const auto& i : insertions) ins.push_back({i.stage, i.count});
  return {{"in_channels", in_channels},
          {"input_height", input_height},
          {"input_width", input_width},
          {"stem_channels", stem_channels},
          {"widths", widths},
          {"strides", strides},
          {"insertions", ins},
          {"embedding_dim", embedding_dim},
          {"num_identities", num_identities},
          {"grouping", grouping.to_json()},
          {"dpb", dpb.to_json()},
          {"seed", seed}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.input_height = j.value("input_height", c.input_height);
  c.input_width = j.value("input_width", c.input_width);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  c.widths = j.value("widths", c.widths);
  c.strides = j.value("strides", c.strides);
  if (j.contains("insertions")) {
    for (const auto& e : j.at("insertions")) {
      c.insertions.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    }
  }
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.num_identities = j.value("num_identities", c.num_identities);
  if (j.contains("grouping")) {
    const auto& gj = j.at("grouping");
    c.grouping = gj.is_number() ? parts::GroupingScheme::for_k(gj.get<std::size_t>())
                                : parts::GroupingScheme::from_json(gj);
  }
  if (j.contains("dpb")) c.dpb = dpb::DpbConfig::from_json(j.at("dpb"));
  c.seed = j.value("seed", c.seed);
  return c;
}

template <Real T>
ConvBn<T>::ConvBn(std::size_t in, std::size_t out, std::size_t stride_, std::uint64_t seed, const std::string& name)
    : weight(he_param<T>(Shape{out, in, 3, 3}, in * 9, seed, name + ".conv.weight")),
      gamma(Var<T>::parameter(Tensor<T>(Shape{out}, T(1)))),
      beta(Var<T>::parameter(Tensor<T>(Shape{out}))),
      bn(out),
      stride(stride_) {}

template <Real T>
Var<T> ConvBn<T>::apply(Graph<T>& g, const Var<T>& x, Mode mode) {
  return ops::relu(g, ops::batch_norm(g, ops::conv2d(g, x, weight, stride, 1), bn, mode, gamma, beta));
}

template <Real T>
Model<T>::Model(BackboneConfig config)
    : config_((config.validate(), std::move(config))),
      stem_(config_.in_channels, config_.stem_channels, 2, config_.seed, "stem"),
      emb_bn_(config_.embedding_dim) {
  const std::uint64_t seed = config_.seed;
  std::size_t in = config_.stem_channels;
  for (std::size_t s = 0; s < config_.widths.size(); ++s) {
    stages_.emplace_back(in, config_.widths[s], config_.strides[s], seed, "stage" + std::to_string(s + 1));
    in = config_.widths[s];
  }
  // Blocks are ordered by stage; within a stage, by declaration order.
  std::vector<Insertion> ins = config_.insertions;
  std::stable_sort(ins.begin(), ins.end(), [](const Insertion& a, const Insertion& b) { return a.stage < b.stage; });
  std::map<std::size_t, std::size_t> per_stage;
  for (const auto& i : ins) {
    for (std::size_t c = 0; c < i.count; ++c) {
      DpbBlock<T> b;
      b.stage = i.stage;
      b.config = config_.dpb;
      b.config.channels = config_.widths[i.stage - 1];
      b.config.k = config_.grouping.k;
      const std::string name = "stage" + std::to_string(i.stage) + ".dpb" + std::to_string(per_stage[i.stage]++);
      b.params = dpb::DpbParams<T>::init(b.config, seed, name);
      blocks_.push_back(std::move(b));
    }
  }
  const std::size_t e = config_.embedding_dim;
  fc_weight_ = he_param<T>(Shape{e, in}, in, seed, "fc.weight");
  fc_bias_ = Var<T>::parameter(Tensor<T>(Shape{e}));
  emb_gamma_ = Var<T>::parameter(Tensor<T>(Shape{e}, T(1)));
  emb_beta_ = Var<T>::parameter(Tensor<T>(Shape{e}));
  cls_weight_ = he_param<T>(Shape{config_.num_identities, e}, e, seed, "classifier.weight");
  cls_bias_ = Var<T>::parameter(Tensor<T>(Shape{config_.num_identities}));
}

template <Real T>
ModelOutput<T> Model<T>::forward(Graph<T>& g, const Var<T>& images, std::span<const parts::RawParsingMap> labels,
                                 Mode mode, std::vector<dpb::DpbTrace<T>>* traces) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.input_height || s[3] != config_.input_width) {
    throw DimensionError("model: expected images [B," + std::to_string(config_.in_channels) + "," +
                         std::to_string(config_.input_height) + "," + std::to_string(config_.input_width) + "], got " +
                         shape_string(s));
  }
  const std::size_t batch = s[0];
  const bool need_labels = !blocks_.empty() && config_.needs_labels();
  std::vector<parts::PartLabelMap> grouped;
  if (need_labels) {
    if (labels.size() != batch) {
      throw std::invalid_argument("model: " + std::to_string(labels.size()) + " label maps for a batch of " +
                                  std::to_string(batch));
    }
    for (const auto& raw : labels) grouped.push_back(parts::group_labels(raw, config_.grouping));
  }
  if (traces) traces->clear();

  Var<T> x = stem_.apply(g, images, mode);
  std::size_t next_block = 0;
  for (std::size_t st = 0; st < stages_.size(); ++st) {
    x = stages_[st].apply(g, x, mode);
    if (next_block >= blocks_.size() || blocks_[next_block].stage != st + 1) continue;
    dpb::PartInputs<T> inputs;
    if (need_labels) {
      const std::size_t h = x.shape()[2], w = x.shape()[3];
      std::vector<parts::PartLabelMap> resized;
      resized.reserve(batch);
      for (const auto& m : grouped) resized.push_back(parts::resize_nearest(m, h, w));
      inputs = dpb::PartInputs<T>::from_labels(std::move(resized));
    }
    for (; next_block < blocks_.size() && blocks_[next_block].stage == st + 1; ++next_block) {
      DpbBlock<T>& b = blocks_[next_block];
      dpb::DpbTrace<T>* tr = nullptr;
      if (traces) tr = &traces->emplace_back();
      x = dpb::dpb_forward(g, x, inputs, b.config, b.params, mode, tr);
    }
  }
  Var<T> pooled = ops::global_avg_pool(g, x);
  Var<T> emb = ops::relu(
      g, ops::batch_norm(g, ops::linear(g, pooled, fc_weight_, fc_bias_), emb_bn_, mode, emb_gamma_, emb_beta_));
  Var<T> logits = ops::linear(g, emb, cls_weight_, cls_bias_);
  return {emb, logits};
}

template <Real T>
std::vector<std::pair<std::string, Var<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, Var<T>>> out;
  const auto conv = [&](const ConvBn<T>& c, const std::string& name) {
    out.emplace_back(name + ".conv.weight", c.weight);
    out.emplace_back(name + ".bn.gamma", c.gamma);
    out.emplace_back(name + ".bn.beta", c.beta);
  };
  conv(stem_, "stem");
  for (std::size_t s = 0; s < stages_.size(); ++s) conv(stages_[s], "stage" + std::to_string(s + 1));
  std::map<std::size_t, std::size_t> per_stage;
  for (const auto& b : blocks_) {
    const std::string name = "stage" + std::to_string(b.stage) + ".dpb" + std::to_string(per_stage[b.stage]++);
    for (auto& p : b.params.named_parameters(name)) out.push_back(std::move(p));
  }
  out.emplace_back("fc.weight", fc_weight_);
  out.emplace_back("fc.bias", fc_bias_);
  out.emplace_back("embedding.bn.gamma", emb_gamma_);
  out.emplace_back("embedding.bn.beta", emb_beta_);
  out.emplace_back("classifier.weight", cls_weight_);
  out.emplace_back("classifier.bias", cls_bias_);
  return out;
}

template <Real T>
std::vector<Var<T>> Model<T>::parameters() const {
  std::vector<Var<T>> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::named_buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  const auto bn = [&](ops::BatchNormState<T>& st, const std::string& name) {
    out.emplace_back(name + ".running_mean", &st.running_mean);
    out.emplace_back(name + ".running_var", &st.running_var);
  };
  bn(stem_.bn, "stem.bn");
  for (std::size_t s = 0; s < stages_.size(); ++s) bn(stages_[s].bn, "stage" + std::to_string(s + 1) + ".bn");
  std::map<std::size_t, std::size_t> per_stage;
  for (auto& b : blocks_) {
    const std::string name = "stage" + std::to_string(b.stage) + ".dpb" + std::to_string(per_stage[b.stage]++);
    for (auto& p : b.params.named_buffers(name)) out.push_back(std::move(p));
  }
  bn(emb_bn_, "embedding.bn");
  return out;
}

template <Real T>
void Model<T>::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) {
  std::vector<NamedTensor<T>> tensors;
  for (auto& [name, v] : named_parameters()) {
    Tensor<T> copy(v.shape(), std::vector<T>(v.value().begin(), v.value().end()));
    tensors.push_back({name, std::move(copy)});
  }
  for (auto& [name, t] : named_buffers()) {
    tensors.push_back({name, Tensor<T>(t->shape(), std::vector<T>(t->data().begin(), t->data().end()))});
  }
  nlohmann::json meta = extra_meta;
  meta["backbone"] = config_.to_json();
  save_checkpoint<T>(path, tensors, meta);
}

template <Real T>
Model<T> Model<T>::load(const std::filesystem::path& path) {
  Checkpoint<T> ck = load_checkpoint<T>(path);
  if (!ck.meta.contains("backbone")) throw std::runtime_error("checkpoint " + path.string() + " has no model config");
  Model m(BackboneConfig::from_json(ck.meta.at("backbone")));
  const auto assign = [&](const std::string& name, Tensor<T>& dst) {
    const Tensor<T>& src = ck.at(name);
    if (src.shape() != dst.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                           shape_string(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  };
  for (auto& [name, v] : m.named_parameters()) assign(name, v.tensor());
  for (auto& [name, t] : m.named_buffers()) assign(name, *t);
  return m;
}

template <Real T>
std::size_t Model<T>::copy_matching_from(Model& other) {
  std::map<std::string, Tensor<T>*> src;
  for (auto& [name, v] : other.named_parameters()) src[name] = &v.tensor();
  for (auto& [name, t] : other.named_buffers()) src[name] = t;
  std::size_t copied = 0;
  const auto copy = [&](const std::string& name, Tensor<T>& dst) {
    auto it = src.find(name);
    if (it == src.end() || it->second->shape() != dst.shape()) return;
    std::copy(it->second->data().begin(), it->second->data().end(), dst.data().begin());
    ++copied;
  };
  for (auto& [name, v] : named_parameters()) copy(name, v.tensor());
  for (auto& [name, t] : named_buffers()) copy(name, *t);
  return copied;
}

template <Real T>
Tensor<T> images_to_tensor(std::span<const io::RgbImage> images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t h = images.front().height, w = images.front().width, plane = h * w;
  Tensor<T> out(Shape{images.size(), 3, h, w});
  auto dst = out.data();
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.height != h || img.width != w) throw DimensionError("images_to_tensor: mixed image sizes in batch");
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (img.pixels[i * 3 + c] / 255.0 - 0.5) / 0.25;
        dst[(b * 3 + c) * plane + i] = static_cast<T>(v);
      }
    }
  }
  return out;
}

template struct ConvBn<float>;
template struct ConvBn<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> images_to_tensor<float>(std::span<const io::RgbImage>);
template Tensor<double> images_to_tensor<double>(std::span<const io::RgbImage>);

}  // namespace partreid::model
