#include "partreid/train.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "partreid/init.hpp"
#include "partreid/optim.hpp"

namespace partreid::train {

namespace {

class DeterministicScope {
 public:
  explicit DeterministicScope(bool on) : previous_(deterministic()) { set_deterministic(on || previous_); }
  ~DeterministicScope() { set_deterministic(previous_); }
  DeterministicScope(const DeterministicScope&) = delete;
  DeterministicScope& operator=(const DeterministicScope&) = delete;

 private:
  bool previous_;
};

}  // namespace

void RunConfig::validate() const {
  if (p < 1 || k < 1) throw std::invalid_argument("run: P and K must be positive");
  if (triplet.enabled && (p < 2 || k < 2)) {
    throw std::invalid_argument("run: the triplet loss needs P >= 2 identities with K >= 2 images each");
  }
  if (epochs < 0) throw std::invalid_argument("run: epochs must be >= 0");
  for (int m : lr_milestones) {
    if (m < 0 || m > epochs) {
      throw std::invalid_argument("run: lr milestone " + std::to_string(m) + " outside 0.." + std::to_string(epochs));
    }
  }
  if (learning_rate < 0 || momentum < 0 || weight_decay < 0) {
    throw std::invalid_argument("run: learning rate, momentum and weight decay must be >= 0");
  }
}

StepSchedule RunConfig::schedule() const {
  if (lr_milestones.empty()) {
    StepSchedule s = StepSchedule::scaled(learning_rate, epochs);
    s.gamma = lr_gamma;
    return s;
  }
  return StepSchedule{learning_rate, lr_gamma, lr_milestones};
}

nlohmann::json RunConfig::to_json() const {
  return {{"p", p},
          {"k", k},
          {"epochs", epochs},
          {"steps_per_epoch", steps_per_epoch},
          {"learning_rate", learning_rate},
          {"lr_gamma", lr_gamma},
          {"lr_milestones", lr_milestones},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"augment", augment.to_json()},
          {"triplet", {{"enabled", triplet.enabled}, {"margin", triplet.margin}, {"normalize", triplet.normalize}}},
          {"validate_each_epoch", validate_each_epoch},
          {"deterministic", deterministic},
          {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig r;
  r.p = j.value("p", r.p);
  r.k = j.value("k", r.k);
  r.epochs = j.value("epochs", r.epochs);
  r.steps_per_epoch = j.value("steps_per_epoch", r.steps_per_epoch);
  r.learning_rate = j.value("learning_rate", r.learning_rate);
  r.lr_gamma = j.value("lr_gamma", r.lr_gamma);
  r.lr_milestones = j.value("lr_milestones", r.lr_milestones);
  r.momentum = j.value("momentum", r.momentum);
  r.weight_decay = j.value("weight_decay", r.weight_decay);
  if (j.contains("augment")) r.augment = augment::AugmentFlags::from_json(j.at("augment"));
  if (j.contains("triplet")) {
    const auto& t = j.at("triplet");
    r.triplet.enabled = t.value("enabled", r.triplet.enabled);
    r.triplet.margin = t.value("margin", r.triplet.margin);
    r.triplet.normalize = t.value("normalize", r.triplet.normalize);
  }
  r.validate_each_epoch = j.value("validate_each_epoch", r.validate_each_epoch);
  r.deterministic = j.value("deterministic", r.deterministic);
  r.seed = j.value("seed", r.seed);
  return r;
}

PkSampler::PkSampler(std::span<const int> identities, std::size_t p, std::size_t k, std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < identities.size(); ++i) by_id[identities[i]].push_back(i);
  std::size_t short_ids = 0;
  for (auto& [id, members] : by_id) {
    if (members.size() >= k) {
      groups_.push_back(std::move(members));
    } else {
      ++short_ids;
    }
  }
  if (groups_.size() < p) {
    throw std::invalid_argument("PK sampling needs " + std::to_string(p) + " identities with >= " +
                                std::to_string(k) + " images; dataset has " + std::to_string(groups_.size()) +
                                " (" + std::to_string(short_ids) + " identities have too few images)");
  }
}

std::vector<std::size_t> PkSampler::batch(int epoch, std::size_t step) const {
  std::vector<std::size_t> order(groups_.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = stream_rng(seed_, fnv1a("pk-epoch:" + std::to_string(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t start = (step % steps_per_epoch()) * p_;
  std::vector<std::size_t> out;
  out.reserve(p_ * k_);
  for (std::size_t i = start; i < start + p_; ++i) {
    std::vector<std::size_t> members = groups_[order[i]];
    auto mrng = stream_rng(seed_, fnv1a("pk-draw:" + std::to_string(epoch) + ":" + std::to_string(step) + ":" +
                                        std::to_string(order[i])));
    std::shuffle(members.begin(), members.end(), mrng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k_));
  }
  return out;
}

std::vector<int> train_class_labels(const data::Dataset& data, std::span<const std::size_t> train_indices,
                                    std::size_t* num_classes) {
  std::set<int> ids;
  for (std::size_t i : train_indices) ids.insert(data.samples[i].identity);
  std::map<int, int> cls;
  for (int id : ids) cls.emplace(id, static_cast<int>(cls.size()));
  std::vector<int> out;
  out.reserve(train_indices.size());
  for (std::size_t i : train_indices) out.push_back(cls.at(data.samples[i].identity));
  if (num_classes) *num_classes = cls.size();
  return out;
}

model::Model<float> build_model(model::BackboneConfig config, const data::Dataset& data) {
  const auto train_idx = data.indices(data::Split::kTrain);
  if (train_idx.empty()) throw std::invalid_argument("dataset has no train split");
  std::size_t classes = 0;
  train_class_labels(data, train_idx, &classes);
  config.num_identities = classes;
  if (!data.images.empty()) {
    config.input_height = data.images.front().height;
    config.input_width = data.images.front().width;
  }
  return model::Model<float>(std::move(config));
}

TrainResult train(const RunConfig& run, const data::Dataset& data, model::Model<float>& model, std::ostream* log) {
  run.validate();
  DeterministicScope scope(run.deterministic);
  const auto train_idx = data.indices(data::Split::kTrain);
  std::size_t classes = 0;
  const std::vector<int> classes_of = train_class_labels(data, train_idx, &classes);
  if (classes != model.config().num_identities) {
    throw std::invalid_argument("model classifies " + std::to_string(model.config().num_identities) +
                                " identities but the train split has " + std::to_string(classes));
  }
  const PkSampler sampler(classes_of, run.p, run.k, run.seed);
  const std::size_t steps = run.steps_per_epoch ? run.steps_per_epoch : sampler.steps_per_epoch();
  const bool can_validate =
      !data.indices(data::Split::kQuery).empty() && !data.indices(data::Split::kGallery).empty();

  std::vector<io::RgbImage> train_images;
  for (std::size_t i : train_idx) train_images.push_back(data.images[i]);
  augment::AugmentFlags aug = run.augment;
  aug.fill_mean = augment::channel_mean(train_images);
  train_images.clear();

  const StepSchedule schedule = run.schedule();
  Sgd<float> opt(model.parameters(), SgdConfig<float>{static_cast<float>(run.learning_rate),
                                                      static_cast<float>(run.momentum),
                                                      static_cast<float>(run.weight_decay)});
  TrainResult result;
  const std::size_t batch_size = run.p * run.k;
  for (int epoch = 0; epoch < run.epochs; ++epoch) {
    const double lr = schedule.at(epoch);
    opt.set_learning_rate(static_cast<float>(lr));
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto picks = sampler.batch(epoch, step);
      std::vector<io::RgbImage> images;
      std::vector<parts::RawParsingMap> labels;
      std::vector<int> targets;
      images.reserve(batch_size);
      labels.reserve(batch_size);
      for (std::size_t j = 0; j < picks.size(); ++j) {
        const std::size_t idx = train_idx[picks[j]];
        images.push_back(data.images[idx]);
        labels.push_back(data.labels[idx]);
        targets.push_back(classes_of[picks[j]]);
        auto rng = stream_rng(run.seed, fnv1a("augment:" + std::to_string(epoch) + ":" + std::to_string(step) + ":" +
                                              std::to_string(j)));
        augment::augment(images.back(), &labels.back(), rng, aug);
      }
      Graph<float> g;
      auto x = Var<float>::constant(model::images_to_tensor<float>(images));
      auto out = model.forward(g, x, labels, ops::Mode::kTrain);
      auto report = loss::combined_loss(g, out.logits, out.embedding, targets, run.triplet);
      g.backward(report.combined);
      opt.step();
      opt.zero_grad();

      StepRecord rec{epoch, step, lr, report.combined_value(), report.softmax_loss, report.triplet_loss,
                     report.active_triplet_fraction};
      loss_sum += rec.loss;
      result.steps.push_back(rec);
      if (log) {
        *log << nlohmann::json{{"type", "step"},       {"epoch", epoch},         {"step", step},
                               {"lr", lr},             {"loss", rec.loss},       {"softmax", rec.softmax},
                               {"triplet", rec.triplet}, {"active_triplets", rec.active_fraction}}
                    .dump()
             << '\n';
      }
    }
    EpochRecord er{epoch, lr, steps ? loss_sum / static_cast<double>(steps) : 0.0, std::nullopt, std::nullopt};
    if (run.validate_each_epoch && can_validate) {
      const auto ev = evaluate(model, data);
      er.val_recall1 = ev.recall_at(1);
      er.val_map = ev.map;
    }
    result.epochs.push_back(er);
    if (log) {
      nlohmann::json j{{"type", "epoch"}, {"epoch", epoch}, {"lr", lr}, {"loss", er.mean_loss}};
      if (er.val_recall1) {
        j["val_recall1"] = *er.val_recall1;
        j["val_map"] = *er.val_map;
      }
      *log << j.dump() << '\n';
      log->flush();
    }
  }
  return result;
}

metrics::EmbeddingSet extract_embeddings(model::Model<float>& model, const data::Dataset& data,
                                         std::span<const std::size_t> indices, metrics::Role role,
                                         std::size_t batch_size) {
  metrics::EmbeddingSet set;
  set.dim = model.config().embedding_dim;
  set.role = role;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    std::vector<io::RgbImage> images;
    std::vector<parts::RawParsingMap> labels;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(data.images[indices[i]]);
      labels.push_back(data.labels[indices[i]]);
    }
    Graph<float> g;
    g.set_recording(false);
    auto x = Var<float>::constant(model::images_to_tensor<float>(images));
    auto out = model.forward(g, x, labels, ops::Mode::kEval);
    const auto v = out.embedding.value();
    set.values.insert(set.values.end(), v.begin(), v.end());
  }
  for (std::size_t i : indices) {
    const auto& s = data.samples[i];
    set.ids.push_back(s.identity);
    set.cameras.push_back(s.camera);
    set.junk.push_back(s.junk ? 1 : 0);
  }
  return set;
}

metrics::EvalResult evaluate(model::Model<float>& model, const data::Dataset& data,
                             const metrics::EvalOptions& options) {
  const auto q_idx = data.indices(data::Split::kQuery);
  const auto g_idx = data.indices(data::Split::kGallery);
  if (q_idx.empty() || g_idx.empty()) throw std::invalid_argument("evaluate: dataset needs query and gallery splits");
  const auto q = extract_embeddings(model, data, q_idx, metrics::Role::kQuery);
  const auto g = extract_embeddings(model, data, g_idx, metrics::Role::kGallery);
  return metrics::cmc_and_map(q, g, options);
}

}  // namespace partreid::train
