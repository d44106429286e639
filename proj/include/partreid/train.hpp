#ifndef PARTREID_TRAIN_HPP_
#define PARTREID_TRAIN_HPP_

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "partreid/augment.hpp"
#include "partreid/dataset.hpp"
#include "partreid/losses.hpp"
#include "partreid/metrics.hpp"
#include "partreid/model.hpp"
#include "partreid/optim.hpp"

namespace partreid::train {

struct RunConfig {
  std::size_t p = 16;  // identities per batch
  std::size_t k = 4;   // images per identity
  int epochs = 60;
  // 0 derives one pass over the train identities: floor(#ids / p).
  std::size_t steps_per_epoch = 0;
  double learning_rate = 0.05;
  double lr_gamma = 0.1;
  // Empty scales the decay point to 2/3 of the run.
  std::vector<int> lr_milestones;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  augment::AugmentFlags augment;
  loss::TripletConfig triplet;
  bool validate_each_epoch = true;
  bool deterministic = false;
  std::uint64_t seed = 0;

  void validate() const;
  StepSchedule schedule() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// Emits batches of exactly P distinct identities with K images each.
class PkSampler {
 public:
  PkSampler(std::span<const int> identities, std::size_t p, std::size_t k, std::uint64_t seed);

  // Positions into `identities`; identities are visited in a per-epoch
  // shuffled order, images drawn without replacement.
  std::vector<std::size_t> batch(int epoch, std::size_t step) const;
  std::size_t steps_per_epoch() const { return groups_.size() / p_; }
  std::size_t identity_count() const { return groups_.size(); }

 private:
  std::vector<std::vector<std::size_t>> groups_;
  std::size_t p_, k_;
  std::uint64_t seed_;
};

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double softmax = 0.0;
  double triplet = 0.0;
  double active_fraction = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  std::optional<double> val_recall1;
  std::optional<double> val_map;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

// Maps dataset identities of the train split to contiguous class indices.
std::vector<int> train_class_labels(const data::Dataset& data, std::span<const std::size_t> train_indices,
                                    std::size_t* num_classes);

// Builds an untrained model sized for the dataset's train identities.
model::Model<float> build_model(model::BackboneConfig config, const data::Dataset& data);

// One JSON object per line: {"type":"step",...} and {"type":"epoch",...}.
TrainResult train(const RunConfig& run, const data::Dataset& data, model::Model<float>& model,
                  std::ostream* log = nullptr);

// Eval-mode embeddings for the given samples, in order.
metrics::EmbeddingSet extract_embeddings(model::Model<float>& model, const data::Dataset& data,
                                         std::span<const std::size_t> indices, metrics::Role role,
                                         std::size_t batch_size = 64);

metrics::EvalResult evaluate(model::Model<float>& model, const data::Dataset& data,
                             const metrics::EvalOptions& options = {});

}  // namespace partreid::train

#endif  // PARTREID_TRAIN_HPP_
