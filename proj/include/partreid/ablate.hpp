#ifndef PARTREID_ABLATE_HPP_
#define PARTREID_ABLATE_HPP_

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "partreid/dataset.hpp"
#include "partreid/model.hpp"
#include "partreid/train.hpp"

namespace partreid::ablate {

struct Variant {
  std::string name;
  std::size_t count = 0;  // blocks inserted after the chosen stage; 0 = baseline
  std::size_t k = 5;
  bool human = false;
  bool latent = false;
  dpb::LatentMask mask = dpb::LatentMask::kNone;
};

// Baseline, HP-1, HP-2, HP-5, Latent, HP-5 + Latent; with `masked`, also
// Latent w/o NHP (human pixels only) and Latent w/o HP (non-human only).
std::vector<Variant> standard_variants(bool masked = false);
const Variant& find_variant(const std::vector<Variant>& variants, const std::string& name);

// Applies a variant to a base config: one block after `stage`.
model::BackboneConfig configure(const model::BackboneConfig& base, const Variant& v, std::size_t stage);

struct Row {
  std::string name;
  std::vector<double> recall1;  // per seed
  std::vector<double> map;
  double seconds = 0.0;
  double mean_recall1() const;
  double mean_map() const;
};

struct Options {
  model::BackboneConfig backbone;
  train::RunConfig run;
  std::size_t stage = 2;
  std::vector<std::uint64_t> seeds{0};
};

// dataset_for(seed) supplies the data for each seed; model init and
// training use that seed too.
std::vector<Row> run(const Options& options, const std::vector<Variant>& variants,
                     const std::function<const data::Dataset&(std::uint64_t)>& dataset_for,
                     std::ostream* progress = nullptr);

std::string format_table(const std::vector<Row>& rows, std::size_t stage);

}  // namespace partreid::ablate

#endif  // PARTREID_ABLATE_HPP_
