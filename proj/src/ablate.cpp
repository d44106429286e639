#include "partreid/ablate.hpp"

#include <chrono>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace partreid::ablate {

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<Variant> standard_variants(bool masked) {
  std::vector<Variant> v{
      {"Baseline", 0, 5, false, false, dpb::LatentMask::kNone},
      {"DPB (HP-1)", 1, 1, true, false, dpb::LatentMask::kNone},
      {"DPB (HP-2)", 1, 2, true, false, dpb::LatentMask::kNone},
      {"DPB (HP-5)", 1, 5, true, false, dpb::LatentMask::kNone},
      {"DPB (Latent)", 1, 5, false, true, dpb::LatentMask::kNone},
      {"DPB (HP-5 + Latent)", 1, 5, true, true, dpb::LatentMask::kNone},
  };
  if (masked) {
    v.push_back({"DPB (Latent w/o NHP)", 1, 5, false, true, dpb::LatentMask::kKeepHumanOnly});
    v.push_back({"DPB (Latent w/o HP)", 1, 5, false, true, dpb::LatentMask::kKeepNonHumanOnly});
  }
  return v;
}

const Variant& find_variant(const std::vector<Variant>& variants, const std::string& name) {
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  throw std::invalid_argument("unknown ablation variant '" + name + "'");
}

model::BackboneConfig configure(const model::BackboneConfig& base, const Variant& v, std::size_t stage) {
  model::BackboneConfig c = base;
  c.insertions.clear();
  if (v.count > 0) {
    c.insertions.push_back({stage, v.count});
    c.grouping = parts::GroupingScheme::for_k(v.k);
    c.dpb.enable_human = v.human;
    c.dpb.enable_latent = v.latent;
    c.dpb.latent_mask = v.mask;
  }
  return c;
}

double Row::mean_recall1() const { return mean_of(recall1); }
double Row::mean_map() const { return mean_of(map); }

std::vector<Row> run(const Options& options, const std::vector<Variant>& variants,
                     const std::function<const data::Dataset&(std::uint64_t)>& dataset_for, std::ostream* progress) {
  std::vector<Row> rows;
  for (const auto& v : variants) {
    Row row;
    row.name = v.name;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed : options.seeds) {
      const data::Dataset& data = dataset_for(seed);
      model::BackboneConfig cfg = configure(options.backbone, v, options.stage);
      cfg.seed = seed;
      auto model = train::build_model(cfg, data);
      train::RunConfig run = options.run;
      run.seed = seed;
      run.validate_each_epoch = false;
      train::train(run, data, model);
      const auto ev = train::evaluate(model, data);
      row.recall1.push_back(ev.recall_at(1));
      row.map.push_back(ev.map);
      if (progress) {
        *progress << v.name << " seed " << seed << ": R-1 " << ev.recall_at(1) << " mAP " << ev.map << std::endl;
      }
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_table(const std::vector<Row>& rows, std::size_t stage) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %8s %8s %8s\n", ("Res-" + std::to_string(stage)).c_str(), "R-1", "mAP",
                "time(s)");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %8.2f %8.2f %8.1f\n", r.name.c_str(), 100.0 * r.mean_recall1(),
                  100.0 * r.mean_map(), r.seconds);
    os << buf;
  }
  return os.str();
}

}  // namespace partreid::ablate
