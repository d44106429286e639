#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "partreid/ablate.hpp"
#include "partreid/dataset.hpp"
#include "partreid/dpb.hpp"
#include "partreid/gradsuite.hpp"
#include "partreid/metrics.hpp"
#include "partreid/model.hpp"
#include "partreid/synth.hpp"
#include "partreid/train.hpp"

namespace fs = std::filesystem;
using namespace partreid;

namespace {

constexpr int kExitMissingInput = 2;

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingInput("cannot open " + path.string());
  return nlohmann::json::parse(is);
}

data::Dataset load_dataset(const std::string& path) {
  if (path.empty() || !fs::exists(path)) throw MissingInput("dataset not found: '" + path + "'");
  if (fs::is_directory(path) && !fs::exists(fs::path(path) / "manifest.csv")) {
    throw MissingInput("no manifest.csv in " + path);
  }
  return data::Dataset::load(path);
}

std::vector<model::Insertion> parse_insertions(const std::vector<std::string>& specs) {
  std::vector<model::Insertion> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("insertion '" + s + "' is not STAGE:COUNT");
    out.push_back({std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))});
  }
  return out;
}

struct SynthFlags {
  synth::SyntheticDatasetSpec spec;
  std::string spec_file;

  void add(CLI::App* app) {
    app->add_option("--spec", spec_file, "JSON file with dataset spec fields");
    app->add_option("--identities", spec.num_identities, "Number of identities");
    app->add_option("--images", spec.images_per_identity, "Images per identity");
    app->add_option("--cameras", spec.cameras, "Number of cameras");
    app->add_option("--height", spec.height, "Image height");
    app->add_option("--width", spec.width, "Image width");
    app->add_option("--test-identities", spec.test_identities, "Identities held out for query/gallery");
    app->add_option("--palette", spec.palette_size, "Clothing palette size");
    app->add_flag("--paired-outfits", spec.paired_outfits, "Pairs of identities share an outfit");
    app->add_option("--accessory-prob", spec.accessory_probability, "Probability an identity carries an accessory");
    app->add_option("--noise", spec.noise, "Pixel noise standard deviation (0..1 scale)");
    app->add_option("--pose-jitter", spec.pose_jitter, "Body shift/stretch scale");
    app->add_option("--clutter", spec.clutter, "Mean background distractor blobs per image");
    app->add_option("--seed", spec.seed, "Generator seed");
  }
  synth::SyntheticDatasetSpec resolve() const {
    if (spec_file.empty()) return spec;
    return synth::SyntheticDatasetSpec::from_json(read_json(spec_file));
  }
};

struct ModelFlags {
  std::string config_file;
  std::vector<std::string> insert;
  std::size_t parts = 0;
  std::size_t embedding = 0;
  std::vector<std::size_t> widths;
  bool human_only = false, latent_only = false;
  std::string mask;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "JSON file with \"run\" and \"backbone\" objects");
    app->add_option("--insert", insert, "DPB insertion STAGE:COUNT (repeatable)");
    app->add_option("--parts", parts, "Part groups K (1, 2, 5 or 20)");
    app->add_option("--embedding", embedding, "Embedding dimension");
    app->add_option("--widths", widths, "Stage widths")->expected(1, 8);
    app->add_flag("--human-only", human_only, "Disable the latent branch");
    app->add_flag("--latent-only", latent_only, "Disable the human branch");
    app->add_option("--latent-mask", mask, "none | keep-nonhuman | keep-human")
        ->check(CLI::IsMember({"none", "keep-nonhuman", "keep-human"}));
  }
  model::BackboneConfig backbone(const nlohmann::json& file) const {
    model::BackboneConfig c =
        file.contains("backbone") ? model::BackboneConfig::from_json(file.at("backbone")) : model::BackboneConfig{};
    if (!insert.empty()) c.insertions = parse_insertions(insert);
    if (parts) c.grouping = parts::GroupingScheme::for_k(parts);
    if (embedding) c.embedding_dim = embedding;
    if (!widths.empty()) c.widths = widths;
    if (human_only) c.dpb.enable_latent = false;
    if (latent_only) c.dpb.enable_human = false;
    if (mask == "keep-nonhuman") c.dpb.latent_mask = dpb::LatentMask::kKeepNonHumanOnly;
    if (mask == "keep-human") c.dpb.latent_mask = dpb::LatentMask::kKeepHumanOnly;
    return c;
  }
};

struct RunFlags {
  int epochs = -1;
  std::size_t steps = 0, p = 0, k = 0;
  double lr = -1;
  bool no_triplet = false, no_augment = false, deterministic = false;
  std::uint64_t seed = 0;
  bool seed_set = false;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--steps-per-epoch", steps, "Steps per epoch (0: one pass over identities)");
    app->add_option("--p", p, "Identities per batch");
    app->add_option("--k", k, "Images per identity in a batch");
    app->add_option("--lr", lr, "Base learning rate");
    app->add_flag("--no-triplet", no_triplet, "Softmax loss only");
    app->add_flag("--no-augment", no_augment, "Disable flip and random erasing");
    app->add_flag("--deterministic", deterministic, "Serial reference kernels, bitwise reproducible");
    app->add_option("--seed", seed, "Run seed")->each([this](const std::string&) { seed_set = true; });
  }
  train::RunConfig run(const nlohmann::json& file) const {
    train::RunConfig r = file.contains("run") ? train::RunConfig::from_json(file.at("run")) : train::RunConfig{};
    if (epochs >= 0) r.epochs = epochs;
    if (steps) r.steps_per_epoch = steps;
    if (p) r.p = p;
    if (k) r.k = k;
    if (lr >= 0) r.learning_rate = lr;
    if (no_triplet) r.triplet.enabled = false;
    if (no_augment) r.augment = augment::AugmentFlags::none();
    if (deterministic) r.deterministic = true;
    if (seed_set) r.seed = seed;
    return r;
  }
};

void print_eval(const metrics::EvalResult& r) {
  std::cout << "queries " << r.evaluated_queries.size() << "  R-1 " << r.recall_at(1);
  if (r.cmc.size() >= 5) std::cout << "  R-5 " << r.recall_at(5);
  if (r.cmc.size() >= 10) std::cout << "  R-10 " << r.recall_at(10);
  std::cout << "  mAP " << r.map << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-aligned person re-identification toolkit"};
  app.require_subcommand(1);

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  SynthFlags synth_flags;
  std::string synth_out;
  synth_flags.add(synth_cmd);
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  std::string train_data, train_out = "model.ckpt", train_log;
  ModelFlags train_model;
  RunFlags train_run;
  train_cmd->add_option("--data", train_data, "Dataset directory or manifest")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path");
  train_cmd->add_option("--log", train_log, "JSONL log path (default: stdout)");
  train_model.add(train_cmd);
  train_run.add(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or embedding files");
  std::string eval_ckpt, eval_data, eval_query, eval_gallery, eval_report, eval_dump;
  bool eval_same_camera = false;
  std::size_t eval_kmax = 20;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint");
  eval_cmd->add_option("--data", eval_data, "Dataset with query/gallery splits");
  eval_cmd->add_option("--query", eval_query, "Query embedding file");
  eval_cmd->add_option("--gallery", eval_gallery, "Gallery embedding file");
  eval_cmd->add_option("--report", eval_report, "Write {cmc, map} JSON here");
  eval_cmd->add_option("--dump-embeddings", eval_dump, "Write query.emb / gallery.emb into this directory");
  eval_cmd->add_option("--k-max", eval_kmax, "Longest CMC rank");
  eval_cmd->add_flag("--no-camera-exclusion", eval_same_camera, "Keep same-id same-camera gallery entries");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::uint64_t grad_seed = 0;
  grad_cmd->add_option("--seed", grad_seed, "Seed for random inputs");

  auto* export_cmd = app.add_subcommand("export-masks", "Write part maps and attention rows as PGM");
  std::string export_ckpt, export_data, export_out = "masks";
  std::size_t export_sample = 0, export_block = 0;
  std::vector<std::size_t> export_rows;
  export_cmd->add_option("--checkpoint", export_ckpt, "Model checkpoint")->required();
  export_cmd->add_option("--data", export_data, "Dataset")->required();
  export_cmd->add_option("--sample", export_sample, "Dataset row to visualize");
  export_cmd->add_option("--block", export_block, "DPB index in forward order");
  export_cmd->add_option("--rows", export_rows, "Attention rows (pixel indices) to export");
  export_cmd->add_option("--out", export_out, "Output directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "Baseline / HP-1/2/5 / Latent / HP-5+Latent comparison");
  std::string ablate_data;
  std::size_t ablate_stage = 2;
  std::vector<std::uint64_t> ablate_seeds{0};
  std::vector<std::string> ablate_only;
  bool ablate_masked = false;
  SynthFlags ablate_synth;
  ModelFlags ablate_model;
  RunFlags ablate_run;
  ablate_cmd->add_option("--data", ablate_data, "Dataset (default: synthesize one per seed)");
  ablate_cmd->add_option("--stage", ablate_stage, "Stage after which the DPB is inserted");
  ablate_cmd->add_option("--seeds", ablate_seeds, "Seeds to average over");
  ablate_cmd->add_option("--only", ablate_only, "Restrict to these variant names");
  ablate_cmd->add_flag("--masked", ablate_masked, "Add the masked latent variants");
  ablate_model.add(ablate_cmd);
  ablate_run.add(ablate_cmd);
  auto* ablate_synth_group = ablate_cmd->add_option_group("synthetic data");
  ablate_synth.add(ablate_synth_group);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) {
      const auto spec = synth_flags.resolve();
      const auto samples = synth::synth_generate(spec, synth_out);
      std::cout << "wrote " << samples.size() << " samples to " << synth_out << '\n';
      return 0;
    }

    if (*train_cmd) {
      const nlohmann::json file = train_model.config_file.empty() ? nlohmann::json::object()
                                                                  : read_json(train_model.config_file);
      const auto data = load_dataset(train_data);
      auto model = train::build_model(train_model.backbone(file), data);
      const auto run = train_run.run(file);
      std::ofstream log_file;
      std::ostream* log = &std::cout;
      if (!train_log.empty()) {
        log_file.open(train_log);
        if (!log_file) throw std::runtime_error("cannot write log " + train_log);
        log = &log_file;
      }
      train::train(run, data, model, log);
      model.save(train_out, {{"run", run.to_json()}});
      std::cerr << "saved " << train_out << '\n';
      return 0;
    }

    if (*eval_cmd) {
      metrics::EvalOptions opts{eval_kmax, !eval_same_camera};
      metrics::EvalResult result;
      if (!eval_query.empty() || !eval_gallery.empty()) {
        if (eval_query.empty() || eval_gallery.empty()) throw MissingInput("--query and --gallery go together");
        if (!fs::exists(eval_query)) throw MissingInput("missing " + eval_query);
        if (!fs::exists(eval_gallery)) throw MissingInput("missing " + eval_gallery);
        result = metrics::cmc_and_map(metrics::read_embeddings(eval_query), metrics::read_embeddings(eval_gallery),
                                      opts);
      } else {
        if (eval_ckpt.empty() || !fs::exists(eval_ckpt)) throw MissingInput("checkpoint not found: '" + eval_ckpt + "'");
        const auto data = load_dataset(eval_data);
        auto model = model::Model<float>::load(eval_ckpt);
        const auto qi = data.indices(data::Split::kQuery), gi = data.indices(data::Split::kGallery);
        const auto q = train::extract_embeddings(model, data, qi, metrics::Role::kQuery);
        const auto g = train::extract_embeddings(model, data, gi, metrics::Role::kGallery);
        if (!eval_dump.empty()) {
          fs::create_directories(eval_dump);
          metrics::write_embeddings(fs::path(eval_dump) / "query.emb", q);
          metrics::write_embeddings(fs::path(eval_dump) / "gallery.emb", g);
        }
        result = metrics::cmc_and_map(q, g, opts);
      }
      print_eval(result);
      if (!eval_report.empty()) std::ofstream(eval_report) << result.to_json().dump() << '\n';
      return 0;
    }

    if (*grad_cmd) {
      const auto results = gradsuite::run_suite(grad_seed, &std::cout);
      double worst = 0.0;
      bool all_ok = true;
      for (const auto& r : results) {
        worst = std::max(worst, r.error);
        all_ok = all_ok && r.passed();
      }
      std::cout << "max relative error " << worst << '\n';
      return worst < 1e-4 && all_ok ? 0 : 1;
    }

    if (*export_cmd) {
      if (!fs::exists(export_ckpt)) throw MissingInput("checkpoint not found: '" + export_ckpt + "'");
      const auto data = load_dataset(export_data);
      if (export_sample >= data.size()) throw std::out_of_range("--sample beyond dataset size");
      auto model = model::Model<float>::load(export_ckpt);
      auto& blocks = model.blocks();
      if (export_block >= blocks.size()) throw std::out_of_range("--block: model has " + std::to_string(blocks.size()) + " DPBs");
      Graph<float> g;
      g.set_recording(false);
      std::vector<io::RgbImage> images{data.images[export_sample]};
      std::vector<parts::RawParsingMap> labels{data.labels[export_sample]};
      std::vector<dpb::DpbTrace<float>> traces;
      model.forward(g, Var<float>::constant(model::images_to_tensor<float>(images)), labels, ops::Mode::kEval, &traces);
      const auto sizes = model.config().stage_sizes();
      const auto [h, w] = sizes[blocks[export_block].stage - 1];
      const auto grouped = parts::resize_nearest(parts::group_labels(labels[0], model.config().grouping), h, w);
      const auto conf = parts::build_confidence_maps<float>(grouped);
      fs::create_directories(export_out);
      for (std::size_t k = 0; k < conf.k; ++k) {
        io::write_pgm(fs::path(export_out) / ("part_" + std::to_string(k) + ".pgm"),
                      {w, h, dpb::to_graymap<float>(std::span<const float>(conf.weights).subspan(k * h * w, h * w))});
      }
      const auto& att = traces[export_block].attention;
      if (!export_rows.empty() && att.empty()) throw std::invalid_argument("block has no latent branch");
      for (std::size_t r : export_rows) {
        if (r >= h * w) throw std::out_of_range("attention row " + std::to_string(r) + " >= " + std::to_string(h * w));
        io::write_pgm(fs::path(export_out) / ("attn_" + std::to_string(r) + ".pgm"),
                      {w, h, dpb::to_graymap<float>(std::span<const float>(att).subspan(r * h * w, h * w))});
      }
      std::cout << "wrote " << conf.k << " part maps and " << export_rows.size() << " attention rows to "
                << export_out << '\n';
      return 0;
    }

    if (*ablate_cmd) {
      const nlohmann::json file = ablate_model.config_file.empty() ? nlohmann::json::object()
                                                                   : read_json(ablate_model.config_file);
      ablate::Options opts;
      opts.backbone = ablate_model.backbone(file);
      opts.run = ablate_run.run(file);
      opts.stage = ablate_stage;
      opts.seeds = ablate_seeds;
      auto variants = ablate::standard_variants(ablate_masked);
      if (!ablate_only.empty()) {
        std::vector<ablate::Variant> picked;
        for (const auto& n : ablate_only) picked.push_back(ablate::find_variant(variants, n));
        variants = picked;
      }
      std::map<std::uint64_t, data::Dataset> cache;
      std::optional<data::Dataset> fixed;
      if (!ablate_data.empty()) fixed = load_dataset(ablate_data);
      const auto base_spec = ablate_synth.resolve();
      const auto dataset_for = [&](std::uint64_t seed) -> const data::Dataset& {
        if (fixed) return *fixed;
        auto it = cache.find(seed);
        if (it == cache.end()) {
          auto spec = base_spec;
          spec.seed = base_spec.seed + seed;
          it = cache.emplace(seed, synth::render_dataset(spec)).first;
        }
        return it->second;
      };
      const auto rows = ablate::run(opts, variants, dataset_for, &std::cerr);
      std::cout << ablate::format_table(rows, ablate_stage);
      return 0;
    }
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissingInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
