#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "partreid/ablate.hpp"
#include "partreid/dpb.hpp"
#include "partreid/gradsuite.hpp"
#include "partreid/losses.hpp"
#include "partreid/metrics.hpp"
#include "partreid/model.hpp"
#include "partreid/synth.hpp"
#include "partreid/train.hpp"

using namespace partreid;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradElementaryTolerance = 1e-6;
constexpr double kGradSeconds = 120.0;
constexpr double kRowSumTolerance = 1e-6;
constexpr double kMeanTolerance = 1e-6;
constexpr double kMetricTolerance = 1e-12;
constexpr double kExperimentSeconds = 15.0 * 60.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

Tensor<double> random_map(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng, double sd) {
  Tensor<double> t(Shape{b, c, h, w});
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.data()) v = n(rng);
  return t;
}

dpb::PartInputs<double> random_parts(std::size_t b, std::size_t h, std::size_t w, std::size_t k, std::mt19937_64& rng) {
  std::vector<parts::PartLabelMap> labels;
  for (std::size_t i = 0; i < b; ++i) {
    parts::PartLabelMap m{w, h, k, std::vector<std::uint8_t>(w * h)};
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % k);
    labels.push_back(std::move(m));
  }
  return dpb::PartInputs<double>::from_labels(std::move(labels));
}

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = gradsuite::run_suite(0);
  const double secs = seconds_since(t0);
  double worst = 0, worst_elem = 0;
  bool ok = secs < kGradSeconds;
  for (const auto& r : results) {
    const double tol = r.elementary ? kGradElementaryTolerance : kGradTolerance;
    ok = ok && r.error < tol;
    (r.elementary ? worst_elem : worst) = std::max(r.elementary ? worst_elem : worst, r.error);
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu checks, max elementary %.2e, max composite %.2e, %.1fs", results.size(),
                worst_elem, worst, secs);
  return {ok, buf};
}

Verdict attention_normalization() {
  std::mt19937_64 rng(101);
  double worst = 0;
  bool zero_rows_ok = true, masked_keys_ok = true;
  std::size_t zero_rows = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    dpb::DpbConfig cfg;
    cfg.channels = 2 * (1 + rng() % 4);
    cfg.k = 5;
    cfg.zero_init_projection = false;
    auto params = dpb::DpbParams<double>::init(cfg, trial, "acc");
    const std::size_t b = 1 + rng() % 2, h = 1 + rng() % 5, w = 1 + rng() % 5, n = h * w;
    const auto x = Var<double>::constant(random_map(b, cfg.channels, h, w, rng, 0.5 + 2.0 * (rng() % 4)));
    const bool masked = trial % 2 == 1;
    std::vector<std::uint8_t> mask(b * n, 1);
    if (masked) {
      for (auto& m : mask) m = rng() % 2;
    }
    dpb::DpbTrace<double> trace;
    Graph<double> g;
    g.set_recording(false);
    if (masked) {
      dpb::latent_branch_masked<double>(g, x, mask, params, ops::Mode::kEval, true, &trace);
    } else {
      dpb::latent_branch(g, x, params, ops::Mode::kEval, &trace);
    }
    for (std::size_t bi = 0; bi < b; ++bi) {
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) any = any || mask[bi * n + j];
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = &trace.attention[(bi * n + i) * n];
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask[bi * n + j] && row[j] != 0.0) masked_keys_ok = false;
          s += row[j];
        }
        if (mask[bi * n + i] && any) {
          worst = std::max(worst, std::abs(s - 1.0));
        } else {
          ++zero_rows;
          for (std::size_t j = 0; j < n; ++j) zero_rows_ok = zero_rows_ok && row[j] == 0.0;
        }
      }
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "1000 inputs, max |row sum - 1| %.2e, %zu zero rows exact=%s, masked keys zero=%s",
                worst, zero_rows, zero_rows_ok ? "yes" : "no", masked_keys_ok ? "yes" : "no");
  return {worst < kRowSumTolerance && zero_rows_ok && masked_keys_ok, buf};
}

Verdict human_structure() {
  std::mt19937_64 rng(202);
  bool piecewise = true;
  double worst_mean = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 * (1 + rng() % 4), b = 1 + rng() % 2, h = 1 + rng() % 6, w = 1 + rng() % 6, n = h * w;
    const auto x = random_map(b, c, h, w, rng, 1.0);

    dpb::DpbConfig cfg;
    cfg.channels = c;
    cfg.k = 5;
    cfg.zero_init_projection = false;
    auto params = dpb::DpbParams<double>::init(cfg, trial, "acc");
    const auto parts = random_parts(b, h, w, 5, rng);
    Graph<double> g;
    g.set_recording(false);
    const auto y = dpb::human_branch(g, Var<double>::constant(x), parts, cfg, params, ops::Mode::kTrain).tensor();
    for (std::size_t bi = 0; bi < b; ++bi) {
      const auto& l = parts.labels[bi].labels;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
          if (l[i] != l[j]) continue;
          for (std::size_t ch = 0; ch < c; ++ch) {
            piecewise = piecewise && y[(bi * c + ch) * n + i] == y[(bi * c + ch) * n + j];
          }
        }
      }
    }

    dpb::DpbConfig flat;
    flat.channels = c;
    flat.k = 1;
    flat.g = dpb::TransformKind::kIdentity;
    flat.projection = dpb::TransformKind::kIdentity;
    auto flat_params = dpb::DpbParams<double>::init(flat, trial, "acc");
    const auto one = random_parts(b, h, w, 1, rng);
    Graph<double> g1;
    g1.set_recording(false);
    const auto z = dpb::human_branch(g1, Var<double>::constant(x), one, flat, flat_params, ops::Mode::kEval).tensor();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        long double mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += x[(bi * c + ch) * n + i];
        mean /= n;
        for (std::size_t i = 0; i < n; ++i) {
          worst_mean = std::max(worst_mean, std::abs(z[(bi * c + ch) * n + i] - static_cast<double>(mean)));
        }
      }
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "100 instances, piecewise constant bit-exact=%s, K=1 max |x - mean| %.2e",
                piecewise ? "yes" : "no", worst_mean);
  return {piecewise && worst_mean < kMeanTolerance, buf};
}

Verdict identity_at_init() {
  synth::SyntheticDatasetSpec spec;
  spec.num_identities = 8;
  spec.test_identities = 0;
  spec.images_per_identity = 2;
  const auto data = synth::render_dataset(spec);

  model::BackboneConfig base_cfg;
  base_cfg.num_identities = 8;
  base_cfg.seed = 7;
  auto dpb_cfg = base_cfg;
  dpb_cfg.insertions = {{2, 2}, {3, 3}};
  model::Model<float> base(base_cfg), with(dpb_cfg);
  with.copy_matching_from(base);

  std::vector<io::RgbImage> images(data.images.begin(), data.images.end());
  const auto x = Var<float>::constant(model::images_to_tensor<float>(images));
  bool identical = true;
  for (ops::Mode mode : {ops::Mode::kEval, ops::Mode::kTrain}) {
    Graph<float> g;
    g.set_recording(false);
    const auto a = base.forward(g, x, data.labels, mode).logits;
    const auto b = with.forward(g, x, data.labels, mode).logits;
    identical = identical && a.tensor().size() == b.tensor().size() &&
                std::memcmp(a.value().data(), b.value().data(), a.value().size() * sizeof(float)) == 0;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu DPBs at (2,2),(3,3), %zu images, logits bit-identical=%s",
                with.config().dpb_count(), images.size(), identical ? "yes" : "no");
  return {identical && with.config().dpb_count() == 5, buf};
}

Verdict metric_oracle() {
  std::mt19937_64 rng(303);
  double worst = 0;
  std::size_t compared = 0, edge = 0;
  bool agree = true;
  while (compared < 100) {
    auto [q, g] = oracle::random_sets(rng);
    const bool cross = rng() % 4 != 0;
    const std::size_t k_max = 1 + rng() % 20;
    const auto expected = oracle::brute_force_eval(q, g, k_max, cross);
    if (!expected) {
      bool threw = false;
      try {
        metrics::cmc_and_map(q, g, {k_max, cross});
      } catch (const std::runtime_error&) {
        threw = true;
      }
      agree = agree && threw;
      ++edge;
      continue;
    }
    const auto r = metrics::cmc_and_map(q, g, {k_max, cross});
    worst = std::max(worst, std::abs(r.map - expected->map));
    for (std::size_t k = 0; k < k_max; ++k) worst = std::max(worst, std::abs(r.cmc[k] - expected->cmc[k]));
    ++compared;
  }

  metrics::EmbeddingSet q, g;
  q.dim = g.dim = 1;
  q.values = {0.0};
  q.ids = {1};
  q.cameras = {0};
  q.junk = {0};
  g.values = {0.1, 0.2, 0.3, 0.4};
  g.ids = {1, 2, 1, 3};
  g.cameras = {1, 1, 1, 1};
  g.junk = {0, 0, 0, 0};
  const double ap = metrics::cmc_and_map(q, g).map;
  const bool exact = ap == (1.0 / 1.0 + 2.0 / 3.0) / 2.0;

  char buf[200];
  std::snprintf(buf, sizeof buf, "100 instances (+%zu with no valid query), max diff %.2e, AP example %.17g exact=%s",
                edge, worst, ap, exact ? "yes" : "no");
  return {agree && worst < kMetricTolerance && exact, buf};
}

Verdict triplet_oracle() {
  std::mt19937_64 rng(404);
  std::size_t batches = 0, mismatches = 0, largest = 0;
  for (std::size_t p = 2; p <= 32; ++p) {
    for (std::size_t k = 2; p * k <= 64; ++k) {
      for (int rep = 0; rep < 3; ++rep) {
        std::vector<int> labels;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t j = 0; j < k; ++j) labels.push_back(static_cast<int>(i));
        }
        std::shuffle(labels.begin(), labels.end(), rng);
        const std::size_t dim = 1 + rng() % 32;
        const double margin = 0.1 * static_cast<double>(rng() % 10);
        Tensor<double> e(Shape{p * k, dim});
        std::normal_distribution<double> n(0, 1);
        for (double& v : e.data()) v = n(rng);
        Graph<double> g;
        g.set_recording(false);
        const double got = loss::batch_hard_triplet(g, Var<double>::constant(e), labels, margin).tensor().item();
        const std::vector<double> flat(e.data().begin(), e.data().end());
        mismatches += got != oracle::batch_hard_triplet(flat, dim, labels, margin);
        ++batches;
        largest = std::max(largest, p * k);
      }
    }
  }
  bool margin_ok = true;
  for (double margin : {0.3, 0.5, 1.0}) {
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    Graph<double> g;
    g.set_recording(false);
    const double got =
        loss::batch_hard_triplet(g, Var<double>::constant(Tensor<double>(Shape{8, 16}, 0.7)), labels, margin)
            .tensor()
            .item();
    margin_ok = margin_ok && got == margin;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu batches up to B=%zu, %zu mismatches, identical embeddings give margin=%s",
                batches, largest, mismatches, margin_ok ? "yes" : "no");
  return {mismatches == 0 && margin_ok, buf};
}

// Harder synthetic setting: paired identities share outfits and differ by
// the background-labelled accessory, with heavy clutter and noise.
synth::SyntheticDatasetSpec experiment_spec() {
  synth::SyntheticDatasetSpec s;
  s.num_identities = 96;
  s.test_identities = 48;
  s.palette_size = 4;
  s.noise = 0.25;
  s.clutter = 4.0;
  s.pose_jitter = 1.5;
  s.paired_outfits = true;
  return s;
}

Verdict directional_experiment() {
  const auto t0 = Clock::now();
  ablate::Options opts;
  opts.run.epochs = 40;
  opts.stage = 2;
  opts.seeds = {0, 1, 2};
  const auto all = ablate::standard_variants();
  const std::vector<ablate::Variant> variants{ablate::find_variant(all, "Baseline"),
                                              ablate::find_variant(all, "DPB (HP-5)"),
                                              ablate::find_variant(all, "DPB (HP-5 + Latent)")};
  std::map<std::uint64_t, data::Dataset> cache;
  const auto dataset_for = [&](std::uint64_t seed) -> const data::Dataset& {
    auto it = cache.find(seed);
    if (it == cache.end()) {
      auto spec = experiment_spec();
      spec.seed = seed;
      it = cache.emplace(seed, synth::render_dataset(spec)).first;
    }
    return it->second;
  };
  const auto rows = ablate::run(opts, variants, dataset_for);
  const double secs = seconds_since(t0);
  const double base = rows[0].mean_recall1(), hp = rows[1].mean_recall1(), both = rows[2].mean_recall1();
  char buf[200];
  std::snprintf(buf, sizeof buf, "R-1 over 3 seeds: Baseline %.2f, HP-5 %.2f, HP-5+Latent %.2f; %.0fs", 100 * base,
                100 * hp, 100 * both, secs);
  return {base < hp && hp < both && secs <= kExperimentSeconds, buf};
}

Verdict determinism() {
  synth::SyntheticDatasetSpec spec;
  spec.num_identities = 24;
  spec.test_identities = 8;
  spec.images_per_identity = 4;
  const auto data = synth::render_dataset(spec);
  train::RunConfig run;
  run.p = 4;
  run.k = 4;
  run.epochs = 2;
  run.deterministic = true;
  run.seed = 5;
  model::BackboneConfig cfg;
  cfg.insertions = {{2, 1}};
  cfg.seed = 5;

  std::string logs[2];
  metrics::EvalResult evals[2];
  for (int i = 0; i < 2; ++i) {
    auto m = train::build_model(cfg, data);
    std::ostringstream log;
    train::train(run, data, m, &log);
    logs[i] = log.str();
    set_deterministic(true);
    evals[i] = train::evaluate(m, data);
    set_deterministic(false);
  }
  const bool same_log = !logs[0].empty() && logs[0] == logs[1];
  const bool same_eval = evals[0].cmc == evals[1].cmc && evals[0].map == evals[1].map &&
                         evals[0].average_precision == evals[1].average_precision;
  char buf[160];
  std::snprintf(buf, sizeof buf, "log %zu bytes identical=%s, EvalResult identical=%s (mAP %.4f)", logs[0].size(),
                same_log ? "yes" : "no", same_eval ? "yes" : "no", evals[0].map);
  return {same_log && same_eval, buf};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient-suite", gradient_suite},
      {"attention-normalization", attention_normalization},
      {"human-branch-structure", human_structure},
      {"identity-at-init", identity_at_init},
      {"metric-oracle", metric_oracle},
      {"triplet-oracle", triplet_oracle},
      {"directional-experiment", directional_experiment},
      {"determinism", determinism},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
