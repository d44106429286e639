#include "partreid/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <memory>
#include <random>

#include "partreid/dpb.hpp"
#include "partreid/init.hpp"
#include "partreid/losses.hpp"
#include "partreid/ops.hpp"

namespace partreid::gradsuite {

namespace {

using V = Var<double>;
using G = Graph<double>;

struct Rng {
  std::mt19937_64 engine;

  Tensor<double> normal(Shape shape, double sd = 1.0) {
    Tensor<double> t(std::move(shape));
    std::normal_distribution<double> d(0.0, sd);
    for (double& v : t.data()) v = d(engine);
    return t;
  }
  // Normal values pushed at least `gap` away from zero.
  Tensor<double> away_from_zero(Shape shape, double gap) {
    Tensor<double> t = normal(std::move(shape));
    for (double& v : t.data()) v += v < 0 ? -gap : gap;
    return t;
  }
  V param(Shape shape, double sd = 1.0) { return V::parameter(normal(std::move(shape), sd)); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine); }
};

// sum(w * y) with fixed random weights, so every output entry matters and
// the loss is not invariant along any direction by construction.
V weighted_sum(G& g, const V& y, std::uint64_t seed) {
  Rng r{std::mt19937_64(seed)};
  return ops::sum(g, ops::mul(g, y, V::constant(r.normal(y.shape()))));
}

dpb::DpbParams<double> dpb_params(const dpb::DpbConfig& c, std::uint64_t seed) {
  auto p = dpb::DpbParams<double>::init(c, seed, "check");
  return p;
}

std::vector<V> with_params(std::vector<V> inputs, const dpb::DpbParams<double>& p) {
  for (auto& [name, v] : p.named_parameters("check")) inputs.push_back(v);
  return inputs;
}

std::vector<parts::PartLabelMap> random_labels(Rng& r, std::size_t batch, std::size_t h, std::size_t w,
                                               std::size_t k) {
  std::vector<parts::PartLabelMap> out;
  for (std::size_t b = 0; b < batch; ++b) {
    parts::PartLabelMap m{w, h, k, std::vector<std::uint8_t>(h * w)};
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(r.index(k));
    out.push_back(std::move(m));
  }
  return out;
}

dpb::DpbConfig check_config(std::size_t channels, std::size_t k) {
  dpb::DpbConfig c;
  c.channels = channels;
  c.k = k;
  c.zero_init_projection = false;
  return c;
}

}  // namespace

std::vector<Case> standard_cases(std::uint64_t seed) {
  std::vector<Case> cases;
  const auto rng_for = [seed](const std::string& name) { return Rng{stream_rng(seed, fnv1a(name))}; };
  const auto add = [&](std::string name, double tol, bool elementary, double eps,
                       std::function<GradCheckResult(double)> fn) {
    cases.push_back({std::move(name), tol, elementary, eps, std::move(fn)});
  };
  const auto simple = [&](std::string name, std::vector<V> params, std::function<V(G&)> out, double eps = 1e-3) {
    const std::uint64_t wseed = fnv1a(name) ^ seed;
    add(name, 1e-6, true, eps, [params, out, wseed](double e) {
      return grad_check_report([&](G& g) { return weighted_sum(g, out(g), wseed); }, params, e);
    });
  };

  {
    Rng r = rng_for("conv");
    V x = r.param({2, 3, 4, 4}), w = r.param({4, 3, 3, 3}), w1 = r.param({5, 3, 1, 1});
    simple("conv2d 3x3 stride 1 pad 1", {x, w}, [=](G& g) { return ops::conv2d(g, x, w, 1, 1); });
    simple("conv2d 3x3 stride 2 pad 1", {x, w}, [=](G& g) { return ops::conv2d(g, x, w, 2, 1); });
    simple("conv2d 3x3 stride 1 pad 0", {x, w}, [=](G& g) { return ops::conv2d(g, x, w, 1, 0); });
    simple("conv2d 1x1", {x, w1}, [=](G& g) { return ops::conv2d(g, x, w1, 1, 0); });
  }
  {
    Rng r = rng_for("linear");
    V x = r.param({2, 4, 4, 4}), w = r.param({3, 4}), b = r.param({3});
    simple("pointwise_linear", {x, w, b}, [=](G& g) { return ops::pointwise_linear(g, x, w, b); });
    V x2 = r.param({3, 5}), w2 = r.param({4, 5}), b2 = r.param({4});
    simple("linear", {x2, w2, b2}, [=](G& g) { return ops::linear(g, x2, w2, b2); });
  }
  {
    Rng r = rng_for("batch_norm");
    V x = r.param({2, 3, 4, 4}), gamma = r.param({3}), beta = r.param({3});
    auto st = std::make_shared<ops::BatchNormState<double>>(3);
    simple("batch_norm train [B,C,H,W]", {x, gamma, beta},
           [=](G& g) { return ops::batch_norm(g, x, *st, ops::Mode::kTrain, gamma, beta); }, 1e-4);
    auto st_eval = std::make_shared<ops::BatchNormState<double>>(3);
    for (double& v : st_eval->running_var.data()) v = 0.5 + r.index(100) / 50.0;
    for (double& v : st_eval->running_mean.data()) v = r.index(100) / 100.0 - 0.5;
    simple("batch_norm eval [B,C,H,W]", {x, gamma, beta},
           [=](G& g) { return ops::batch_norm(g, x, *st_eval, ops::Mode::kEval, gamma, beta); });
    V x2 = r.param({6, 4}), gamma2 = r.param({4}), beta2 = r.param({4});
    auto st2 = std::make_shared<ops::BatchNormState<double>>(4);
    simple("batch_norm train [B,D]", {x2, gamma2, beta2},
           [=](G& g) { return ops::batch_norm(g, x2, *st2, ops::Mode::kTrain, gamma2, beta2); }, 1e-4);
  }
  {
    Rng r = rng_for("elementwise");
    V a = r.param({2, 3, 4, 4}), b = r.param({2, 3, 4, 4});
    V c = V::parameter(r.away_from_zero({2, 3, 4, 4}, 0.05));
    simple("add", {a, b}, [=](G& g) { return ops::add(g, a, b); });
    simple("mul", {a, b}, [=](G& g) { return ops::mul(g, a, b); });
    simple("scale", {a}, [=](G& g) { return ops::scale(g, a, -1.7); });
    simple("relu", {c}, [=](G& g) { return ops::relu(g, c); });
    simple("sum", {a}, [=](G& g) { return ops::scale(g, ops::sum(g, a), 0.37); });
    simple("mean", {a}, [=](G& g) { return ops::scale(g, ops::mean(g, a), 2.3); });
    simple("reshape", {a}, [=](G& g) { return ops::reshape(g, a, Shape{6, 16}); });
    simple("global_avg_pool", {a}, [=](G& g) { return ops::global_avg_pool(g, a); });
  }
  {
    Rng r = rng_for("softmax");
    V l = r.param({5, 7}, 2.0), l3 = r.param({2, 4, 6}, 2.0);
    simple("softmax_rows", {l}, [=](G& g) { return ops::softmax_rows(g, l); });
    simple("softmax_rows batched", {l3}, [=](G& g) { return ops::softmax_rows(g, l3); });
    auto keys = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0});
    auto rows = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 1, 0, 1, 1, 0, 1, 1});
    simple("masked_softmax_rows", {l3}, [=](G& g) { return ops::masked_softmax_rows(g, l3, *keys, *rows); });
  }
  {
    Rng r = rng_for("matmul");
    V a = r.param({2, 3, 4}), b = r.param({2, 4, 5}), bt = r.param({2, 5, 4});
    V a2 = r.param({3, 4}), b2 = r.param({4, 2});
    simple("matmul", {a, b}, [=](G& g) { return ops::matmul(g, a, b); });
    simple("matmul transposed", {a, bt}, [=](G& g) { return ops::matmul(g, a, bt, ops::Trans::kYes); });
    simple("matmul rank 2", {a2, b2}, [=](G& g) { return ops::matmul(g, a2, b2); });
  }
  {
    Rng r = rng_for("layout");
    V x = r.param({2, 3, 4, 4}), p = r.param({2, 16, 3}), rows = r.param({2, 5, 3});
    auto index = std::make_shared<std::vector<std::size_t>>(2 * 16);
    for (auto& i : *index) i = r.index(5);
    simple("to_pixels", {x}, [=](G& g) { return ops::to_pixels(g, x); });
    simple("from_pixels", {p}, [=](G& g) { return ops::from_pixels(g, p, 4, 4); });
    simple("gather_rows", {rows}, [=](G& g) { return ops::gather_rows(g, rows, *index, 16); });
    V e = r.param({6, 5});
    simple("l2_normalize_rows", {e}, [=](G& g) { return ops::l2_normalize_rows(g, e); }, 1e-4);
  }

  // Composite blocks at 4x4, C = 6; the ReLU in g and psi makes these
  // piecewise smooth, hence the smaller step and looser bound.
  {
    Rng r = rng_for("human_branch");
    auto cfg = check_config(6, 5);
    cfg.enable_latent = false;
    auto params = std::make_shared<dpb::DpbParams<double>>(dpb_params(cfg, seed));
    auto parts = std::make_shared<dpb::PartInputs<double>>(
        dpb::PartInputs<double>::from_labels(random_labels(r, 2, 4, 4, 5)));
    V x = r.param({2, 6, 4, 4});
    const std::uint64_t ws = seed ^ 11;
    add("human_branch", 1e-4, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) {
            return weighted_sum(g, dpb::human_branch(g, x, *parts, cfg, *params, ops::Mode::kTrain), ws);
          },
          with_params({x}, *params), e);
    });
  }
  {
    Rng r = rng_for("latent_branch");
    auto cfg = check_config(6, 5);
    cfg.enable_human = false;
    auto params = std::make_shared<dpb::DpbParams<double>>(dpb_params(cfg, seed));
    V x = r.param({2, 6, 4, 4});
    const std::uint64_t ws = seed ^ 12;
    add("latent_branch", 1e-4, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) { return weighted_sum(g, dpb::latent_branch(g, x, *params, ops::Mode::kTrain), ws); },
          with_params({x}, *params), e);
    });
    auto mask = std::make_shared<std::vector<std::uint8_t>>(2 * 16);
    for (auto& m : *mask) m = static_cast<std::uint8_t>(r.index(2));
    for (bool queries : {true, false}) {
      add(queries ? "latent_branch_masked" : "latent_branch_masked keys only", 1e-4, false, 1e-5, [=](double e) {
        return grad_check_report(
            [&](G& g) {
              return weighted_sum(
                  g, dpb::latent_branch_masked(g, x, *mask, *params, ops::Mode::kTrain, queries), ws);
            },
            with_params({x}, *params), e);
      });
    }
  }
  {
    Rng r = rng_for("dpb_forward");
    auto cfg = check_config(6, 5);
    auto params = std::make_shared<dpb::DpbParams<double>>(dpb_params(cfg, seed));
    auto parts = std::make_shared<dpb::PartInputs<double>>(
        dpb::PartInputs<double>::from_labels(random_labels(r, 2, 4, 4, 5)));
    V x = r.param({2, 6, 4, 4});
    const std::uint64_t ws = seed ^ 13;
    add("dpb_forward", 1e-4, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) {
            return weighted_sum(g, dpb::dpb_forward(g, x, *parts, cfg, *params, ops::Mode::kTrain), ws);
          },
          with_params({x}, *params), e);
    });
    auto mcfg = cfg;
    mcfg.latent_mask = dpb::LatentMask::kKeepNonHumanOnly;
    add("dpb_forward masked latent", 1e-4, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) {
            return weighted_sum(g, dpb::dpb_forward(g, x, *parts, mcfg, *params, ops::Mode::kTrain), ws);
          },
          with_params({x}, *params), e);
    });
  }
  {
    Rng r = rng_for("losses");
    V logits = r.param({6, 5}, 2.0), emb = r.param({6, 4});
    auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 0, 3, 3, 1, 1});
    add("softmax_ce", 1e-5, false, 1e-3, [=](double e) {
      return grad_check_report([&](G& g) { return loss::softmax_ce(g, logits, *labels); }, {logits}, e);
    });
    // A large margin keeps every hinge active, away from its kink.
    add("batch_hard_triplet", 1e-5, false, 1e-5, [=](double e) {
      return grad_check_report([&](G& g) { return loss::batch_hard_triplet(g, emb, *labels, 5.0); }, {emb}, e);
    });
    add("combined_loss", 1e-5, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) {
            return loss::combined_loss(g, logits, emb, *labels, loss::TripletConfig{true, 5.0, false}).combined;
          },
          {logits, emb}, e);
    });
    add("combined_loss normalized", 1e-5, false, 1e-5, [=](double e) {
      return grad_check_report(
          [&](G& g) {
            return loss::combined_loss(g, logits, emb, *labels, loss::TripletConfig{true, 1.5, true}).combined;
          },
          {logits, emb}, e);
    });
  }
  return cases;
}

std::vector<CaseResult> run_suite(std::uint64_t seed, std::ostream* progress) {
  std::vector<CaseResult> out;
  for (const auto& c : standard_cases(seed)) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckResult r = c.run(c.eps);
    CaseResult cr{c.name, r.max_relative_error, c.tolerance, c.elementary,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    if (progress) {
      *progress << std::left << std::setw(36) << c.name << " max_rel_err " << std::scientific << std::setprecision(3)
                << cr.error << "  (< " << c.tolerance << ")  " << (cr.passed() ? "ok" : "FAILED") << std::defaultfloat
                << '\n';
    }
    out.push_back(cr);
  }
  return out;
}

}  // namespace partreid::gradsuite
