#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "partreid/gradcheck.hpp"
#include "partreid/losses.hpp"
#include "test_util.hpp"

using namespace partreid;
using namespace partreid::loss;
using testutil::random_tensor;
using V = Var<double>;
using G = Graph<double>;

namespace {

std::vector<int> pk_labels(std::size_t p, std::size_t k, std::mt19937_64* shuffle = nullptr) {
  std::vector<int> l;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < k; ++j) l.push_back(static_cast<int>(i * 3 + 1));
  }
  if (shuffle) std::shuffle(l.begin(), l.end(), *shuffle);
  return l;
}

}  // namespace

TEST_SUITE("softmax_ce") {
  TEST_CASE("uniform logits over four classes give ln 4") {
    G g;
    const std::vector<int> labels{0, 3};
    const auto l = softmax_ce(g, V::constant(Tensor<double>(Shape{2, 4}, 0.7)), labels);
    CHECK(l.tensor().item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }

  TEST_CASE("a huge correct logit drives the loss to zero") {
    G g;
    const std::vector<int> labels{1};
    const auto l = softmax_ce(g, V::constant(Tensor<double>(Shape{1, 3}, std::vector<double>{0, 1000, 0})), labels);
    CHECK(l.tensor().item() < 1e-12);
    CHECK(std::isfinite(l.tensor().item()));
  }

  TEST_CASE("random logits match a long double log-sum-exp") {
    std::mt19937_64 rng(1);
    const auto x = random_tensor<double>({3, 5}, rng, 3.0);
    const std::vector<int> labels{4, 0, 2};
    G g;
    const auto l = softmax_ce(g, V::constant(x), labels);
    long double total = 0;
    for (std::size_t b = 0; b < 3; ++b) {
      long double z = 0;
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(x[b * 5 + c]));
      total += std::log(z) - x[b * 5 + labels[b]];
    }
    CHECK(std::abs(l.tensor().item() - static_cast<double>(total / 3)) < 1e-14);
  }

  TEST_CASE("gradient matches finite differences") {
    std::mt19937_64 rng(2);
    auto x = V::parameter(random_tensor<double>({4, 6}, rng));
    const std::vector<int> labels{0, 5, 2, 2};
    CHECK(grad_check([&](G& g) { return softmax_ce(g, x, labels); }, {x}) < 1e-6);
  }

  TEST_CASE("bad labels and shapes are rejected") {
    G g;
    const std::vector<int> bad{3};
    CHECK_THROWS_AS(softmax_ce(g, V::constant(Tensor<double>(Shape{1, 3})), bad), std::out_of_range);
    const std::vector<int> two{0, 1};
    CHECK_THROWS_AS(softmax_ce(g, V::constant(Tensor<double>(Shape{1, 3})), two), DimensionError);
  }
}

TEST_SUITE("batch_hard_triplet") {
  TEST_CASE("identical embeddings give exactly the margin") {
    for (double margin : {0.3, 1.0, 0.05}) {
      G g;
      const auto labels = pk_labels(4, 4);
      const auto l = batch_hard_triplet(g, V::constant(Tensor<double>(Shape{16, 8}, 0.25)), labels, margin);
      CHECK(l.tensor().item() == margin);
    }
  }

  TEST_CASE("well separated classes give zero loss") {
    std::mt19937_64 rng(3);
    const auto labels = pk_labels(3, 4);
    auto x = random_tensor<double>({12, 4}, rng, 0.01);
    for (std::size_t i = 0; i < 12; ++i) x[i * 4] += 100.0 * (labels[i] / 3);
    G g;
    double active = -1;
    const auto l = batch_hard_triplet(g, V::constant(x), labels, 0.3, &active);
    CHECK(l.tensor().item() == 0.0);
    CHECK(active == 0.0);
  }

  TEST_CASE("2 classes x 3 instances match the exhaustive scan") {
    std::mt19937_64 rng(4);
    const std::vector<int> labels{0, 0, 0, 1, 1, 1};
    const auto x = random_tensor<double>({6, 3}, rng);
    G g;
    const auto l = batch_hard_triplet(g, V::constant(x), labels, 0.3);
    const std::vector<double> e(x.data().begin(), x.data().end());
    CHECK(l.tensor().item() == oracle::batch_hard_triplet(e, 3, labels, 0.3));
  }

  TEST_CASE("random PK batches up to 64 match the exhaustive scan exactly") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t p = 2 + rng() % 15;
      const std::size_t k = 2 + rng() % (64 / p - 1);
      const std::size_t dim = 1 + rng() % 16;
      const auto labels = pk_labels(p, k, &rng);
      const auto x = random_tensor<double>({p * k, dim}, rng);
      const double margin = 0.1 * static_cast<double>(rng() % 10);
      G g;
      const auto l = batch_hard_triplet(g, V::constant(x), labels, margin);
      const std::vector<double> e(x.data().begin(), x.data().end());
      CHECK(l.tensor().item() == oracle::batch_hard_triplet(e, dim, labels, margin));
    }
  }

  TEST_CASE("gradient matches finite differences when every hinge is active") {
    std::mt19937_64 rng(6);
    auto x = V::parameter(random_tensor<double>({6, 4}, rng));
    const std::vector<int> labels{0, 1, 2, 0, 1, 2};
    CHECK(grad_check([&](G& g) { return batch_hard_triplet(g, x, labels, 5.0); }, {x}, 1e-5) < 1e-6);
  }

  TEST_CASE("batches without positives or negatives are rejected") {
    G g;
    const std::vector<int> single{0, 1, 1};
    CHECK_THROWS_AS(batch_hard_triplet(g, V::constant(Tensor<double>(Shape{3, 2})), single, 0.3), std::invalid_argument);
    const std::vector<int> one_id{2, 2};
    CHECK_THROWS_AS(batch_hard_triplet(g, V::constant(Tensor<double>(Shape{2, 2})), one_id, 0.3), std::invalid_argument);
  }
}

TEST_SUITE("combined_loss") {
  TEST_CASE("disabled triplet leaves only the softmax term") {
    std::mt19937_64 rng(7);
    const auto logits = V::constant(random_tensor<double>({4, 3}, rng));
    const auto emb = V::constant(random_tensor<double>({4, 5}, rng));
    const std::vector<int> labels{0, 0, 1, 1};
    TripletConfig cfg;
    cfg.enabled = false;
    G g;
    const auto r = combined_loss(g, logits, emb, labels, cfg);
    G g2;
    CHECK(r.combined_value() == softmax_ce(g2, logits, labels).tensor().item());
    CHECK(r.triplet_loss == 0.0);
  }

  TEST_CASE("identical embeddings and uniform logits give ln 4 plus the margin") {
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    TripletConfig cfg;
    cfg.margin = 0.3;
    G g;
    const auto r = combined_loss(g, V::constant(Tensor<double>(Shape{8, 4}, 0.0)),
                                 V::constant(Tensor<double>(Shape{8, 6}, 1.5)), labels, cfg);
    CHECK(r.softmax_loss == doctest::Approx(std::log(4.0)).epsilon(1e-15));
    CHECK(r.triplet_loss == 0.3);
    CHECK(r.combined_value() == doctest::Approx(std::log(4.0) + 0.3).epsilon(1e-15));
    CHECK(r.active_triplet_fraction == 1.0);
  }

  TEST_CASE("16x4 PK batches are accepted and 16x1 rejected") {
    CHECK_NOTHROW(validate_pk_batch(pk_labels(16, 4)));
    CHECK_THROWS_AS(validate_pk_batch(pk_labels(16, 1)), std::invalid_argument);
    CHECK_THROWS_AS(validate_pk_batch(pk_labels(1, 4)), std::invalid_argument);
    const std::vector<int> uneven{0, 0, 1, 1, 1};
    CHECK_THROWS_AS(validate_pk_batch(uneven), std::invalid_argument);
  }

  TEST_CASE("normalized embeddings are mined on the unit sphere") {
    std::mt19937_64 rng(8);
    const auto x = random_tensor<double>({6, 3}, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    TripletConfig cfg;
    cfg.normalize = true;
    G g;
    const auto r = combined_loss(g, V::constant(random_tensor<double>({6, 3}, rng)), V::constant(x), labels, cfg);
    std::vector<double> unit(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < 6; ++i) {
      double n = 0;
      for (std::size_t d = 0; d < 3; ++d) n += unit[i * 3 + d] * unit[i * 3 + d];
      for (std::size_t d = 0; d < 3; ++d) unit[i * 3 + d] /= std::sqrt(n + 1e-12);
    }
    CHECK(r.triplet_loss == doctest::Approx(oracle::batch_hard_triplet(unit, 3, labels, 0.3)).epsilon(1e-12));
  }
}
