#include "partreid/losses.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace partreid::loss {

template <Real T>
Var<T> softmax_ce(Graph<T>& g, const Var<T>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("softmax_ce: logits must be [B,C], got " + shape_string(s));
  const std::size_t nb = s[0], nc = s[1];
  if (labels.size() != nb) throw DimensionError("softmax_ce: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(nb));
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= nc) {
      throw std::out_of_range("softmax_ce: label " + std::to_string(l) + " outside [0," + std::to_string(nc) + ")");
    }
  }
  std::vector<T> probs(nb * nc);
  const auto x = logits.value();
  T total = T(0);
  for (std::size_t b = 0; b < nb; ++b) {
    const T* row = x.data() + b * nc;
    T mx = row[0];
    for (std::size_t c = 1; c < nc; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (std::size_t c = 0; c < nc; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    total += lse - row[labels[b]];
    for (std::size_t c = 0; c < nc; ++c) probs[b * nc + c] = std::exp(row[c] - lse);
  }
  const bool track = g.needs_grad({&logits});
  Var<T> out(Tensor<T>::scalar(total / static_cast<T>(nb)));
  if (track) {
    out->set_requires_grad(true);
    std::vector<int> lab(labels.begin(), labels.end());
    g.record("softmax_ce", [logits, out, probs = std::move(probs), lab = std::move(lab), nb, nc]() {
      const T gy = out->grad()[0] / static_cast<T>(nb);
      auto gx = logits->grad();
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t c = 0; c < nc; ++c) {
          const T target = static_cast<int>(c) == lab[b] ? T(1) : T(0);
          gx[b * nc + c] += gy * (probs[b * nc + c] - target);
        }
      }
    });
  }
  return out;
}

template <Real T>
Var<T> batch_hard_triplet(Graph<T>& g, const Var<T>& embeddings, std::span<const int> labels, T margin,
                          double* active_fraction) {
  const Shape& s = embeddings.shape();
  if (s.size() != 2) throw DimensionError("batch_hard_triplet: embeddings must be [B,D], got " + shape_string(s));
  const std::size_t nb = s[0], d = s[1];
  if (labels.size() != nb) throw DimensionError("batch_hard_triplet: label count does not match batch");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  for (const auto& [id, c] : counts) {
    if (c < 2) throw std::invalid_argument("batch_hard_triplet: identity " + std::to_string(id) + " has no positive");
  }
  if (counts.size() < 2) throw std::invalid_argument("batch_hard_triplet: batch needs at least two identities");

  std::vector<T> dist(nb * nb);
  kernels::pairwise_sqdist<T>(nb, nb, d, embeddings.value(), embeddings.value(), dist);
  for (T& v : dist) v = std::sqrt(v + static_cast<T>(kDistanceEps));

  std::vector<std::size_t> pos(nb), neg(nb);
  std::vector<std::uint8_t> active(nb, 0);
  long double total = 0;
  std::size_t n_active = 0;
  for (std::size_t a = 0; a < nb; ++a) {
    T hardest_pos = -std::numeric_limits<T>::infinity();
    T hardest_neg = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < nb; ++j) {
      const T dj = dist[a * nb + j];
      if (labels[j] == labels[a]) {
        if (j != a && dj > hardest_pos) hardest_pos = dj, pos[a] = j;
      } else if (dj < hardest_neg) {
        hardest_neg = dj, neg[a] = j;
      }
    }
    const T hinge = margin + (hardest_pos - hardest_neg);
    if (hinge > T(0)) {
      total += hinge;
      active[a] = 1;
      ++n_active;
    }
  }
  if (active_fraction) *active_fraction = static_cast<double>(n_active) / static_cast<double>(nb);

  const bool track = g.needs_grad({&embeddings});
  Var<T> out(Tensor<T>::scalar(static_cast<T>(total / static_cast<long double>(nb))));
  if (track) {
    out->set_requires_grad(true);
    g.record("batch_hard_triplet", [embeddings, out, dist = std::move(dist), pos = std::move(pos), neg = std::move(neg),
                                    active = std::move(active), nb, d]() {
      const T scale = out->grad()[0] / static_cast<T>(nb);
      const auto x = embeddings.value();
      auto gx = embeddings->grad();
      for (std::size_t a = 0; a < nb; ++a) {
        if (!active[a]) continue;
        const std::size_t p = pos[a], n = neg[a];
        const T dp = dist[a * nb + p], dn = dist[a * nb + n];
        for (std::size_t i = 0; i < d; ++i) {
          const T up = (x[a * d + i] - x[p * d + i]) / dp;
          const T un = (x[a * d + i] - x[n * d + i]) / dn;
          gx[a * d + i] += scale * (up - un);
          gx[p * d + i] -= scale * up;
          gx[n * d + i] += scale * un;
        }
      }
    });
  }
  return out;
}

void validate_pk_batch(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw std::invalid_argument("PK batch needs at least two identities");
  const std::size_t k = counts.begin()->second;
  for (const auto& [id, c] : counts) {
    if (c < 2) {
      throw std::invalid_argument("PK batch: identity " + std::to_string(id) + " appears once; triplet mining needs K >= 2");
    }
    if (c != k) throw std::invalid_argument("PK batch: identities appear an unequal number of times");
  }
}

template <Real T>
LossReport<T> combined_loss(Graph<T>& g, const Var<T>& logits, const Var<T>& embeddings, std::span<const int> labels,
                            const TripletConfig& triplet) {
  LossReport<T> r;
  Var<T> ce = softmax_ce(g, logits, labels);
  r.softmax_loss = ce.tensor().item();
  if (!triplet.enabled) {
    r.combined = ce;
    return r;
  }
  validate_pk_batch(labels);
  Var<T> emb = triplet.normalize ? ops::l2_normalize_rows(g, embeddings) : embeddings;
  Var<T> tl = batch_hard_triplet(g, emb, labels, static_cast<T>(triplet.margin), &r.active_triplet_fraction);
  r.triplet_loss = tl.tensor().item();
  r.combined = ops::add(g, ce, tl);
  return r;
}

template Var<float> softmax_ce(Graph<float>&, const Var<float>&, std::span<const int>);
template Var<double> softmax_ce(Graph<double>&, const Var<double>&, std::span<const int>);
template Var<float> batch_hard_triplet(Graph<float>&, const Var<float>&, std::span<const int>, float, double*);
template Var<double> batch_hard_triplet(Graph<double>&, const Var<double>&, std::span<const int>, double, double*);
template LossReport<float> combined_loss(Graph<float>&, const Var<float>&, const Var<float>&, std::span<const int>,
                                         const TripletConfig&);
template LossReport<double> combined_loss(Graph<double>&, const Var<double>&, const Var<double>&, std::span<const int>,
                                          const TripletConfig&);

}  // namespace partreid::loss
