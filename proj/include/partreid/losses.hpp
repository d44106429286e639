#ifndef PARTREID_LOSSES_HPP_
#define PARTREID_LOSSES_HPP_

#include <span>

#include "partreid/ops.hpp"

namespace partreid::loss {

// Mean over the batch of -log softmax(logits)[label]. logits is [B, num_ids].
template <Real T>
Var<T> softmax_ce(Graph<T>& g, const Var<T>& logits, std::span<const int> labels);

// Euclidean distance with 1e-12 inside the root: d = sqrt(||a-b||^2 + 1e-12).
inline constexpr double kDistanceEps = 1e-12;

// Batch-hard triplet loss over embeddings [B,D]:
//   mean_a max(0, margin + (max_{p~a, p!=a} d(a,p) - min_{n!~a} d(a,n))),
// with the mean accumulated in long double.
// Ties pick the lowest index. active_fraction, when given, receives the
// share of anchors with a positive hinge.
template <Real T>
Var<T> batch_hard_triplet(Graph<T>& g, const Var<T>& embeddings, std::span<const int> labels, T margin,
                          double* active_fraction = nullptr);

// Checks the P x K layout: >= 2 identities, each appearing the same number
// of times, and at least twice.
void validate_pk_batch(std::span<const int> labels);

struct TripletConfig {
  bool enabled = true;
  double margin = 0.3;
  // L2-normalize embeddings before mining.
  bool normalize = false;
};

template <Real T>
struct LossReport {
  Var<T> combined;
  double softmax_loss = 0.0;
  double triplet_loss = 0.0;
  double active_triplet_fraction = 0.0;
  double combined_value() const { return combined.tensor().item(); }
};

// combined = softmax_ce + batch_hard_triplet, weighted 1:1.
template <Real T>
LossReport<T> combined_loss(Graph<T>& g, const Var<T>& logits, const Var<T>& embeddings, std::span<const int> labels,
                            const TripletConfig& triplet);

}  // namespace partreid::loss

#endif  // PARTREID_LOSSES_HPP_
