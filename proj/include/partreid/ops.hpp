#ifndef PARTREID_OPS_HPP_
#define PARTREID_OPS_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "partreid/kernels/kernels.hpp"
#include "partreid/tensor.hpp"

// Differentiable ops. Each op computes its output eagerly and, when any
// input requires a gradient, records a backward closure on the graph.
// Image tensors are [B,C,H,W]; rank-3 [C,H,W] inputs are treated as B=1
// and come back rank-3.
namespace partreid::ops {

using kernels::Trans;

template <Real T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad);

// 1x1 convolution with bias: y_i = W x_i + b at every pixel.
template <Real T>
Var<T> pointwise_linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b);

// Fully connected: x [B,D], w [O,D], b [O] -> [B,O].
template <Real T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <Real T>
struct BatchNormState {
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

enum class Mode { kTrain, kEval };

// Per-channel normalization over batch and spatial axes. x is [B,C,H,W],
// [C,H,W] or [B,C]. Train mode normalizes by batch statistics and updates
// the running statistics; eval mode uses the running statistics.
template <Real T>
Var<T> batch_norm(Graph<T>& g, const Var<T>& x, BatchNormState<T>& state, Mode mode, const Var<T>& gamma,
                  const Var<T>& beta);

template <Real T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <Real T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <Real T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor);
template <Real T>
Var<T> relu(Graph<T>& g, const Var<T>& x);
template <Real T>
Var<T> sum(Graph<T>& g, const Var<T>& x);
template <Real T>
Var<T> mean(Graph<T>& g, const Var<T>& x);

// Shares no storage with x; gradient passes straight through.
template <Real T>
Var<T> reshape(Graph<T>& g, const Var<T>& x, Shape shape);

// Softmax over the last axis of a rank-2 or rank-3 tensor.
template <Real T>
Var<T> softmax_rows(Graph<T>& g, const Var<T>& logits);

// Batched softmax over logits [B,N,M]. key_mask is B*M, row_mask is B*N
// (either may be empty). Masked keys get zero weight, masked or fully
// key-masked rows are all zero.
template <Real T>
Var<T> masked_softmax_rows(Graph<T>& g, const Var<T>& logits, std::span<const std::uint8_t> key_mask,
                           std::span<const std::uint8_t> row_mask);

// [B,C,H,W] -> [B,C]; [C,H,W] -> [C].
template <Real T>
Var<T> global_avg_pool(Graph<T>& g, const Var<T>& x);

// Batched product a [B,N,K] times b [B,K,M] (or b^T when tb = kYes and
// b is [B,M,K]). Rank-2 operands are treated as B=1.
template <Real T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b, Trans tb = Trans::kNo);

// [B,C,H,W] <-> [B,N,C] with N = H*W in row-major pixel order.
template <Real T>
Var<T> to_pixels(Graph<T>& g, const Var<T>& x);
template <Real T>
Var<T> from_pixels(Graph<T>& g, const Var<T>& x, std::size_t height, std::size_t width);

// out[b,i,:] = x[b, index[b*N + i], :] for x [B,K,C]; output [B,N,C].
template <Real T>
Var<T> gather_rows(Graph<T>& g, const Var<T>& x, std::span<const std::size_t> index, std::size_t rows_per_batch);

// Row-wise x / sqrt(||x||^2 + eps) for x [B,D].
template <Real T>
Var<T> l2_normalize_rows(Graph<T>& g, const Var<T>& x, T eps = T(1e-12));

}  // namespace partreid::ops

#endif  // PARTREID_OPS_HPP_
