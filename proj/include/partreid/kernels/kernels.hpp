#ifndef PARTREID_KERNELS_KERNELS_HPP_
#define PARTREID_KERNELS_KERNELS_HPP_

#include <cstddef>
#include <cstdint>
#include <span>

#include "partreid/tensor.hpp"

// Raw compute kernels. Every kernel exists twice: a serial reference in
// kernels::ref and an OpenMP version in kernels::omp. The omp variants only
// split work across independent outputs, so per-element summation order is
// fixed and results do not depend on the thread count. gemm, conv2d_forward,
// softmax_rows and pairwise_sqdist additionally match ref bit for bit.
namespace partreid::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel * kernel; }
};

// Matrix operand layout for gemm: row-major, optionally transposed.
enum class Trans : std::uint8_t { kNo, kYes };

#define PARTREID_KERNEL_DECLS                                                                        \
  /* C[M,N] (+)= op(A) * op(B); op(A) is MxK, op(B) is KxN. */                                      \
  template <Real T>                                                                                 \
  void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,  \
            std::span<const T> b, std::span<T> c, bool accumulate);                                 \
  template <Real T>                                                                                 \
  void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> w,           \
                      std::span<T> out);                                                            \
  /* Accumulates into grad_in. */                                                                   \
  template <Real T>                                                                                 \
  void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out,                    \
                             std::span<const T> w, std::span<T> grad_in);                           \
  /* Accumulates into grad_w. */                                                                    \
  template <Real T>                                                                                 \
  void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out,                   \
                              std::span<const T> in, std::span<T> grad_w);                          \
  /* Row softmax with max subtraction. Keys with key_mask==0 get weight 0;                          \
     rows with row_mask==0 or no surviving key are all zero. Empty masks                            \
     mean "everything kept". */                                                                     \
  template <Real T>                                                                                 \
  void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> logits,                  \
                    std::span<const std::uint8_t> key_mask, std::span<const std::uint8_t> row_mask, \
                    std::span<T> out);                                                              \
  /* Accumulates q * (g - <q, g>) into grad_logits. */                                              \
  template <Real T>                                                                                 \
  void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const T> probs,          \
                             std::span<const T> grad_probs, std::span<T> grad_logits);              \
  /* out[i,j] = ||a_i - b_j||^2 */                                                                  \
  template <Real T>                                                                                 \
  void pairwise_sqdist(std::size_t m, std::size_t n, std::size_t d, std::span<const T> a,           \
                       std::span<const T> b, std::span<T> out);

namespace ref {
PARTREID_KERNEL_DECLS
}  // namespace ref

namespace omp {
PARTREID_KERNEL_DECLS
}  // namespace omp

#undef PARTREID_KERNEL_DECLS

// Dispatchers: reference path in deterministic mode, OpenMP otherwise.
template <Real T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
  if (deterministic()) {
    ref::gemm<T>(ta, tb, m, n, k, a, b, c, accumulate);
  } else {
    omp::gemm<T>(ta, tb, m, n, k, a, b, c, accumulate);
  }
}

template <Real T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> w, std::span<T> out) {
  if (deterministic()) {
    ref::conv2d_forward<T>(g, in, w, out);
  } else {
    omp::conv2d_forward<T>(g, in, w, out);
  }
}

template <Real T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> w,
                           std::span<T> grad_in) {
  if (deterministic()) {
    ref::conv2d_backward_input<T>(g, grad_out, w, grad_in);
  } else {
    omp::conv2d_backward_input<T>(g, grad_out, w, grad_in);
  }
}

template <Real T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_w) {
  if (deterministic()) {
    ref::conv2d_backward_weight<T>(g, grad_out, in, grad_w);
  } else {
    omp::conv2d_backward_weight<T>(g, grad_out, in, grad_w);
  }
}

template <Real T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> logits,
                  std::span<const std::uint8_t> key_mask, std::span<const std::uint8_t> row_mask,
                  std::span<T> out) {
  if (deterministic()) {
    ref::softmax_rows<T>(rows, cols, logits, key_mask, row_mask, out);
  } else {
    omp::softmax_rows<T>(rows, cols, logits, key_mask, row_mask, out);
  }
}

template <Real T>
void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const T> probs,
                           std::span<const T> grad_probs, std::span<T> grad_logits) {
  if (deterministic()) {
    ref::softmax_rows_backward<T>(rows, cols, probs, grad_probs, grad_logits);
  } else {
    omp::softmax_rows_backward<T>(rows, cols, probs, grad_probs, grad_logits);
  }
}

template <Real T>
void pairwise_sqdist(std::size_t m, std::size_t n, std::size_t d, std::span<const T> a, std::span<const T> b,
                     std::span<T> out) {
  if (deterministic()) {
    ref::pairwise_sqdist<T>(m, n, d, a, b, out);
  } else {
    omp::pairwise_sqdist<T>(m, n, d, a, b, out);
  }
}

}  // namespace partreid::kernels

#endif  // PARTREID_KERNELS_KERNELS_HPP_
