// OpenMP kernels. Work is split over independent output rows, batch items
// or channels; no reduction ever crosses a thread boundary.

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "partreid/kernels/kernels.hpp"

namespace partreid::kernels::omp {

namespace {

// Row i of C = op(A) * op(B). acc must hold n elements.
template <Real T>
void gemm_row(Trans ta, Trans tb, std::size_t i, std::size_t m, std::size_t n, std::size_t k, const T* a,
              const T* b, T* c, bool accumulate, T* acc, T* arow) {
  for (std::size_t p = 0; p < k; ++p) arow[p] = ta == Trans::kNo ? a[i * k + p] : a[p * m + i];
  if (tb == Trans::kNo) {
    std::fill(acc, acc + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const T* bcol = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * bcol[p];
      acc[j] = s;
    }
  }
  T* crow = c + i * n;
  if (accumulate) {
    for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + acc[j];
  } else {
    std::copy(acc, acc + n, crow);
  }
}

template <Real T>
void gemm_serial(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                 bool accumulate, std::vector<T>& acc, std::vector<T>& arow) {
  acc.resize(n);
  arow.resize(k);
  for (std::size_t i = 0; i < m; ++i) gemm_row(ta, tb, i, m, n, k, a, b, c, accumulate, acc.data(), arow.data());
}

// col[(ci,ky,kx), (oy,ox)] for one batch item; padded taps are 0.
template <Real T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), wd = static_cast<std::ptrdiff_t>(g.width);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    const T* plane = in + ci * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++r) {
        T* dst = col + r * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[oy * wo + ox] = (iy < 0 || iy >= h || ix < 0 || ix >= wd) ? T(0) : plane[iy * g.width + ix];
          }
        }
      }
    }
  }
}

template <Real T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), wd = static_cast<std::ptrdiff_t>(g.width);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    T* plane = in + ci * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++r) {
        const T* src = col + r * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= h) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= wd) continue;
            plane[iy * g.width + ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <Real T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
#pragma omp parallel
  {
    std::vector<T> acc(n), arow(k);
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
      gemm_row(ta, tb, i, m, n, k, a.data(), b.data(), c.data(), accumulate, acc.data(), arow.data());
    }
  }
}

template <Real T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> w, std::span<T> out) {
  const std::size_t p = g.out_height() * g.out_width();
  const std::size_t r = g.patch();
#pragma omp parallel
  {
    std::vector<T> col(r * p), acc, arow;
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < g.batch; ++b) {
      im2col(g, in.data() + b * g.in_channels * g.height * g.width, col.data());
      gemm_serial(Trans::kNo, Trans::kNo, g.out_channels, p, r, w.data(), col.data(),
                  out.data() + b * g.out_channels * p, false, acc, arow);
    }
  }
}

template <Real T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> w,
                           std::span<T> grad_in) {
  const std::size_t p = g.out_height() * g.out_width();
  const std::size_t r = g.patch();
#pragma omp parallel
  {
    std::vector<T> col(r * p), acc, arow;
#pragma omp for schedule(static)
    for (std::size_t b = 0; b < g.batch; ++b) {
      gemm_serial(Trans::kYes, Trans::kNo, r, p, g.out_channels, w.data(), grad_out.data() + b * g.out_channels * p,
                  col.data(), false, acc, arow);
      col2im_add(g, col.data(), grad_in.data() + b * g.in_channels * g.height * g.width);
    }
  }
}

template <Real T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_w) {
  const std::size_t p = g.out_height() * g.out_width();
  const std::size_t r = g.patch();
  std::vector<T> col(r * p);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, in.data() + b * g.in_channels * g.height * g.width, col.data());
    omp::gemm<T>(Trans::kNo, Trans::kYes, g.out_channels, r, p, grad_out.subspan(b * g.out_channels * p, g.out_channels * p),
            std::span<const T>(col), grad_w, true);
  }
}

template <Real T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> logits,
                  std::span<const std::uint8_t> key_mask, std::span<const std::uint8_t> row_mask,
                  std::span<T> out) {
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data() + r * cols;
    T* y = out.data() + r * cols;
    const bool row_kept = row_mask.empty() || row_mask[r] != 0;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (key_mask.empty() || key_mask[c]) mx = std::max(mx, x[c]);
    }
    if (!row_kept || mx == -std::numeric_limits<T>::infinity()) {
      std::fill(y, y + cols, T(0));
      continue;
    }
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = (key_mask.empty() || key_mask[c]) ? std::exp(x[c] - mx) : T(0);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
}

template <Real T>
void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const T> probs,
                           std::span<const T> grad_probs, std::span<T> grad_logits) {
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const T* q = probs.data() + r * cols;
    const T* g = grad_probs.data() + r * cols;
    T dot = T(0);
    for (std::size_t c = 0; c < cols; ++c) dot += q[c] * g[c];
    for (std::size_t c = 0; c < cols; ++c) grad_logits[r * cols + c] += q[c] * (g[c] - dot);
  }
}

template <Real T>
void pairwise_sqdist(std::size_t m, std::size_t n, std::size_t d, std::span<const T> a, std::span<const T> b,
                     std::span<T> out) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b.data() + j * d;
      T s = T(0);
      for (std::size_t p = 0; p < d; ++p) {
        const T diff = ai[p] - bj[p];
        s += diff * diff;
      }
      out[i * n + j] = s;
    }
  }
}

#define PARTREID_INSTANTIATE(T)                                                                               \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, std::span<const T>,              \
                        std::span<const T>, std::span<T>, bool);                                              \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>); \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,         \
                                         std::span<T>);                                                       \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,        \
                                          std::span<T>);                                                      \
  template void softmax_rows<T>(std::size_t, std::size_t, std::span<const T>, std::span<const std::uint8_t>,  \
                                std::span<const std::uint8_t>, std::span<T>);                                 \
  template void softmax_rows_backward<T>(std::size_t, std::size_t, std::span<const T>, std::span<const T>,    \
                                         std::span<T>);                                                       \
  template void pairwise_sqdist<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,                 \
                                   std::span<const T>, std::span<T>);

PARTREID_INSTANTIATE(float)
PARTREID_INSTANTIATE(double)

#undef PARTREID_INSTANTIATE

}  // namespace partreid::kernels::omp
