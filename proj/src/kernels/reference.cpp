// Serial reference kernels. Straight loops, no blocking, no threads.

#include <algorithm>
#include <cmath>
#include <limits>

#include "partreid/kernels/kernels.hpp"

namespace partreid::kernels::ref {

template <Real T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Trans::kNo ? a[i * k + p] : a[p * m + i];
        const T bv = tb == Trans::kNo ? b[p * n + j] : b[j * k + p];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <Real T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> in, std::span<const T> w, std::span<T> out) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), wd = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T s = T(0);
          // Padded taps contribute an explicit 0 * w term, matching im2col.
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                const T x = (iy < 0 || iy >= h || ix < 0 || ix >= wd)
                                ? T(0)
                                : in[((b * g.in_channels + ci) * g.height + iy) * g.width + ix];
                s += w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] * x;
              }
            }
          }
          out[((b * g.out_channels + co) * ho + oy) * wo + ox] = s;
        }
      }
    }
  }
}

template <Real T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> w,
                           std::span<T> grad_in) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), wd = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T go = grad_out[((b * g.out_channels + co) * ho + oy) * wo + ox];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                grad_in[((b * g.in_channels + ci) * g.height + iy) * g.width + ix] +=
                    w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] * go;
              }
            }
          }
        }
      }
    }
  }
}

template <Real T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_out, std::span<const T> in,
                            std::span<T> grad_w) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), wd = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            T s = T(0);
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += grad_out[((b * g.out_channels + co) * ho + oy) * wo + ox] *
                     in[((b * g.in_channels + ci) * g.height + iy) * g.width + ix];
              }
            }
            grad_w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] += s;
          }
        }
      }
    }
  }
}

template <Real T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> logits,
                  std::span<const std::uint8_t> key_mask, std::span<const std::uint8_t> row_mask,
                  std::span<T> out) {
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
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (std::size_t p = 0; p < d; ++p) {
        const T diff = a[i * d + p] - b[j * d + p];
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

}  // namespace partreid::kernels::ref
