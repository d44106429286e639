#include "partreid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace partreid::ops {

namespace {

struct ImageDims {
  std::size_t batch, channels, height, width;
  bool rank3;
  std::size_t plane() const { return height * width; }
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], false};
  if (s.size() == 3) return {1, s[0], s[1], s[2], true};
  throw DimensionError(std::string(op) + ": expected [B,C,H,W] or [C,H,W], got " + shape_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t channels, std::size_t h, std::size_t w) {
  if (d.rank3) return {channels, h, w};
  return {d.batch, channels, h, w};
}

template <Real T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": produced a non-finite value");
  }
#endif
}

template <Real T>
Var<T> emit(Tensor<T> t, bool track, const char* op) {
  check_finite(t, op);
  Var<T> v(std::move(t));
  if (track) v->set_requires_grad(true);
  return v;
}

template <Real T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

template <Real T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad) {
  const ImageDims d = image_dims(x.shape(), "conv2d");
  if (w.shape().size() != 4 || w.shape()[1] != d.channels || w.shape()[2] != w.shape()[3]) {
    throw DimensionError("conv2d: weight " + shape_string(w.shape()) + " does not match input " +
                         shape_string(x.shape()) + " (expected [C_out," + std::to_string(d.channels) + ",k,k])");
  }
  const std::size_t k = w.shape()[2];
  if (k != 1 && k != 3) throw DimensionError("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  if (d.height + 2 * pad < k || d.width + 2 * pad < k) {
    throw DimensionError("conv2d: padded input " + shape_string(x.shape()) + " smaller than kernel");
  }
  kernels::ConvGeometry geo{d.batch, d.channels, d.height, d.width, w.shape()[0], k, stride, pad};
  Tensor<T> out(image_shape(d, geo.out_channels, geo.out_height(), geo.out_width()));
  kernels::conv2d_forward<T>(geo, x.value(), w.value(), out.data());
  const bool track = g.needs_grad({&x, &w});
  Var<T> y = emit(std::move(out), track, "conv2d");
  if (track) {
    g.record("conv2d", [x, w, y, geo]() mutable {
      if (x.requires_grad()) kernels::conv2d_backward_input<T>(geo, y->grad(), w.value(), x->grad());
      if (w.requires_grad()) kernels::conv2d_backward_weight<T>(geo, y->grad(), x.value(), w->grad());
    });
  }
  return y;
}

template <Real T>
Var<T> pointwise_linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const ImageDims d = image_dims(x.shape(), "pointwise_linear");
  if (w.shape().size() != 2 || w.shape()[1] != d.channels) {
    throw DimensionError("pointwise_linear: weight " + shape_string(w.shape()) + " does not take " +
                         std::to_string(d.channels) + " input channels");
  }
  const std::size_t co = w.shape()[0], ci = d.channels, p = d.plane();
  if (b.shape() != Shape{co}) {
    throw DimensionError("pointwise_linear: bias " + shape_string(b.shape()) + " must be [" + std::to_string(co) + "]");
  }
  Tensor<T> out(image_shape(d, co, d.height, d.width));
  for (std::size_t n = 0; n < d.batch; ++n) {
    auto yb = out.data().subspan(n * co * p, co * p);
    kernels::gemm<T>(Trans::kNo, Trans::kNo, co, p, ci, w.value(), x.value().subspan(n * ci * p, ci * p), yb, false);
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t i = 0; i < p; ++i) yb[c * p + i] += b.value()[c];
    }
  }
  const bool track = g.needs_grad({&x, &w, &b});
  Var<T> y = emit(std::move(out), track, "pointwise_linear");
  if (track) {
    g.record("pointwise_linear", [x, w, b, y, d, co, ci, p]() mutable {
      auto gy = y->grad();
      for (std::size_t n = 0; n < d.batch; ++n) {
        auto gyb = std::span<const T>(gy).subspan(n * co * p, co * p);
        if (x.requires_grad()) {
          kernels::gemm<T>(Trans::kYes, Trans::kNo, ci, p, co, w.value(), gyb, x->grad().subspan(n * ci * p, ci * p),
                           true);
        }
        if (w.requires_grad()) {
          kernels::gemm<T>(Trans::kNo, Trans::kYes, co, ci, p, gyb, x.value().subspan(n * ci * p, ci * p), w->grad(),
                           true);
        }
        if (b.requires_grad()) {
          auto gb = b->grad();
          for (std::size_t c = 0; c < co; ++c) {
            T s = T(0);
            for (std::size_t i = 0; i < p; ++i) s += gyb[c * p + i];
            gb[c] += s;
          }
        }
      }
    });
  }
  return y;
}

template <Real T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || w.shape()[1] != x.shape()[1]) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(w.shape()));
  }
  const std::size_t n = x.shape()[0], din = x.shape()[1], dout = w.shape()[0];
  if (b.shape() != Shape{dout}) throw DimensionError("linear: bias " + shape_string(b.shape()) + " has wrong length");
  Tensor<T> out(Shape{n, dout});
  kernels::gemm<T>(Trans::kNo, Trans::kYes, n, dout, din, x.value(), w.value(), out.data(), false);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < dout; ++c) out[r * dout + c] += b.value()[c];
  }
  const bool track = g.needs_grad({&x, &w, &b});
  Var<T> y = emit(std::move(out), track, "linear");
  if (track) {
    g.record("linear", [x, w, b, y, n, din, dout]() mutable {
      std::span<const T> gy = y->grad();
      if (x.requires_grad()) kernels::gemm<T>(Trans::kNo, Trans::kNo, n, din, dout, gy, w.value(), x->grad(), true);
      if (w.requires_grad()) kernels::gemm<T>(Trans::kYes, Trans::kNo, dout, din, n, gy, x.value(), w->grad(), true);
      if (b.requires_grad()) {
        auto gb = b->grad();
        for (std::size_t c = 0; c < dout; ++c) {
          T s = T(0);
          for (std::size_t r = 0; r < n; ++r) s += gy[r * dout + c];
          gb[c] += s;
        }
      }
    });
  }
  return y;
}

template <Real T>
Var<T> batch_norm(Graph<T>& g, const Var<T>& x, BatchNormState<T>& state, Mode mode, const Var<T>& gamma,
                  const Var<T>& beta) {
  const Shape& s = x.shape();
  std::size_t nb = 0, nc = 0, ns = 0;
  if (s.size() == 4) {
    nb = s[0], nc = s[1], ns = s[2] * s[3];
  } else if (s.size() == 3) {
    nb = 1, nc = s[0], ns = s[1] * s[2];
  } else if (s.size() == 2) {
    nb = s[0], nc = s[1], ns = 1;
  } else {
    throw DimensionError("batch_norm: unsupported shape " + shape_string(s));
  }
  if (gamma.shape() != Shape{nc} || beta.shape() != Shape{nc} || state.running_mean.size() != nc) {
    throw DimensionError("batch_norm: affine/state size does not match " + std::to_string(nc) + " channels");
  }
  const std::size_t count = nb * ns;
  const bool train = mode == Mode::kTrain;
  if (train && count < 2) {
    throw DimensionError("batch_norm: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }
  Tensor<T> out(s);
  std::vector<T> xhat(x.tensor().size());
  std::vector<T> inv_std(nc);
  const auto xv = x.value();
  const auto at = [nc, ns](std::size_t b, std::size_t c, std::size_t i) { return (b * nc + c) * ns + i; };
#pragma omp parallel for schedule(static) if (!deterministic())
  for (std::size_t c = 0; c < nc; ++c) {
    T mu, var;
    if (train) {
      T acc = T(0);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < ns; ++i) acc += xv[at(b, c, i)];
      mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t i = 0; i < ns; ++i) {
          const T dlt = xv[at(b, c, i)] - mu;
          sq += dlt * dlt;
        }
      }
      var = sq / static_cast<T>(count);
      const T unbiased = sq / static_cast<T>(count - 1);
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + state.eps);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t i = 0; i < ns; ++i) {
        const std::size_t k = at(b, c, i);
        xhat[k] = (xv[k] - mu) * inv_std[c];
        out[k] = gamma.value()[c] * xhat[k] + beta.value()[c];
      }
    }
  }
  const bool track = g.needs_grad({&x, &gamma, &beta});
  Var<T> y = emit(std::move(out), track, "batch_norm");
  if (track) {
    g.record("batch_norm", [x, gamma, beta, y, xhat = std::move(xhat), inv_std = std::move(inv_std), nb, nc, ns,
                            count, train, at]() mutable {
      std::span<const T> gy = y->grad();
      for (std::size_t c = 0; c < nc; ++c) {
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t i = 0; i < ns; ++i) {
            const std::size_t k = at(b, c, i);
            sum_gy += gy[k];
            sum_gy_xhat += gy[k] * xhat[k];
          }
        }
        if (gamma.requires_grad()) gamma->grad()[c] += sum_gy_xhat;
        if (beta.requires_grad()) beta->grad()[c] += sum_gy;
        if (!x.requires_grad()) continue;
        auto gx = x->grad();
        const T scale = gamma.value()[c] * inv_std[c];
        const T n = static_cast<T>(count);
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t i = 0; i < ns; ++i) {
            const std::size_t k = at(b, c, i);
            if (train) {
              gx[k] += scale * (gy[k] - sum_gy / n - xhat[k] * sum_gy_xhat / n);
            } else {
              gx[k] += scale * gy[k];
            }
          }
        }
      }
    });
  }
  return y;
}

template <Real T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool track = g.needs_grad({&a, &b});
  Var<T> y = emit(std::move(out), track, "add");
  if (track) {
    g.record("add", [a, b, y]() mutable {
      std::span<const T> gy = y->grad();
      if (a.requires_grad()) {
        auto ga = a->grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b->grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

template <Real T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool track = g.needs_grad({&a, &b});
  Var<T> y = emit(std::move(out), track, "mul");
  if (track) {
    g.record("mul", [a, b, y]() mutable {
      std::span<const T> gy = y->grad();
      // a and b may alias; read both values before writing.
      const auto av = a.value(), bv = b.value();
      if (a.requires_grad()) {
        auto ga = a->grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b->grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
      }
    });
  }
  return y;
}

template <Real T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  const auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "scale");
  if (track) {
    g.record("scale", [x, y, factor]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
    });
  }
  return y;
}

template <Real T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "relu");
  if (track) {
    g.record("relu", [x, y]() mutable {
      std::span<const T> gy = y->grad();
      const auto xv = x.value();
      auto gx = x->grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (xv[i] > T(0)) gx[i] += gy[i];
      }
    });
  }
  return y;
}

template <Real T>
Var<T> sum(Graph<T>& g, const Var<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(Tensor<T>::scalar(s), track, "sum");
  if (track) {
    g.record("sum", [x, y]() mutable {
      const T gy = y->grad()[0];
      for (T& gx : x->grad()) gx += gy;
    });
  }
  return y;
}

template <Real T>
Var<T> mean(Graph<T>& g, const Var<T>& x) {
  return scale(g, sum(g, x), T(1) / static_cast<T>(x.tensor().size()));
}

template <Real T>
Var<T> reshape(Graph<T>& g, const Var<T>& x, Shape shape) {
  Tensor<T> out = x.tensor();
  out.set_requires_grad(false);
  out.reshape(std::move(shape));
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "reshape");
  if (track) {
    g.record("reshape", [x, y]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

template <Real T>
Var<T> softmax_rows(Graph<T>& g, const Var<T>& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw DimensionError("softmax_rows: expected rank 2 or 3, got " + shape_string(s));
  }
  for (T v : logits.value()) {
    if (std::isnan(v)) throw std::invalid_argument("softmax_rows: NaN logit");
  }
  const std::size_t cols = s.back();
  const std::size_t rows = logits.tensor().size() / cols;
  Tensor<T> out(s);
  kernels::softmax_rows<T>(rows, cols, logits.value(), {}, {}, out.data());
  const bool track = g.needs_grad({&logits});
  Var<T> y = emit(std::move(out), track, "softmax_rows");
  if (track) {
    g.record("softmax_rows", [logits, y, rows, cols]() mutable {
      kernels::softmax_rows_backward<T>(rows, cols, y.value(), y->grad(), logits->grad());
    });
  }
  return y;
}

template <Real T>
Var<T> masked_softmax_rows(Graph<T>& g, const Var<T>& logits, std::span<const std::uint8_t> key_mask,
                           std::span<const std::uint8_t> row_mask) {
  const Shape& s = logits.shape();
  if (s.size() != 3) throw DimensionError("masked_softmax_rows: expected [B,N,M], got " + shape_string(s));
  const std::size_t nb = s[0], rows = s[1], cols = s[2];
  if (!key_mask.empty() && key_mask.size() != nb * cols) {
    throw DimensionError("masked_softmax_rows: key mask has " + std::to_string(key_mask.size()) + " entries, need " +
                         std::to_string(nb * cols));
  }
  if (!row_mask.empty() && row_mask.size() != nb * rows) {
    throw DimensionError("masked_softmax_rows: row mask has " + std::to_string(row_mask.size()) + " entries, need " +
                         std::to_string(nb * rows));
  }
  for (T v : logits.value()) {
    if (std::isnan(v)) throw std::invalid_argument("masked_softmax_rows: NaN logit");
  }
  Tensor<T> out(s);
  for (std::size_t b = 0; b < nb; ++b) {
    kernels::softmax_rows<T>(rows, cols, logits.value().subspan(b * rows * cols, rows * cols),
                             key_mask.empty() ? key_mask : key_mask.subspan(b * cols, cols),
                             row_mask.empty() ? row_mask : row_mask.subspan(b * rows, rows),
                             out.data().subspan(b * rows * cols, rows * cols));
  }
  const bool track = g.needs_grad({&logits});
  Var<T> y = emit(std::move(out), track, "masked_softmax_rows");
  if (track) {
    g.record("masked_softmax_rows", [logits, y, nb, rows, cols]() mutable {
      kernels::softmax_rows_backward<T>(nb * rows, cols, y.value(), y->grad(), logits->grad());
    });
  }
  return y;
}

template <Real T>
Var<T> global_avg_pool(Graph<T>& g, const Var<T>& x) {
  const ImageDims d = image_dims(x.shape(), "global_avg_pool");
  if (d.plane() == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  Tensor<T> out(d.rank3 ? Shape{d.channels} : Shape{d.batch, d.channels});
  const auto xv = x.value();
  const std::size_t p = d.plane();
  for (std::size_t r = 0; r < d.batch * d.channels; ++r) {
    T s = T(0);
    for (std::size_t i = 0; i < p; ++i) s += xv[r * p + i];
    out[r] = s / static_cast<T>(p);
  }
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "global_avg_pool");
  if (track) {
    g.record("global_avg_pool", [x, y, d, p]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t r = 0; r < d.batch * d.channels; ++r) {
        const T v = gy[r] / static_cast<T>(p);
        for (std::size_t i = 0; i < p; ++i) gx[r * p + i] += v;
      }
    });
  }
  return y;
}

template <Real T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b, Trans tb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) {
    throw DimensionError("matmul: operands " + shape_string(sa) + " and " + shape_string(sb) + " must both be rank 2 or 3");
  }
  const bool batched = sa.size() == 3;
  const std::size_t nb = batched ? sa[0] : 1;
  if (batched && sb[0] != nb) throw DimensionError("matmul: batch mismatch " + shape_string(sa) + " vs " + shape_string(sb));
  const std::size_t n = sa[sa.size() - 2], k = sa.back();
  const std::size_t bk = tb == Trans::kNo ? sb[sb.size() - 2] : sb.back();
  const std::size_t m = tb == Trans::kNo ? sb.back() : sb[sb.size() - 2];
  if (bk != k) throw DimensionError("matmul: inner dimensions differ: " + shape_string(sa) + " x " + shape_string(sb));
  Tensor<T> out(batched ? Shape{nb, n, m} : Shape{n, m});
  for (std::size_t i = 0; i < nb; ++i) {
    kernels::gemm<T>(Trans::kNo, tb, n, m, k, a.value().subspan(i * n * k, n * k), b.value().subspan(i * k * m, k * m),
                     out.data().subspan(i * n * m, n * m), false);
  }
  const bool track = g.needs_grad({&a, &b});
  Var<T> y = emit(std::move(out), track, "matmul");
  if (track) {
    g.record("matmul", [a, b, y, tb, nb, n, m, k]() mutable {
      std::span<const T> gy = y->grad();
      for (std::size_t i = 0; i < nb; ++i) {
        auto gyi = gy.subspan(i * n * m, n * m);
        auto ai = a.value().subspan(i * n * k, n * k);
        auto bi = b.value().subspan(i * k * m, k * m);
        if (a.requires_grad()) {
          // dA = dC * op(B)^T
          kernels::gemm<T>(Trans::kNo, tb == Trans::kNo ? Trans::kYes : Trans::kNo, n, k, m, gyi, bi,
                           a->grad().subspan(i * n * k, n * k), true);
        }
        if (b.requires_grad()) {
          if (tb == Trans::kNo) {
            kernels::gemm<T>(Trans::kYes, Trans::kNo, k, m, n, ai, gyi, b->grad().subspan(i * k * m, k * m), true);
          } else {
            kernels::gemm<T>(Trans::kYes, Trans::kNo, m, k, n, gyi, ai, b->grad().subspan(i * k * m, k * m), true);
          }
        }
      }
    });
  }
  return y;
}

template <Real T>
Var<T> to_pixels(Graph<T>& g, const Var<T>& x) {
  const ImageDims d = image_dims(x.shape(), "to_pixels");
  const std::size_t p = d.plane(), c = d.channels;
  Tensor<T> out(Shape{d.batch, p, c});
  const auto xv = x.value();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i) out[(b * p + i) * c + ch] = xv[(b * c + ch) * p + i];
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "to_pixels");
  if (track) {
    g.record("to_pixels", [x, y, d, p, c]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < p; ++i) gx[(b * c + ch) * p + i] += gy[(b * p + i) * c + ch];
    });
  }
  return y;
}

template <Real T>
Var<T> from_pixels(Graph<T>& g, const Var<T>& x, std::size_t height, std::size_t width) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != height * width) {
    throw DimensionError("from_pixels: " + shape_string(s) + " is not [B," + std::to_string(height * width) + ",C]");
  }
  const std::size_t nb = s[0], p = s[1], c = s[2];
  Tensor<T> out(Shape{nb, c, height, width});
  const auto xv = x.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i) out[(b * c + ch) * p + i] = xv[(b * p + i) * c + ch];
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "from_pixels");
  if (track) {
    g.record("from_pixels", [x, y, nb, p, c]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < p; ++i) gx[(b * p + i) * c + ch] += gy[(b * c + ch) * p + i];
    });
  }
  return y;
}

template <Real T>
Var<T> gather_rows(Graph<T>& g, const Var<T>& x, std::span<const std::size_t> index, std::size_t rows_per_batch) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("gather_rows: expected [B,K,C], got " + shape_string(s));
  const std::size_t nb = s[0], k = s[1], c = s[2], n = rows_per_batch;
  if (index.size() != nb * n) {
    throw DimensionError("gather_rows: index has " + std::to_string(index.size()) + " entries, need " +
                         std::to_string(nb * n));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t v : idx) {
    if (v >= k) throw DimensionError("gather_rows: index " + std::to_string(v) + " out of range for K=" + std::to_string(k));
  }
  Tensor<T> out(Shape{nb, n, c});
  const auto xv = x.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(xv.begin() + (b * k + idx[b * n + i]) * c, c, out.data().begin() + (b * n + i) * c);
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "gather_rows");
  if (track) {
    g.record("gather_rows", [x, y, idx = std::move(idx), nb, n, k, c]() mutable {
      std::span<const T> gy = y->grad();
      auto gx = x->grad();
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) gx[(b * k + idx[b * n + i]) * c + ch] += gy[(b * n + i) * c + ch];
    });
  }
  return y;
}

template <Real T>
Var<T> l2_normalize_rows(Graph<T>& g, const Var<T>& x, T eps) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("l2_normalize_rows: expected [B,D], got " + shape_string(s));
  const std::size_t nb = s[0], d = s[1];
  Tensor<T> out(s);
  std::vector<T> norm(nb);
  const auto xv = x.value();
  for (std::size_t b = 0; b < nb; ++b) {
    T sq = T(0);
    for (std::size_t i = 0; i < d; ++i) sq += xv[b * d + i] * xv[b * d + i];
    norm[b] = std::sqrt(sq + eps);
    for (std::size_t i = 0; i < d; ++i) out[b * d + i] = xv[b * d + i] / norm[b];
  }
  const bool track = g.needs_grad({&x});
  Var<T> y = emit(std::move(out), track, "l2_normalize_rows");
  if (track) {
    g.record("l2_normalize_rows", [x, y, norm = std::move(norm), nb, d]() mutable {
      std::span<const T> gy = y->grad();
      const auto yv = y.value();
      auto gx = x->grad();
      for (std::size_t b = 0; b < nb; ++b) {
        T dot = T(0);
        for (std::size_t i = 0; i < d; ++i) dot += yv[b * d + i] * gy[b * d + i];
        for (std::size_t i = 0; i < d; ++i) gx[b * d + i] += (gy[b * d + i] - yv[b * d + i] * dot) / norm[b];
      }
    });
  }
  return y;
}

#define PARTREID_INSTANTIATE(T)                                                                                    \
  template Var<T> conv2d(Graph<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);                       \
  template Var<T> pointwise_linear(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> linear(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> batch_norm(Graph<T>&, const Var<T>&, BatchNormState<T>&, Mode, const Var<T>&, const Var<T>&);    \
  template Var<T> add(Graph<T>&, const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul(Graph<T>&, const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale(Graph<T>&, const Var<T>&, T);                                                              \
  template Var<T> relu(Graph<T>&, const Var<T>&);                                                                  \
  template Var<T> sum(Graph<T>&, const Var<T>&);                                                                   \
  template Var<T> mean(Graph<T>&, const Var<T>&);                                                                  \
  template Var<T> reshape(Graph<T>&, const Var<T>&, Shape);                                                        \
  template Var<T> softmax_rows(Graph<T>&, const Var<T>&);                                                          \
  template Var<T> masked_softmax_rows(Graph<T>&, const Var<T>&, std::span<const std::uint8_t>,                     \
                                      std::span<const std::uint8_t>);                                              \
  template Var<T> global_avg_pool(Graph<T>&, const Var<T>&);                                                       \
  template Var<T> matmul(Graph<T>&, const Var<T>&, const Var<T>&, Trans);                                          \
  template Var<T> to_pixels(Graph<T>&, const Var<T>&);                                                             \
  template Var<T> from_pixels(Graph<T>&, const Var<T>&, std::size_t, std::size_t);                                \
  template Var<T> gather_rows(Graph<T>&, const Var<T>&, std::span<const std::size_t>, std::size_t);                \
  template Var<T> l2_normalize_rows(Graph<T>&, const Var<T>&, T);

PARTREID_INSTANTIATE(float)
PARTREID_INSTANTIATE(double)

#undef PARTREID_INSTANTIATE

}  // namespace partreid::ops
