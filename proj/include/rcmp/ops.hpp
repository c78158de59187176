#pragma once

// Forward and backward kernels for the primitives the residual network is
// built from. All functions are pure: they read their inputs and return new
// tensors. Reductions run in a fixed order so results are bitwise
// reproducible for identical inputs.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "rcmp/tensor.hpp"

namespace rcmp::ops {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Statistics accumulate in double even for f32 tensors.
template <class T>
using Accum = std::conditional_t<std::is_same_v<T, float>, double, T>;

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

enum class BnMode { train, eval };

struct ConvGeometry {
  std::int64_t batch, in_channels, height, width;
  std::int64_t out_channels, kernel, stride, padding;
  std::int64_t out_height, out_width;

  std::int64_t patch() const { return in_channels * kernel * kernel; }
  std::int64_t positions() const { return out_height * out_width; }
};

inline std::int64_t pooled_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                  std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - k;
  return span < 0 ? 0 : span / stride + 1;
}

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::int64_t stride,
                                  std::int64_t padding) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d: expected NCHW input and OIHW weight, got " + shape_str(x) + " and " +
                     shape_str(w));
  if (w[2] != w[3]) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w));
  if (x[1] != w[1])
    throw ShapeError("conv2d: input channels " + std::to_string(x[1]) +
                     " do not match weight " + shape_str(w));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, padding, 0, 0};
  g.out_height = pooled_extent(g.height, g.kernel, stride, padding);
  g.out_width = pooled_extent(g.width, g.kernel, stride, padding);
  if (g.out_height < 1 || g.out_width < 1)
    throw ShapeError("conv2d: zero-sized output for input " + shape_str(x) + ", kernel " +
                     std::to_string(g.kernel) + ", stride " + std::to_string(stride) +
                     ", padding " + std::to_string(padding));
  return g;
}

/// Unfolds one sample (C x H x W) into a (C*K*K) x (Ho*Wo) row-major matrix.
template <class T, class U = T>
void im2col(const T* x, const ConvGeometry& g, U* col, U pad_value = U{}) {
  const auto K = g.kernel, P = g.positions();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    const T* plane = x + c * g.height * g.width;
    for (std::int64_t kh = 0; kh < K; ++kh) {
      for (std::int64_t kw = 0; kw < K; ++kw) {
        U* row = col + ((c * K + kh) * K + kw) * P;
        for (std::int64_t oh = 0; oh < g.out_height; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          U* dst = row + oh * g.out_width;
          if (ih < 0 || ih >= g.height) {
            for (std::int64_t ow = 0; ow < g.out_width; ++ow) dst[ow] = pad_value;
            continue;
          }
          const T* src = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_width; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            dst[ow] = (iw < 0 || iw >= g.width) ? pad_value : static_cast<U>(src[iw]);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_accumulate(const T* col, const ConvGeometry& g, T* dx) {
  const auto K = g.kernel, P = g.positions();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    T* plane = dx + c * g.height * g.width;
    for (std::int64_t kh = 0; kh < K; ++kh) {
      for (std::int64_t kw = 0; kw < K; ++kw) {
        const T* row = col + ((c * K + kh) * K + kw) * P;
        for (std::int64_t oh = 0; oh < g.out_height; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.height) continue;
          for (std::int64_t ow = 0; ow < g.out_width; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            if (iw >= 0 && iw < g.width) plane[ih * g.width + iw] += row[oh * g.out_width + ow];
          }
        }
      }
    }
  }
}

/// Cross-correlation (no kernel flip) of NCHW input with OIHW weight.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, std::int64_t stride,
                 std::int64_t padding) {
  const auto g = conv_geometry(x.shape(), w.shape(), stride, padding);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels))
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(g.out_channels) + " output channels");
  Tensor<T> y(Shape{g.batch, g.out_channels, g.out_height, g.out_width});
  const auto P = g.positions(), CKK = g.patch();
  std::vector<T> col(static_cast<std::size_t>(CKK * P));
  Eigen::Map<const RowMatrix<T>> W(w.data(), g.out_channels, CKK);
  Eigen::Map<const RowMatrix<T>> C(col.data(), CKK, P);
  for (std::int64_t n = 0; n < g.batch; ++n) {
    im2col(x.data() + n * g.in_channels * g.height * g.width, g, col.data());
    Eigen::Map<RowMatrix<T>> Y(y.data() + n * g.out_channels * P, g.out_channels, P);
    Y.noalias() = W * C;
    if (bias)
      for (std::int64_t o = 0; o < g.out_channels; ++o) Y.row(o).array() += (*bias)[o];
  }
  return y;
}

template <class T>
struct ConvGrads {
  Tensor<T> input, weight;
  std::optional<Tensor<T>> bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                             std::int64_t stride, std::int64_t padding, const Tensor<T>& dy) {
  const auto g = conv_geometry(x.shape(), w.shape(), stride, padding);
  const Shape expected{g.batch, g.out_channels, g.out_height, g.out_width};
  if (dy.shape() != expected)
    throw ShapeError("conv2d backward: gradient " + shape_str(dy.shape()) + " expected " +
                     shape_str(expected));
  const auto P = g.positions(), CKK = g.patch();
  ConvGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()), std::nullopt};
  std::vector<T> col(static_cast<std::size_t>(CKK * P));
  std::vector<T> dcol(static_cast<std::size_t>(CKK * P));
  Eigen::Map<const RowMatrix<T>> W(w.data(), g.out_channels, CKK);
  Eigen::Map<RowMatrix<T>> dW(out.weight.data(), g.out_channels, CKK);
  Eigen::Map<RowMatrix<T>> C(col.data(), CKK, P);
  Eigen::Map<RowMatrix<T>> dC(dcol.data(), CKK, P);
  const auto sample = g.in_channels * g.height * g.width;
  for (std::int64_t n = 0; n < g.batch; ++n) {
    Eigen::Map<const RowMatrix<T>> dY(dy.data() + n * g.out_channels * P, g.out_channels, P);
    im2col(x.data() + n * sample, g, col.data());
    dW.noalias() += dY * C.transpose();
    dC.noalias() = W.transpose() * dY;
    col2im_accumulate(dcol.data(), g, out.input.data() + n * sample);
  }
  if (has_bias) {
    Tensor<T> db(Shape{g.out_channels});
    for (std::int64_t o = 0; o < g.out_channels; ++o) {
      Accum<T> s = 0;
      for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* p = dy.data() + (n * g.out_channels + o) * P;
        for (std::int64_t i = 0; i < P; ++i) s += p[i];
      }
      db[o] = static_cast<T>(s);
    }
    out.bias = std::move(db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
struct BatchNormForward {
  Tensor<T> output;
  Tensor<T> normalized;  // x-hat
  Tensor<T> inv_std;     // per channel
  Tensor<T> batch_mean;  // train mode only (otherwise the running mean)
  Tensor<T> batch_var;   // biased batch variance (train mode only)
};

template <class T>
void check_bn_args(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                   const Tensor<T>& mean, const Tensor<T>& var) {
  require_rank(x, 4, "batchnorm2d");
  const Shape c{x.dim(1)};
  for (const Tensor<T>* t : {&gamma, &beta, &mean, &var})
    if (t->shape() != c)
      throw ShapeError("batchnorm2d: per-channel tensor " + shape_str(t->shape()) +
                       " does not match input " + shape_str(x.shape()));
}

template <class T>
BatchNormForward<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                BnMode mode, double eps = kBatchNormEps) {
  check_bn_args(x, gamma, beta, running_mean, running_var);
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape cs{C};
  BatchNormForward<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape()), Tensor<T>(cs), Tensor<T>(cs),
                        Tensor<T>(cs)};
  const double count = static_cast<double>(N * HW);
  for (std::int64_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == BnMode::train) {
      Accum<T> s = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      mean = static_cast<double>(s) / count;
      Accum<T> ss = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const Accum<T> d = static_cast<Accum<T>>(p[i]) - static_cast<Accum<T>>(mean);
          ss += d * d;
        }
      }
      var = static_cast<double>(ss) / count;
    } else {
      mean = static_cast<double>(running_mean[c]);
      var = static_cast<double>(running_var[c]);
    }
    if (!(var + eps > 0.0))
      throw std::domain_error("batchnorm2d: non-positive variance plus eps in channel " +
                              std::to_string(c));
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T m = static_cast<T>(mean);
    r.inv_std[c] = inv;
    r.batch_mean[c] = m;
    r.batch_var[c] = static_cast<T>(var);
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        const T xh = (x[off + i] - m) * inv;
        r.normalized[off + i] = xh;
        r.output[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return r;
}

template <class T>
struct BatchNormGrads {
  Tensor<T> input, gamma, beta;
};

template <class T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& normalized, const Tensor<T>& inv_std,
                                       const Tensor<T>& gamma, BnMode mode, const Tensor<T>& dy) {
  require_same_shape(normalized, dy, "batchnorm2d backward");
  const auto N = dy.dim(0), C = dy.dim(1), HW = dy.dim(2) * dy.dim(3);
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
  const double M = static_cast<double>(N * HW);
  for (std::int64_t c = 0; c < C; ++c) {
    Accum<T> sum_dy = 0, sum_dy_xh = 0;
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xh += static_cast<Accum<T>>(dy[off + i]) * normalized[off + i];
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xh);
    const T scale = gamma[c] * inv_std[c];
    if (mode == BnMode::eval) {
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t off = (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) g.input[off + i] = dy[off + i] * scale;
      }
    } else {
      const T mean_dy = static_cast<T>(static_cast<double>(sum_dy) / M);
      const T mean_dy_xh = static_cast<T>(static_cast<double>(sum_dy_xh) / M);
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t off = (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i)
          g.input[off + i] = scale * (dy[off + i] - mean_dy - normalized[off + i] * mean_dy_xh);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise and pooling

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Subgradient at 0 is 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x, dy, "relu backward");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <class T>
T sum(const Tensor<T>& x) {
  Accum<T> s = 0;
  for (auto v : x.values()) s += v;
  return static_cast<T>(s);
}

template <class T>
struct MaxPoolForward {
  Tensor<T> output;
  std::vector<std::int64_t> argmax;  // flat input index per output element
};

/// Padding positions never win. Ties resolve to the first maximal element in
/// row-major window order.
template <class T>
MaxPoolForward<T> maxpool2d(const Tensor<T>& x, std::int64_t k = 3, std::int64_t stride = 2,
                            std::int64_t pad = 1) {
  require_rank(x, 4, "maxpool2d");
  if (k < 1 || stride < 1 || pad < 0 || pad >= k)
    throw std::invalid_argument("maxpool2d: invalid window parameters");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = pooled_extent(H, k, stride, pad), Wo = pooled_extent(W, k, stride, pad);
  if (Ho < 1 || Wo < 1) throw ShapeError("maxpool2d: zero-sized output for " + shape_str(x.shape()));
  MaxPoolForward<T> r{Tensor<T>(Shape{N, C, Ho, Wo}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const std::int64_t base = nc * H * W;
    for (std::int64_t oh = 0; oh < Ho; ++oh) {
      for (std::int64_t ow = 0; ow < Wo; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_i = -1;
        for (std::int64_t kh = 0; kh < k; ++kh) {
          const std::int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t kw = 0; kw < k; ++kw) {
            const std::int64_t iw = ow * stride - pad + kw;
            if (iw < 0 || iw >= W) continue;
            const std::int64_t idx = base + ih * W + iw;
            if (best_i < 0 || x[idx] > best) {
              best = x[idx];
              best_i = idx;
            }
          }
        }
        r.output[o] = best;
        r.argmax[o] = best_i;
      }
    }
  }
  return r;
}

template <class T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, std::span<const std::int64_t> argmax,
                             const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[static_cast<std::size_t>(argmax[o])] += dy[o];
  return dx;
}

template <class T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avgpool");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{N, C});
  for (std::int64_t i = 0; i < N * C; ++i) {
    Accum<T> s = 0;
    const T* p = x.data() + i * HW;
    for (std::int64_t j = 0; j < HW; ++j) s += p[j];
    y[i] = static_cast<T>(s / static_cast<Accum<T>>(HW));
  }
  return y;
}

template <class T>
Tensor<T> global_avgpool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const auto HW = input_shape[2] * input_shape[3];
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    T* p = dx.data() + static_cast<std::int64_t>(i) * HW;
    for (std::int64_t j = 0; j < HW; ++j) p[j] = dy[i] * inv;
  }
  return dx;
}

/// y = x W^T + b with x: N x F, W: G x F, b: G.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const auto N = x.dim(0), F = x.dim(1), G = w.dim(0);
  if (bias && bias->shape() != Shape{G})
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " expected [" +
                     std::to_string(G) + "]");
  Tensor<T> y(Shape{N, G});
  Eigen::Map<const RowMatrix<T>> X(x.data(), N, F), Wm(w.data(), G, F);
  Eigen::Map<RowMatrix<T>> Y(y.data(), N, G);
  Y.noalias() = X * Wm.transpose();
  if (bias)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t g = 0; g < G; ++g) Y(n, g) += (*bias)[g];
  return y;
}

template <class T>
struct LinearGrads {
  Tensor<T> input, weight, bias;
};

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const auto N = x.dim(0), F = x.dim(1), G = w.dim(0);
  if (dy.shape() != Shape{N, G})
    throw ShapeError("linear backward: gradient " + shape_str(dy.shape()));
  LinearGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>(Shape{G})};
  Eigen::Map<const RowMatrix<T>> X(x.data(), N, F), Wm(w.data(), G, F), dY(dy.data(), N, G);
  Eigen::Map<RowMatrix<T>>(r.input.data(), N, F).noalias() = dY * Wm;
  Eigen::Map<RowMatrix<T>>(r.weight.data(), G, F).noalias() = dY.transpose() * X;
  for (std::int64_t g = 0; g < G; ++g) {
    Accum<T> s = 0;
    for (std::int64_t n = 0; n < N; ++n) s += dy[n * G + g];
    r.bias[g] = static_cast<T>(s);
  }
  return r;
}

/// Row-wise softmax over the class axis of an N x C tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& z) {
  require_rank(z, 2, "softmax");
  const auto N = z.dim(0), C = z.dim(1);
  Tensor<T> p(z.shape());
  for (std::int64_t n = 0; n < N; ++n) {
    const T* row = z.data() + n * C;
    T m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    Accum<T> s = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const T e = std::exp(row[c] - m);
      p[n * C + c] = e;
      s += e;
    }
    for (std::int64_t c = 0; c < C; ++c)
      p[n * C + c] = static_cast<T>(p[n * C + c] / s);
  }
  return p;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& p, const Tensor<T>& dy) {
  require_same_shape(p, dy, "softmax backward");
  const auto N = p.dim(0), C = p.dim(1);
  Tensor<T> dz(p.shape());
  for (std::int64_t n = 0; n < N; ++n) {
    Accum<T> dot = 0;
    for (std::int64_t c = 0; c < C; ++c) dot += static_cast<Accum<T>>(dy[n * C + c]) * p[n * C + c];
    for (std::int64_t c = 0; c < C; ++c)
      dz[n * C + c] = p[n * C + c] * (dy[n * C + c] - static_cast<T>(dot));
  }
  return dz;
}

template <class T>
void check_labels(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0))
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || y >= logits.dim(1))
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(logits.dim(1)) + ")");
}

/// Mean over the batch of -log softmax(z)[label], via log-sum-exp with max
/// subtraction.
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const auto N = logits.dim(0), C = logits.dim(1);
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    const T* row = logits.data() + n * C;
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
    double s = 0.0;
    for (std::int64_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(row[c]) - m);
    total += (m + std::log(s)) - static_cast<double>(row[labels[static_cast<std::size_t>(n)]]);
  }
  return static_cast<T>(total / static_cast<double>(N));
}

/// Gradient of cross_entropy at the logits: (softmax(z) - onehot(y)) / N.
template <class T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, std::span<const int> labels, T scale = T(1)) {
  check_labels(logits, labels);
  const auto N = logits.dim(0), C = logits.dim(1);
  Tensor<T> g = softmax(logits);
  const T inv_n = scale / static_cast<T>(N);
  for (std::int64_t n = 0; n < N; ++n) {
    g[n * C + labels[static_cast<std::size_t>(n)]] -= T(1);
    for (std::int64_t c = 0; c < C; ++c) g[n * C + c] *= inv_n;
  }
  return g;
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& z) {
  require_rank(z, 2, "argmax");
  const auto N = z.dim(0), C = z.dim(1);
  std::vector<int> out(static_cast<std::size_t>(N));
  for (std::int64_t n = 0; n < N; ++n) {
    int best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (z[n * C + c] > z[n * C + best]) best = static_cast<int>(c);
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

}  // namespace rcmp::ops
