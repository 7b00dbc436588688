#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

// Named trainable tensor with its gradient and SGD velocity.
template <typename T>
struct ParamT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;
  TensorT<T> velocity;

  void init(std::string n, std::vector<std::int64_t> shape) {
    name = std::move(n);
    value = TensorT<T>(shape);
    grad = TensorT<T>(shape);
    velocity = TensorT<T>(std::move(shape));
  }
  void zero_grad() { grad.fill(T(0)); }
};

using Param = ParamT<float>;

inline void check_conv_geometry(std::int64_t extent, std::int64_t k,
                                std::int64_t stride, std::int64_t padding) {
  require(stride >= 1 && padding >= 0 && k >= 1,
          "conv2d: stride/padding/kernel out of range");
  require(extent + 2 * padding >= k, "conv2d: kernel larger than padded input");
}

inline std::int64_t conv_out_extent(std::int64_t extent, std::int64_t k,
                                    std::int64_t stride, std::int64_t padding) {
  return (extent + 2 * padding - k) / stride + 1;
}

// Cross-correlation on NCHW input. weight is [Cout, Cin/groups, k, k]; bias
// may be empty (rank 0) for layers followed by batch norm.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& weight,
                          const TensorT<T>& bias, std::int64_t stride,
                          std::int64_t padding, std::int64_t groups) {
  require(x.rank() == 4, "conv2d: input must be N x C x h x w");
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be Cout x Cin/g x k x k");
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), k = weight.dim(2);
  require(groups >= 1 && cin % groups == 0 && cout % groups == 0,
          "conv2d: groups must divide both channel counts");
  require(weight.dim(1) == cin / groups,
          "conv2d: weight channel extent does not match input/groups");
  require(bias.numel() == 0 || (bias.rank() == 1 && bias.dim(0) == cout),
          "conv2d: bias must be empty or length Cout");
  check_conv_geometry(h, k, stride, padding);
  check_conv_geometry(w, k, stride, padding);

  const std::int64_t oh = conv_out_extent(h, k, stride, padding);
  const std::int64_t ow = conv_out_extent(w, k, stride, padding);
  const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;

  TensorT<T> y({n, cout, oh, ow});
  const T* xd = x.data();
  const T* wd = weight.data();
  T* yd = y.data();
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t g = co / cpg_out;
      const T b = bias.numel() ? bias[co] : T(0);
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        // Hoist the padding bounds out of the inner loops.
        const std::int64_t ky_lo = std::max<std::int64_t>(0, padding - oy * stride);
        const std::int64_t ky_hi = std::min(k, h + padding - oy * stride);
        T* yrow = yd + ((img * cout + co) * oh + oy) * ow;
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const std::int64_t kx_lo =
              std::max<std::int64_t>(0, padding - ox * stride);
          const std::int64_t kx_hi = std::min(k, w + padding - ox * stride);
          const std::int64_t x0 = ox * stride - padding;
          T acc = b;
          for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
            const T* xch = xd + ((img * cin + g * cpg_in + ci) * h) * w;
            const T* wch = wd + ((co * cpg_in + ci) * k) * k;
            for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const T* xrow = xch + (oy * stride + ky - padding) * w + x0;
              const T* wrow = wch + ky * k;
              for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx)
                acc += xrow[kx] * wrow[kx];
            }
          }
          yrow[ox] = acc;
        }
      }
    }
  return y;
}

template <typename T>
struct ConvGradsT {
  TensorT<T> x;
  TensorT<T> weight;
  TensorT<T> bias;
};

// Exact gradients of conv2d_forward. grad_out must have the forward output
// shape; the returned bias gradient always has length Cout (callers without a
// bias simply ignore it).
template <typename T>
ConvGradsT<T> conv2d_backward(const TensorT<T>& grad_out, const TensorT<T>& x,
                              const TensorT<T>& weight, std::int64_t stride,
                              std::int64_t padding, std::int64_t groups) {
  require(x.rank() == 4 && weight.rank() == 4 && grad_out.rank() == 4,
          "conv2d_backward: rank-4 tensors expected");
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), k = weight.dim(2);
  require(groups >= 1 && cin % groups == 0 && cout % groups == 0 &&
              weight.dim(1) == cin / groups,
          "conv2d_backward: inconsistent channel/group setup");
  const std::int64_t oh = conv_out_extent(h, k, stride, padding);
  const std::int64_t ow = conv_out_extent(w, k, stride, padding);
  require(grad_out.dim(0) == n && grad_out.dim(1) == cout &&
              grad_out.dim(2) == oh && grad_out.dim(3) == ow,
          "conv2d_backward: grad_out shape mismatch");
  const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;

  ConvGradsT<T> g;
  g.x = TensorT<T>(x.shape());
  g.weight = TensorT<T>(weight.shape());
  g.bias = TensorT<T>({cout});
  const T* xd = x.data();
  const T* wd = weight.data();
  const T* god = grad_out.data();
  T* gxd = g.x.data();
  T* gwd = g.weight.data();
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t grp = co / cpg_out;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t ky_lo = std::max<std::int64_t>(0, padding - oy * stride);
        const std::int64_t ky_hi = std::min(k, h + padding - oy * stride);
        const T* gorow = god + ((img * cout + co) * oh + oy) * ow;
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const T go = gorow[ox];
          if (go == T(0)) continue;
          g.bias[co] += go;
          const std::int64_t kx_lo =
              std::max<std::int64_t>(0, padding - ox * stride);
          const std::int64_t kx_hi = std::min(k, w + padding - ox * stride);
          const std::int64_t x0 = ox * stride - padding;
          for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
            const std::int64_t ch = grp * cpg_in + ci;
            const T* xch = xd + ((img * cin + ch) * h) * w;
            T* gxch = gxd + ((img * cin + ch) * h) * w;
            const T* wch = wd + ((co * cpg_in + ci) * k) * k;
            T* gwch = gwd + ((co * cpg_in + ci) * k) * k;
            for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const std::int64_t row = (oy * stride + ky - padding) * w + x0;
              const T* xrow = xch + row;
              T* gxrow = gxch + row;
              const T* wrow = wch + ky * k;
              T* gwrow = gwch + ky * k;
              for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                gxrow[kx] += go * wrow[kx];
                gwrow[kx] += go * xrow[kx];
              }
            }
          }
        }
      }
    }
  return g;
}

inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEps = 1e-5;

template <typename T>
struct BatchNormCacheT {
  TensorT<T> mean;     // per channel
  TensorT<T> inv_std;  // per channel, 1/sqrt(var + eps)
};

// Training mode normalizes with batch statistics (biased variance) and blends
// them into the running stats: running <- momentum*running + (1-m)*batch.
// Eval mode normalizes with the running stats. Training needs batch size >= 2.
template <typename T>
TensorT<T> batchnorm_forward(const TensorT<T>& x, const TensorT<T>& gamma,
                             const TensorT<T>& beta, TensorT<T>& running_mean,
                             TensorT<T>& running_var, bool training,
                             BatchNormCacheT<T>* cache,
                             double momentum = kBnMomentum,
                             double eps = kBnEps) {
  require(x.rank() == 4, "batchnorm: input must be N x C x h x w");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
              running_var.numel() == c,
          "batchnorm: per-channel tensors must have length C");
  if (training) require(n >= 2, "batchnorm: training mode needs batch size >= 2");

  const std::int64_t count = n * h * w;
  TensorT<T> mean({c}), inv_std({c});
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T m = T(0);
      for (std::int64_t img = 0; img < n; ++img)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < w; ++xx) m += x(img, ch, y, xx);
      m /= T(count);
      T v = T(0);
      for (std::int64_t img = 0; img < n; ++img)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const T d = x(img, ch, y, xx) - m;
            v += d * d;
          }
      v /= T(count);
      mean[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(v + T(eps));
      running_mean[ch] = T(momentum) * running_mean[ch] + (T(1) - T(momentum)) * m;
      running_var[ch] = T(momentum) * running_var[ch] + (T(1) - T(momentum)) * v;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + T(eps));
    }
  }

  TensorT<T> y(x.shape());
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T m = mean[ch], is = inv_std[ch], ga = gamma[ch], be = beta[ch];
      for (std::int64_t yy = 0; yy < h; ++yy)
        for (std::int64_t xx = 0; xx < w; ++xx)
          y(img, ch, yy, xx) = ga * (x(img, ch, yy, xx) - m) * is + be;
    }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
struct BatchNormGradsT {
  TensorT<T> x;
  TensorT<T> gamma;
  TensorT<T> beta;
};

// Backward through the training-mode normalization (batch statistics are a
// function of x). Pass training=false for the eval-mode affine map, where the
// running stats are constants.
template <typename T>
BatchNormGradsT<T> batchnorm_backward(const TensorT<T>& grad_out,
                                      const TensorT<T>& x,
                                      const TensorT<T>& gamma,
                                      const BatchNormCacheT<T>& cache,
                                      bool training = true) {
  check_same_shape(grad_out, x, "batchnorm_backward");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const T count = T(n * h * w);

  BatchNormGradsT<T> g;
  g.x = TensorT<T>(x.shape());
  g.gamma = TensorT<T>({c});
  g.beta = TensorT<T>({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T m = cache.mean[ch], is = cache.inv_std[ch];
    T sum_dy = T(0), sum_dy_xhat = T(0);
    for (std::int64_t img = 0; img < n; ++img)
      for (std::int64_t yy = 0; yy < h; ++yy)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const T dy = grad_out(img, ch, yy, xx);
          const T xhat = (x(img, ch, yy, xx) - m) * is;
          sum_dy += dy;
          sum_dy_xhat += dy * xhat;
        }
    g.gamma[ch] = sum_dy_xhat;
    g.beta[ch] = sum_dy;
    const T ga_is = gamma[ch] * is;
    for (std::int64_t img = 0; img < n; ++img)
      for (std::int64_t yy = 0; yy < h; ++yy)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const T dy = grad_out(img, ch, yy, xx);
          if (training) {
            const T xhat = (x(img, ch, yy, xx) - m) * is;
            g.x(img, ch, yy, xx) =
                ga_is * (dy - sum_dy / count - xhat * sum_dy_xhat / count);
          } else {
            g.x(img, ch, yy, xx) = ga_is * dy;
          }
        }
  }
  return g;
}

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& x) {
  check_same_shape(grad_out, x, "relu_backward");
  TensorT<T> g(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
TensorT<T> sigmoid_forward(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    y[i] = T(1) / (T(1) + std::exp(-x[i]));
  return y;
}

// Takes the forward output y, not the input.
template <typename T>
TensorT<T> sigmoid_backward(const TensorT<T>& grad_out, const TensorT<T>& y) {
  check_same_shape(grad_out, y, "sigmoid_backward");
  TensorT<T> g(y.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i)
    g[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return g;
}

// 2x2 average pooling with stride 2; spatial extents must be even.
template <typename T>
TensorT<T> avgpool2x2_forward(const TensorT<T>& x) {
  require(x.rank() == 4, "avgpool2x2: input must be N x C x h x w");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "avgpool2x2: spatial extents must be even");
  TensorT<T> y({n, c, h / 2, w / 2});
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t oy = 0; oy < h / 2; ++oy)
        for (std::int64_t ox = 0; ox < w / 2; ++ox)
          y(img, ch, oy, ox) =
              (x(img, ch, 2 * oy, 2 * ox) + x(img, ch, 2 * oy, 2 * ox + 1) +
               x(img, ch, 2 * oy + 1, 2 * ox) +
               x(img, ch, 2 * oy + 1, 2 * ox + 1)) /
              T(4);
  return y;
}

template <typename T>
TensorT<T> avgpool2x2_backward(const TensorT<T>& grad_out,
                               const std::vector<std::int64_t>& input_shape) {
  require(grad_out.rank() == 4 && input_shape.size() == 4,
          "avgpool2x2_backward: rank-4 tensors expected");
  TensorT<T> g(input_shape);
  for (std::int64_t img = 0; img < grad_out.dim(0); ++img)
    for (std::int64_t ch = 0; ch < grad_out.dim(1); ++ch)
      for (std::int64_t oy = 0; oy < grad_out.dim(2); ++oy)
        for (std::int64_t ox = 0; ox < grad_out.dim(3); ++ox) {
          const T q = grad_out(img, ch, oy, ox) / T(4);
          g(img, ch, 2 * oy, 2 * ox) = q;
          g(img, ch, 2 * oy, 2 * ox + 1) = q;
          g(img, ch, 2 * oy + 1, 2 * ox) = q;
          g(img, ch, 2 * oy + 1, 2 * ox + 1) = q;
        }
  return g;
}

template <typename T>
TensorT<T> upsample_nearest_forward(const TensorT<T>& x, std::int64_t factor) {
  require(x.rank() == 4, "upsample_nearest: input must be N x C x h x w");
  require(factor >= 2, "upsample_nearest: factor must be an integer >= 2");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  TensorT<T> y({n, c, h * factor, w * factor});
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < h * factor; ++yy)
        for (std::int64_t xx = 0; xx < w * factor; ++xx)
          y(img, ch, yy, xx) = x(img, ch, yy / factor, xx / factor);
  return y;
}

// Sums the gradient over each replication block.
template <typename T>
TensorT<T> upsample_nearest_backward(const TensorT<T>& grad_out,
                                     std::int64_t factor) {
  require(grad_out.rank() == 4 && factor >= 2,
          "upsample_nearest_backward: bad arguments");
  require(grad_out.dim(2) % factor == 0 && grad_out.dim(3) % factor == 0,
          "upsample_nearest_backward: extents not divisible by factor");
  const std::int64_t n = grad_out.dim(0), c = grad_out.dim(1);
  const std::int64_t h = grad_out.dim(2) / factor, w = grad_out.dim(3) / factor;
  TensorT<T> g({n, c, h, w});
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < grad_out.dim(2); ++yy)
        for (std::int64_t xx = 0; xx < grad_out.dim(3); ++xx)
          g(img, ch, yy / factor, xx / factor) += grad_out(img, ch, yy, xx);
  return g;
}

template <typename T>
TensorT<T> shortcut_add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "shortcut_add");
  TensorT<T> y(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

}  // namespace afdet::nn
