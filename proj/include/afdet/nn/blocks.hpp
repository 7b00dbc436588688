#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/nn/flops.hpp"
#include "afdet/nn/layers.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

// Convolution layer owning its parameters. Weights use He-normal init;
// bias-free layers are the norm here since batch norm follows most convs.
template <typename T>
struct Conv2dLayerT {
  std::int64_t in_ch = 0, out_ch = 0, ksize = 1, stride = 1, padding = 0,
               groups = 1;
  bool has_bias = false;
  ParamT<T> weight;
  ParamT<T> bias;

  void init(const std::string& name, std::int64_t in, std::int64_t out,
            std::int64_t k, std::int64_t s, std::int64_t p, std::int64_t g,
            bool with_bias, Rng& rng) {
    in_ch = in;
    out_ch = out;
    ksize = k;
    stride = s;
    padding = p;
    groups = g;
    has_bias = with_bias;
    weight.init(name + ".weight", {out, in / g, k, k});
    const double fan_in = static_cast<double>((in / g) * k * k);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < weight.value.numel(); ++i)
      weight.value[i] = T(rng.normal() * stddev);
    if (with_bias) bias.init(name + ".bias", {out});
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return conv2d_forward(x, weight.value, has_bias ? bias.value : TensorT<T>{},
                          stride, padding, groups);
  }

  TensorT<T> backward(const TensorT<T>& grad_out, const TensorT<T>& x) {
    auto g = conv2d_backward(grad_out, x, weight.value, stride, padding, groups);
    for (std::int64_t i = 0; i < g.weight.numel(); ++i)
      weight.grad[i] += g.weight[i];
    if (has_bias)
      for (std::int64_t i = 0; i < g.bias.numel(); ++i) bias.grad[i] += g.bias[i];
    return std::move(g.x);
  }

  void collect(std::vector<ParamT<T>*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }

  LayerDesc desc(std::int64_t oh, std::int64_t ow) const {
    return conv_desc(weight.name, out_ch, oh, ow, ksize, in_ch, groups);
  }
};

// Batch norm layer; running statistics are buffers (saved, never SGD-updated).
template <typename T>
struct BatchNorm2dT {
  std::int64_t channels = 0;
  ParamT<T> gamma;
  ParamT<T> beta;
  std::string mean_name, var_name;
  TensorT<T> running_mean, running_var;
  BatchNormCacheT<T> cache;

  void init(const std::string& name, std::int64_t c) {
    channels = c;
    gamma.init(name + ".gamma", {c});
    gamma.value.fill(T(1));
    beta.init(name + ".beta", {c});
    mean_name = name + ".running_mean";
    var_name = name + ".running_var";
    running_mean = TensorT<T>({c});
    running_var = TensorT<T>({c}, T(1));
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    return batchnorm_forward(x, gamma.value, beta.value, running_mean,
                             running_var, training, &cache);
  }

  TensorT<T> backward(const TensorT<T>& grad_out, const TensorT<T>& x,
                      bool training) {
    auto g = batchnorm_backward(grad_out, x, gamma.value, cache, training);
    for (std::int64_t i = 0; i < channels; ++i) {
      gamma.grad[i] += g.gamma[i];
      beta.grad[i] += g.beta[i];
    }
    return std::move(g.x);
  }

  void collect(std::vector<ParamT<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  void collect_buffers(std::vector<std::pair<std::string, TensorT<T>*>>& out) {
    out.emplace_back(mean_name, &running_mean);
    out.emplace_back(var_name, &running_var);
  }
};

// Lite block: depthwise 5x5 -> pointwise 1x1 -> pointwise 1x1 -> depthwise
// 5x5, each followed by batch norm and ReLU. Keeps spatial extent (stride 1,
// padding 2 on the 5-kernels).
template <typename T>
struct LiteBlockT {
  static constexpr std::array<std::int64_t, 4> kKernelChain{5, 1, 1, 5};

  std::int64_t in_ch = 0, out_ch = 0;
  Conv2dLayerT<T> conv1, conv2, conv3, conv4;
  BatchNorm2dT<T> bn1, bn2, bn3, bn4;

  struct Cache {
    TensorT<T> x0, c1, r1, c2, r2, c3, r3, c4;
    TensorT<T> b1, b2, b3, b4;
  };

  void init(const std::string& name, std::int64_t in, std::int64_t out,
            Rng& rng) {
    in_ch = in;
    out_ch = out;
    conv1.init(name + ".dw_in", in, in, kKernelChain[0], 1, 2, in, false, rng);
    bn1.init(name + ".bn1", in);
    conv2.init(name + ".pw1", in, out, kKernelChain[1], 1, 0, 1, false, rng);
    bn2.init(name + ".bn2", out);
    conv3.init(name + ".pw2", out, out, kKernelChain[2], 1, 0, 1, false, rng);
    bn3.init(name + ".bn3", out);
    conv4.init(name + ".dw_out", out, out, kKernelChain[3], 1, 2, out, false,
               rng);
    bn4.init(name + ".bn4", out);
  }

  TensorT<T> forward(const TensorT<T>& x, bool training, Cache& cc) {
    require(x.rank() == 4 && x.dim(1) == in_ch,
            "lite_block: input channels do not match");
    cc.x0 = x;
    cc.c1 = conv1.forward(cc.x0);
    cc.b1 = bn1.forward(cc.c1, training);
    cc.r1 = relu_forward(cc.b1);
    cc.c2 = conv2.forward(cc.r1);
    cc.b2 = bn2.forward(cc.c2, training);
    cc.r2 = relu_forward(cc.b2);
    cc.c3 = conv3.forward(cc.r2);
    cc.b3 = bn3.forward(cc.c3, training);
    cc.r3 = relu_forward(cc.b3);
    cc.c4 = conv4.forward(cc.r3);
    cc.b4 = bn4.forward(cc.c4, training);
    return relu_forward(cc.b4);
  }

  TensorT<T> backward(const TensorT<T>& grad_out, const Cache& cc,
                      bool training) {
    auto g = relu_backward(grad_out, cc.b4);
    g = bn4.backward(g, cc.c4, training);
    g = conv4.backward(g, cc.r3);
    g = relu_backward(g, cc.b3);
    g = bn3.backward(g, cc.c3, training);
    g = conv3.backward(g, cc.r2);
    g = relu_backward(g, cc.b2);
    g = bn2.backward(g, cc.c2, training);
    g = conv2.backward(g, cc.r1);
    g = relu_backward(g, cc.b1);
    g = bn1.backward(g, cc.c1, training);
    return conv1.backward(g, cc.x0);
  }

  void collect(std::vector<ParamT<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    conv3.collect(out);
    bn3.collect(out);
    conv4.collect(out);
    bn4.collect(out);
  }

  void collect_buffers(std::vector<std::pair<std::string, TensorT<T>*>>& out) {
    bn1.collect_buffers(out);
    bn2.collect_buffers(out);
    bn3.collect_buffers(out);
    bn4.collect_buffers(out);
  }

  std::vector<LayerDesc> descs(std::int64_t h, std::int64_t w) const {
    return lite_block_descs(in_ch, out_ch, h, w);
  }
};

// Downsampling residual block in the vd style: the identity path average-
// pools before its 1x1 projection instead of using a strided convolution.
// Main path: 3x3 stride-2 conv -> bn -> relu -> 3x3 conv -> bn; both paths
// sum and pass through a final ReLU. Spatial extents must be even.
template <typename T>
struct VdBlockT {
  std::int64_t in_ch = 0, out_ch = 0;
  Conv2dLayerT<T> conv1, conv2, proj;
  BatchNorm2dT<T> bn1, bn2, bn_proj;

  struct Cache {
    TensorT<T> x0, c1, b1, r1, c2, b2;
    TensorT<T> pooled, pc, pb;
    TensorT<T> sum;
  };

  void init(const std::string& name, std::int64_t in, std::int64_t out,
            Rng& rng) {
    in_ch = in;
    out_ch = out;
    conv1.init(name + ".conv1", in, out, 3, 2, 1, 1, false, rng);
    bn1.init(name + ".bn1", out);
    conv2.init(name + ".conv2", out, out, 3, 1, 1, 1, false, rng);
    bn2.init(name + ".bn2", out);
    proj.init(name + ".proj", in, out, 1, 1, 0, 1, false, rng);
    bn_proj.init(name + ".bn_proj", out);
  }

  TensorT<T> forward(const TensorT<T>& x, bool training, Cache& cc) {
    require(x.rank() == 4 && x.dim(1) == in_ch,
            "vd_block: input channels do not match");
    require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
            "vd_block: spatial extents must be even");
    cc.x0 = x;
    cc.c1 = conv1.forward(cc.x0);
    cc.b1 = bn1.forward(cc.c1, training);
    cc.r1 = relu_forward(cc.b1);
    cc.c2 = conv2.forward(cc.r1);
    cc.b2 = bn2.forward(cc.c2, training);
    cc.pooled = avgpool2x2_forward(cc.x0);
    cc.pc = proj.forward(cc.pooled);
    cc.pb = bn_proj.forward(cc.pc, training);
    cc.sum = shortcut_add(cc.b2, cc.pb);
    return relu_forward(cc.sum);
  }

  TensorT<T> backward(const TensorT<T>& grad_out, const Cache& cc,
                      bool training) {
    const auto g_sum = relu_backward(grad_out, cc.sum);
    // Main path.
    auto g = bn2.backward(g_sum, cc.c2, training);
    g = conv2.backward(g, cc.r1);
    g = relu_backward(g, cc.b1);
    g = bn1.backward(g, cc.c1, training);
    auto gx = conv1.backward(g, cc.x0);
    // Shortcut path.
    auto gp = bn_proj.backward(g_sum, cc.pc, training);
    gp = proj.backward(gp, cc.pooled);
    const auto gpool = avgpool2x2_backward(gp, cc.x0.shape());
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gpool[i];
    return gx;
  }

  void collect(std::vector<ParamT<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    proj.collect(out);
    bn_proj.collect(out);
  }

  void collect_buffers(std::vector<std::pair<std::string, TensorT<T>*>>& out) {
    bn1.collect_buffers(out);
    bn2.collect_buffers(out);
    bn_proj.collect_buffers(out);
  }

  std::vector<LayerDesc> descs(std::int64_t h, std::int64_t w) const {
    const std::int64_t oh = h / 2, ow = w / 2;
    return {
        conv_desc(conv1.weight.name, out_ch, oh, ow, 3, in_ch),
        elementwise_desc(bn1.mean_name, out_ch * oh * ow),
        conv_desc(conv2.weight.name, out_ch, oh, ow, 3, out_ch),
        elementwise_desc(bn2.mean_name, out_ch * oh * ow),
        elementwise_desc("avgpool", in_ch * oh * ow),
        conv_desc(proj.weight.name, out_ch, oh, ow, 1, in_ch),
        elementwise_desc(bn_proj.mean_name, out_ch * oh * ow),
        elementwise_desc("shortcut_add", out_ch * oh * ow),
    };
  }
};

}  // namespace afdet::nn
