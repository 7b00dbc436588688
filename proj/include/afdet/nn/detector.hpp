#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/nn/blocks.hpp"
#include "afdet/nn/flops.hpp"
#include "afdet/nn/layers.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

struct DetectorConfig {
  int num_classes = 3;
  int head_width = 48;
  std::array<int, 4> stage_channels{16, 32, 64, 64};
  double loc_bias_init = -2.19;  // starts the heatmap near sigmoid ~ 0.1
  double reg_scale = 16.0;       // distances = reg_scale * exp(raw)

  void validate() const {
    require(num_classes >= 1, "DetectorConfig: num_classes must be >= 1");
    require(head_width >= 1, "DetectorConfig: head_width must be >= 1");
    for (const int c : stage_channels)
      require(c >= 1, "DetectorConfig: stage channels must be >= 1");
    require(reg_scale > 0.0, "DetectorConfig: reg_scale must be positive");
  }
};

template <typename T>
struct DetectorOutputT {
  TensorT<T> loc_logits;  // N x C x H/4 x W/4
  TensorT<T> heatmap;     // sigmoid(loc_logits)
  TensorT<T> reg_raw;     // N x 4 x H/4 x W/4
  TensorT<T> distances;   // reg_scale * exp(reg_raw)
};

// Small PAFNet-shaped detector: strided conv stem, three vd downsample
// stages (strides 4/8/16), a nearest-upsample path with lite blocks and 1x1
// lateral shortcuts back to stride 4, and two heads on the shared stride-4
// map: localization (C channels, sigmoid) and regression (4 channels,
// exponential positivity).
template <typename T>
class ToyDetectorT {
 public:
  struct Cache {
    TensorT<T> x0;
    TensorT<T> stem_c, stem_b;
    typename VdBlockT<T>::Cache s2, s3, s4;
    TensorT<T> f2, f3, f4;
    TensorT<T> up1;
    typename LiteBlockT<T>::Cache lite1;
    TensorT<T> l1, lat3_c, lat3_b, sum3, p3;
    TensorT<T> up2;
    typename LiteBlockT<T>::Cache lite2;
    TensorT<T> l2, lat2_c, lat2_b, sum2, p2;
    TensorT<T> loc_c, loc_b, loc_r;
    TensorT<T> reg_c, reg_b, reg_r;
    DetectorOutputT<T> out;
  };

  explicit ToyDetectorT(const DetectorConfig& cfg, std::uint64_t seed)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::stream(seed, "detector-init", 0, 0);
    const int c1 = cfg_.stage_channels[0], c2 = cfg_.stage_channels[1],
              c3 = cfg_.stage_channels[2], c4 = cfg_.stage_channels[3];
    const int hw = cfg_.head_width;

    stem_.init("stem", 3, c1, 3, 2, 1, 1, false, rng);
    stem_bn_.init("stem.bn", c1);
    stage2_.init("stage2", c1, c2, rng);
    stage3_.init("stage3", c2, c3, rng);
    stage4_.init("stage4", c3, c4, rng);
    lite1_.init("up1.lite", c4, c3, rng);
    lat3_.init("up1.lateral", c3, c3, 1, 1, 0, 1, false, rng);
    lat3_bn_.init("up1.lateral.bn", c3);
    lite2_.init("up2.lite", c3, hw, rng);
    lat2_.init("up2.lateral", c2, hw, 1, 1, 0, 1, false, rng);
    lat2_bn_.init("up2.lateral.bn", hw);
    loc_conv_.init("head.loc.conv", hw, hw, 3, 1, 1, 1, false, rng);
    loc_bn_.init("head.loc.bn", hw);
    loc_out_.init("head.loc.out", hw, cfg_.num_classes, 1, 1, 0, 1, true, rng);
    loc_out_.bias.value.fill(T(cfg_.loc_bias_init));
    reg_conv_.init("head.reg.conv", hw, hw, 3, 1, 1, 1, false, rng);
    reg_bn_.init("head.reg.bn", hw);
    reg_out_.init("head.reg.out", hw, 4, 1, 1, 0, 1, true, rng);
  }

  const DetectorConfig& config() const { return cfg_; }

  DetectorOutputT<T> forward(const TensorT<T>& x, bool training, Cache& cc) {
    require(x.rank() == 4 && x.dim(1) == 3,
            "detector: input must be N x 3 x H x W");
    require(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
            "detector: H and W must be divisible by 16");

    cc.x0 = x;
    cc.stem_c = stem_.forward(cc.x0);
    cc.stem_b = stem_bn_.forward(cc.stem_c, training);
    const auto stem_r = relu_forward(cc.stem_b);
    cc.f2 = stage2_.forward(stem_r, training, cc.s2);
    cc.f3 = stage3_.forward(cc.f2, training, cc.s3);
    cc.f4 = stage4_.forward(cc.f3, training, cc.s4);

    cc.up1 = upsample_nearest_forward(cc.f4, 2);
    cc.l1 = lite1_.forward(cc.up1, training, cc.lite1);
    cc.lat3_c = lat3_.forward(cc.f3);
    cc.lat3_b = lat3_bn_.forward(cc.lat3_c, training);
    cc.sum3 = shortcut_add(cc.l1, cc.lat3_b);
    cc.p3 = relu_forward(cc.sum3);

    cc.up2 = upsample_nearest_forward(cc.p3, 2);
    cc.l2 = lite2_.forward(cc.up2, training, cc.lite2);
    cc.lat2_c = lat2_.forward(cc.f2);
    cc.lat2_b = lat2_bn_.forward(cc.lat2_c, training);
    cc.sum2 = shortcut_add(cc.l2, cc.lat2_b);
    cc.p2 = relu_forward(cc.sum2);

    cc.loc_c = loc_conv_.forward(cc.p2);
    cc.loc_b = loc_bn_.forward(cc.loc_c, training);
    cc.loc_r = relu_forward(cc.loc_b);
    cc.out.loc_logits = loc_out_.forward(cc.loc_r);
    cc.out.heatmap = sigmoid_forward(cc.out.loc_logits);

    cc.reg_c = reg_conv_.forward(cc.p2);
    cc.reg_b = reg_bn_.forward(cc.reg_c, training);
    cc.reg_r = relu_forward(cc.reg_b);
    cc.out.reg_raw = reg_out_.forward(cc.reg_r);
    cc.out.distances = TensorT<T>(cc.out.reg_raw.shape());
    for (std::int64_t i = 0; i < cc.out.reg_raw.numel(); ++i)
      cc.out.distances[i] = T(cfg_.reg_scale) * std::exp(cc.out.reg_raw[i]);
    return cc.out;
  }

  // Backpropagates loss gradients given w.r.t. the sigmoid heatmap and the
  // positive distances; parameter gradients accumulate into the registry.
  void backward(const TensorT<T>& grad_heatmap,
                const TensorT<T>& grad_distances, const Cache& cc,
                bool training) {
    check_same_shape(grad_heatmap, cc.out.heatmap, "detector backward");
    check_same_shape(grad_distances, cc.out.distances, "detector backward");

    auto g_logits = sigmoid_backward(grad_heatmap, cc.out.heatmap);
    auto g_loc = loc_out_.backward(g_logits, cc.loc_r);
    g_loc = relu_backward(g_loc, cc.loc_b);
    g_loc = loc_bn_.backward(g_loc, cc.loc_c, training);
    auto g_p2 = loc_conv_.backward(g_loc, cc.p2);

    TensorT<T> g_raw(cc.out.reg_raw.shape());
    for (std::int64_t i = 0; i < g_raw.numel(); ++i)
      g_raw[i] = grad_distances[i] * cc.out.distances[i];
    auto g_reg = reg_out_.backward(g_raw, cc.reg_r);
    g_reg = relu_backward(g_reg, cc.reg_b);
    g_reg = reg_bn_.backward(g_reg, cc.reg_c, training);
    const auto g_p2_reg = reg_conv_.backward(g_reg, cc.p2);
    for (std::int64_t i = 0; i < g_p2.numel(); ++i) g_p2[i] += g_p2_reg[i];

    auto g_sum2 = relu_backward(g_p2, cc.sum2);
    auto g_lat2 = lat2_bn_.backward(g_sum2, cc.lat2_c, training);
    const auto g_f2_lateral = lat2_.backward(g_lat2, cc.f2);
    auto g_up2 = lite2_.backward(g_sum2, cc.lite2, training);
    auto g_p3 = upsample_nearest_backward(g_up2, 2);

    auto g_sum3 = relu_backward(g_p3, cc.sum3);
    auto g_lat3 = lat3_bn_.backward(g_sum3, cc.lat3_c, training);
    const auto g_f3_lateral = lat3_.backward(g_lat3, cc.f3);
    auto g_up1 = lite1_.backward(g_sum3, cc.lite1, training);
    auto g_f4 = upsample_nearest_backward(g_up1, 2);

    auto g_f3 = stage4_.backward(g_f4, cc.s4, training);
    for (std::int64_t i = 0; i < g_f3.numel(); ++i) g_f3[i] += g_f3_lateral[i];
    auto g_f2 = stage3_.backward(g_f3, cc.s3, training);
    for (std::int64_t i = 0; i < g_f2.numel(); ++i) g_f2[i] += g_f2_lateral[i];
    auto g_stem = stage2_.backward(g_f2, cc.s2, training);

    // stem_r = relu(stem_b); recompute the mask from the cached BN output.
    g_stem = relu_backward(g_stem, cc.stem_b);
    g_stem = stem_bn_.backward(g_stem, cc.stem_c, training);
    stem_.backward(g_stem, cc.x0);
  }

  std::vector<ParamT<T>*> trainable() {
    std::vector<ParamT<T>*> out;
    stem_.collect(out);
    stem_bn_.collect(out);
    stage2_.collect(out);
    stage3_.collect(out);
    stage4_.collect(out);
    lite1_.collect(out);
    lat3_.collect(out);
    lat3_bn_.collect(out);
    lite2_.collect(out);
    lat2_.collect(out);
    lat2_bn_.collect(out);
    loc_conv_.collect(out);
    loc_bn_.collect(out);
    loc_out_.collect(out);
    reg_conv_.collect(out);
    reg_bn_.collect(out);
    reg_out_.collect(out);
    return out;
  }

  std::vector<std::pair<std::string, TensorT<T>*>> buffers() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    stem_bn_.collect_buffers(out);
    stage2_.collect_buffers(out);
    stage3_.collect_buffers(out);
    stage4_.collect_buffers(out);
    lite1_.collect_buffers(out);
    lat3_bn_.collect_buffers(out);
    lite2_.collect_buffers(out);
    lat2_bn_.collect_buffers(out);
    loc_bn_.collect_buffers(out);
    reg_bn_.collect_buffers(out);
    return out;
  }

  void zero_grad() {
    for (ParamT<T>* p : trainable()) p->zero_grad();
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (const ParamT<T>* p : trainable()) n += p->value.numel();
    return n;
  }

  // Static MAC description for an H x W input (per image).
  std::vector<LayerDesc> flops_descs(std::int64_t h, std::int64_t w) const {
    require(h % 16 == 0 && w % 16 == 0,
            "flops_descs: H and W must be divisible by 16");
    std::vector<LayerDesc> v;
    const auto add = [&v](std::vector<LayerDesc> more) {
      for (auto& d : more) v.push_back(std::move(d));
    };
    const std::int64_t c1 = cfg_.stage_channels[0], c2 = cfg_.stage_channels[1],
                       c3 = cfg_.stage_channels[2], c4 = cfg_.stage_channels[3];
    const std::int64_t hw = cfg_.head_width;
    v.push_back(conv_desc("stem", c1, h / 2, w / 2, 3, 3));
    v.push_back(elementwise_desc("stem.bn", c1 * (h / 2) * (w / 2)));
    add(stage2_.descs(h / 2, w / 2));
    add(stage3_.descs(h / 4, w / 4));
    add(stage4_.descs(h / 8, w / 8));
    v.push_back(elementwise_desc("up1.upsample", c4 * (h / 8) * (w / 8)));
    add(lite1_.descs(h / 8, w / 8));
    v.push_back(conv_desc("up1.lateral", c3, h / 8, w / 8, 1, c3));
    v.push_back(elementwise_desc("up1.lateral.bn", c3 * (h / 8) * (w / 8)));
    v.push_back(elementwise_desc("up1.add", c3 * (h / 8) * (w / 8)));
    v.push_back(elementwise_desc("up2.upsample", c3 * (h / 4) * (w / 4)));
    add(lite2_.descs(h / 4, w / 4));
    v.push_back(conv_desc("up2.lateral", hw, h / 4, w / 4, 1, c2));
    v.push_back(elementwise_desc("up2.lateral.bn", hw * (h / 4) * (w / 4)));
    v.push_back(elementwise_desc("up2.add", hw * (h / 4) * (w / 4)));
    v.push_back(conv_desc("head.loc.conv", hw, h / 4, w / 4, 3, hw));
    v.push_back(elementwise_desc("head.loc.bn", hw * (h / 4) * (w / 4)));
    v.push_back(conv_desc("head.loc.out", cfg_.num_classes, h / 4, w / 4, 1, hw));
    v.push_back(conv_desc("head.reg.conv", hw, h / 4, w / 4, 3, hw));
    v.push_back(elementwise_desc("head.reg.bn", hw * (h / 4) * (w / 4)));
    v.push_back(conv_desc("head.reg.out", 4, h / 4, w / 4, 1, hw));
    return v;
  }

 private:
  DetectorConfig cfg_;
  Conv2dLayerT<T> stem_;
  BatchNorm2dT<T> stem_bn_;
  VdBlockT<T> stage2_, stage3_, stage4_;
  LiteBlockT<T> lite1_;
  Conv2dLayerT<T> lat3_;
  BatchNorm2dT<T> lat3_bn_;
  LiteBlockT<T> lite2_;
  Conv2dLayerT<T> lat2_;
  BatchNorm2dT<T> lat2_bn_;
  Conv2dLayerT<T> loc_conv_;
  BatchNorm2dT<T> loc_bn_;
  Conv2dLayerT<T> loc_out_;
  Conv2dLayerT<T> reg_conv_;
  BatchNorm2dT<T> reg_bn_;
  Conv2dLayerT<T> reg_out_;
};

using ToyDetector = ToyDetectorT<float>;

}  // namespace afdet::nn
