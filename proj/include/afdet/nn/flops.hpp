#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afdet/common.hpp"

namespace afdet::nn {

// Static description of one layer for MAC counting. Convolutions cost
// output_elements * kernel_volume * cin / groups; everything else
// (batch norm, shortcut adds, pooling, upsampling) costs one MAC per output
// element.
struct LayerDesc {
  enum class Kind { kConv, kElementwise };

  std::string name;
  Kind kind = Kind::kElementwise;
  std::int64_t output_elements = 0;
  std::int64_t kernel_volume = 1;  // conv only
  std::int64_t cin = 1;            // conv only
  std::int64_t groups = 1;         // conv only
};

inline std::int64_t layer_macs(const LayerDesc& d) {
  require(d.output_elements > 0,
          "flops_count: layer '" + d.name + "' has unknown (dynamic) shape");
  if (d.kind == LayerDesc::Kind::kConv) {
    require(d.kernel_volume > 0 && d.cin > 0 && d.groups > 0 &&
                d.cin % d.groups == 0,
            "flops_count: bad conv description for '" + d.name + "'");
    return d.output_elements * d.kernel_volume * (d.cin / d.groups);
  }
  return d.output_elements;
}

inline std::int64_t flops_count(const std::vector<LayerDesc>& layers) {
  std::int64_t total = 0;
  for (const auto& d : layers) total += layer_macs(d);
  return total;
}

// MACs of the convolutions alone; used for like-for-like comparisons against
// a bare convolution (which carries no normalization layers).
inline std::int64_t conv_flops(const std::vector<LayerDesc>& layers) {
  std::int64_t total = 0;
  for (const auto& d : layers)
    if (d.kind == LayerDesc::Kind::kConv) total += layer_macs(d);
  return total;
}

inline LayerDesc conv_desc(std::string name, std::int64_t cout,
                           std::int64_t oh, std::int64_t ow, std::int64_t k,
                           std::int64_t cin, std::int64_t groups = 1) {
  LayerDesc d;
  d.name = std::move(name);
  d.kind = LayerDesc::Kind::kConv;
  d.output_elements = cout * oh * ow;
  d.kernel_volume = k * k;
  d.cin = cin;
  d.groups = groups;
  return d;
}

inline LayerDesc elementwise_desc(std::string name, std::int64_t elements) {
  LayerDesc d;
  d.name = std::move(name);
  d.kind = LayerDesc::Kind::kElementwise;
  d.output_elements = elements;
  return d;
}

// The four convolutions (plus batch norms) of a lite block with kernel chain
// 5,1,1,5 mapping cin -> cout channels on an h x w map.
inline std::vector<LayerDesc> lite_block_descs(std::int64_t cin,
                                               std::int64_t cout,
                                               std::int64_t h, std::int64_t w) {
  std::vector<LayerDesc> v;
  v.push_back(conv_desc("lite.dw5_in", cin, h, w, 5, cin, cin));
  v.push_back(elementwise_desc("lite.bn1", cin * h * w));
  v.push_back(conv_desc("lite.pw1", cout, h, w, 1, cin));
  v.push_back(elementwise_desc("lite.bn2", cout * h * w));
  v.push_back(conv_desc("lite.pw2", cout, h, w, 1, cout));
  v.push_back(elementwise_desc("lite.bn3", cout * h * w));
  v.push_back(conv_desc("lite.dw5_out", cout, h, w, 5, cout, cout));
  v.push_back(elementwise_desc("lite.bn4", cout * h * w));
  return v;
}

// Conv-only MAC ratio of a lite block against a plain 5x5 convolution with
// the same channel count: (2*25*c + 2*c^2) / (25*c^2).
inline double lite_plain_conv_ratio(std::int64_t c, std::int64_t h,
                                    std::int64_t w) {
  const auto lite = conv_flops(lite_block_descs(c, c, h, w));
  const auto plain = layer_macs(conv_desc("plain5x5", c, h, w, 5, c));
  return static_cast<double>(lite) / static_cast<double>(plain);
}

}  // namespace afdet::nn
