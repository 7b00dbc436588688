#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "afdet/augment.hpp"
#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/tensor.hpp"

namespace afdet::data {

// ImageNet-pretraining convention; the paper's backbones imply it but the
// constants themselves are a project decision, so they stay configurable.
inline constexpr std::array<double, 3> kImagenetMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImagenetStd{0.229, 0.224, 0.225};

template <typename T>
TensorT<T> normalize(const TensorT<T>& img, const std::array<double, 3>& mean,
                     const std::array<double, 3>& stddev) {
  require(img.rank() == 3 && img.dim(0) == 3, "normalize: image must be 3 x H x W");
  for (const double s : stddev)
    require(s > 0.0, "normalize: std components must be positive");
  TensorT<T> out(img.shape());
  const std::int64_t plane = img.dim(1) * img.dim(2);
  for (std::int64_t c = 0; c < 3; ++c) {
    const T m = T(mean[static_cast<std::size_t>(c)]);
    const T s = T(stddev[static_cast<std::size_t>(c)]);
    for (std::int64_t i = 0; i < plane; ++i)
      out[c * plane + i] = (img[c * plane + i] - m) / s;
  }
  return out;
}

template <typename T>
TensorT<T> denormalize(const TensorT<T>& img, const std::array<double, 3>& mean,
                       const std::array<double, 3>& stddev) {
  require(img.rank() == 3 && img.dim(0) == 3,
          "denormalize: image must be 3 x H x W");
  for (const double s : stddev)
    require(s > 0.0, "denormalize: std components must be positive");
  TensorT<T> out(img.shape());
  const std::int64_t plane = img.dim(1) * img.dim(2);
  for (std::int64_t c = 0; c < 3; ++c) {
    const T m = T(mean[static_cast<std::size_t>(c)]);
    const T s = T(stddev[static_cast<std::size_t>(c)]);
    for (std::int64_t i = 0; i < plane; ++i)
      out[c * plane + i] = img[c * plane + i] * s + m;
  }
  return out;
}

// Bilinear resize with half-pixel centers (align_corners=false).
template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& img, std::int64_t out_h,
                           std::int64_t out_w) {
  require(img.rank() == 3, "resize_bilinear: image must be C x H x W");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: output extents must be >= 1");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h == h && out_w == w) return img;

  TensorT<T> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::int64_t oy = 0; oy < out_h; ++oy) {
    double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, static_cast<double>(h - 1)));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const T wy = T(fy - static_cast<double>(y0));
    for (std::int64_t ox = 0; ox < out_w; ++ox) {
      double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, static_cast<double>(w - 1)));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, w - 1);
      const T wx = T(fx - static_cast<double>(x0));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T top = img(ch, y0, x0) * (T(1) - wx) + img(ch, y0, x1) * wx;
        const T bot = img(ch, y1, x0) * (T(1) - wx) + img(ch, y1, x1) * wx;
        out(ch, oy, ox) = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return out;
}

// Resizes the image and scales the boxes by (out_w/W, out_h/H).
template <typename T>
TrainSampleT<T> resize_bilinear(const TrainSampleT<T>& sample, std::int64_t out_h,
                                std::int64_t out_w) {
  sample.validate();
  const double sy =
      static_cast<double>(out_h) / static_cast<double>(sample.image.dim(1));
  const double sx =
      static_cast<double>(out_w) / static_cast<double>(sample.image.dim(2));
  TrainSampleT<T> out = sample;
  out.image = resize_bilinear(sample.image, out_h, out_w);
  for (auto& b : out.boxes)
    b = BBox{b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy};
  out.validate();
  return out;
}

}  // namespace afdet::data
