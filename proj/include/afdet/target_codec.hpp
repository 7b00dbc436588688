#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/tensor.hpp"

namespace afdet {

// Single-level head: feature maps live at 1/4 of input resolution.
inline constexpr int kStride = 4;
inline constexpr double kDefaultGaussianAlpha = 0.54;
inline constexpr int kDefaultTopK = 100;
inline constexpr double kDefaultScoreThresh = 0.01;

// Elliptical Gaussian on the feature grid. Peak value is 1 at the cell
// nearest (center_x, center_y); support_* are half-extents in cells.
struct GaussianSpec {
  double center_x{}, center_y{};
  double sigma_x{}, sigma_y{};
  double support_x{}, support_y{};
};

struct GroundTruth {
  BBox box;
  int class_id{};
};

struct Detection {
  BBox box;
  int class_id{};
  double score{};
};

// Per-image training targets at feature resolution.
//   class_heatmap: C x h x w in [0,1], one exact 1 per object (peak)
//   reg_target:    4 x h x w signed side distances (l, t, r, b) in input px
//   weight_map:    h x w regression sample weights, nonzero only on owned cells
//   object_id:     h x w owning ground-truth index, -1 = background
template <typename T>
struct EncodedTargetsT {
  TensorT<T> class_heatmap;
  TensorT<T> reg_target;
  TensorT<T> weight_map;
  ITensor object_id;
  int input_h{}, input_w{};
  // Objects whose every support cell was taken by a smaller object.
  std::vector<int> evicted;
};

using EncodedTargets = EncodedTargetsT<float>;

inline GaussianSpec gaussian_spec_for_box(const BBox& box, int feat_h,
                                          int feat_w,
                                          double alpha = kDefaultGaussianAlpha) {
  const double fw = box.width() / kStride;
  const double fh = box.height() / kStride;
  GaussianSpec spec;
  spec.center_x = std::clamp(
      std::round(box.center_x() / kStride), 0.0, double(feat_w - 1));
  spec.center_y = std::clamp(
      std::round(box.center_y() / kStride), 0.0, double(feat_h - 1));
  spec.sigma_x = alpha * fw / 6.0;
  spec.sigma_y = alpha * fh / 6.0;
  spec.support_x = std::max(1.0, 3.0 * spec.sigma_x);
  spec.support_y = std::max(1.0, 3.0 * spec.sigma_y);
  return spec;
}

// Renders the kernel on an h x w grid: exp of the separable quadratic inside
// the elliptical support, exactly 0 outside, peak-normalized to 1.
template <typename T>
TensorT<T> gaussian_kernel(const GaussianSpec& spec, int h, int w) {
  require(spec.sigma_x > 0 && spec.sigma_y > 0,
          "gaussian_kernel: sigma must be positive");
  require(spec.support_x >= 1.0 && spec.support_y >= 1.0,
          "gaussian_kernel: support must be at least one cell");
  require(spec.center_x >= 0 && spec.center_x < w && spec.center_y >= 0 &&
              spec.center_y < h,
          "gaussian_kernel: center outside the map");

  TensorT<T> out({h, w});
  const auto px = static_cast<std::int64_t>(
      std::clamp(std::round(spec.center_x), 0.0, double(w - 1)));
  const auto py = static_cast<std::int64_t>(
      std::clamp(std::round(spec.center_y), 0.0, double(h - 1)));
  const double peak =
      std::exp(-((px - spec.center_x) * (px - spec.center_x) /
                     (2.0 * spec.sigma_x * spec.sigma_x) +
                 (py - spec.center_y) * (py - spec.center_y) /
                     (2.0 * spec.sigma_y * spec.sigma_y)));

  const auto y0 = static_cast<std::int64_t>(
      std::max(0.0, std::ceil(spec.center_y - spec.support_y)));
  const auto y1 = static_cast<std::int64_t>(
      std::min(double(h - 1), std::floor(spec.center_y + spec.support_y)));
  const auto x0 = static_cast<std::int64_t>(
      std::max(0.0, std::ceil(spec.center_x - spec.support_x)));
  const auto x1 = static_cast<std::int64_t>(
      std::min(double(w - 1), std::floor(spec.center_x + spec.support_x)));

  for (std::int64_t y = y0; y <= y1; ++y) {
    const double dy = (y - spec.center_y) / spec.support_y;
    for (std::int64_t x = x0; x <= x1; ++x) {
      const double dx = (x - spec.center_x) / spec.support_x;
      if (dx * dx + dy * dy > 1.0) continue;
      const double v =
          std::exp(-((x - spec.center_x) * (x - spec.center_x) /
                         (2.0 * spec.sigma_x * spec.sigma_x) +
                     (y - spec.center_y) * (y - spec.center_y) /
                         (2.0 * spec.sigma_y * spec.sigma_y)));
      out(y, x) = static_cast<T>(v / peak);
    }
  }
  return out;
}

// Per-cell regression weights: log(area) * G / sum(G over owned cells) on
// owned cells, 0 elsewhere. All-zero when the mask is empty.
template <typename T>
TensorT<T> sample_weights(const BBox& gt, const TensorT<T>& kernel,
                          const ITensor& owned_mask) {
  require(kernel.rank() == 2 && owned_mask.rank() == 2 &&
              kernel.dim(0) == owned_mask.dim(0) &&
              kernel.dim(1) == owned_mask.dim(1),
          "sample_weights: kernel and mask shapes must match");
  require(gt.area() > 0, "sample_weights: ground-truth box must have area");

  TensorT<T> out(kernel.shape());
  double total = 0.0;
  for (std::int64_t i = 0; i < kernel.numel(); ++i)
    if (owned_mask[i]) total += static_cast<double>(kernel[i]);
  if (total <= 0.0) return out;

  const double log_area = std::log(gt.area());
  for (std::int64_t i = 0; i < kernel.numel(); ++i)
    if (owned_mask[i])
      out[i] = static_cast<T>(log_area * static_cast<double>(kernel[i]) / total);
  return out;
}

// Builds training targets for one image. Same-class heatmaps combine by
// element-wise max; contested cells belong to the smaller-area object, except
// that every object keeps its own peak cell (colliding peaks go to the
// smaller object). Without the peak exception a ground-truth-perfect map
// would decode a neighbour's box at an overlapped peak.
template <typename T>
EncodedTargetsT<T> encode(const std::vector<GroundTruth>& gts, int H, int W,
                          int C, double alpha = kDefaultGaussianAlpha) {
  require(H >= 1 && W >= 1 && C >= 1, "encode: bad image geometry");
  const int h = (H + kStride - 1) / kStride;
  const int w = (W + kStride - 1) / kStride;

  EncodedTargetsT<T> out;
  out.class_heatmap = TensorT<T>({C, h, w});
  out.reg_target = TensorT<T>({4, h, w});
  out.weight_map = TensorT<T>({h, w});
  out.object_id = ITensor({h, w}, -1);
  out.input_h = H;
  out.input_w = W;

  for (std::size_t i = 0; i < gts.size(); ++i) {
    const auto& g = gts[i];
    require(g.box.valid(), "encode: invalid box for object " + std::to_string(i));
    require(g.box.width() >= 1.0 && g.box.height() >= 1.0,
            "encode: box smaller than one pixel for object " + std::to_string(i));
    require(g.box.x_min >= 0 && g.box.y_min >= 0 && g.box.x_max <= W &&
                g.box.y_max <= H,
            "encode: box outside image for object " + std::to_string(i));
    require(g.class_id >= 0 && g.class_id < C,
            "encode: class out of range for object " + std::to_string(i));
  }
  if (gts.empty()) return out;

  // Larger objects stamp ownership first so smaller ones overwrite them.
  std::vector<std::size_t> order(gts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return gts[a].box.area() > gts[b].box.area();
  });

  std::vector<TensorT<T>> kernels(gts.size());
  for (const std::size_t i : order) {
    const auto spec = gaussian_spec_for_box(gts[i].box, h, w, alpha);
    kernels[i] = gaussian_kernel<T>(spec, h, w);
    const auto& k = kernels[i];
    const int c = gts[i].class_id;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const T v = k(y, x);
        if (v <= T(0)) continue;
        out.object_id(y, x) = static_cast<std::int32_t>(i);
        auto& cell = out.class_heatmap(c, y, x);
        cell = std::max(cell, v);
      }
  }

  // Pin each object's peak cell back to itself; descending area keeps the
  // smaller object on top when two peaks land on the same cell.
  for (const std::size_t i : order) {
    const auto spec = gaussian_spec_for_box(gts[i].box, h, w, alpha);
    out.object_id(spec.center_y, spec.center_x) = static_cast<std::int32_t>(i);
  }

  for (std::size_t i = 0; i < gts.size(); ++i) {
    ITensor owned({h, w});
    bool any = false;
    for (std::int64_t j = 0; j < owned.numel(); ++j) {
      owned[j] = out.object_id[j] == static_cast<std::int32_t>(i) ? 1 : 0;
      any |= owned[j] != 0;
    }
    if (!any) {
      out.evicted.push_back(static_cast<int>(i));
      continue;
    }
    const auto weights = sample_weights(gts[i].box, kernels[i], owned);
    const auto& b = gts[i].box;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        if (!owned(y, x)) continue;
        out.weight_map(y, x) += weights(y, x);
        out.reg_target(0, y, x) = static_cast<T>(x * kStride - b.x_min);
        out.reg_target(1, y, x) = static_cast<T>(y * kStride - b.y_min);
        out.reg_target(2, y, x) = static_cast<T>(b.x_max - x * kStride);
        out.reg_target(3, y, x) = static_cast<T>(b.y_max - y * kStride);
      }
  }
  return out;
}

// Keeps values that equal the maximum of their 3x3 neighborhood (per channel,
// borders replicated); ties survive on every tied cell.
template <typename T>
TensorT<T> peak_mask(const TensorT<T>& heatmap) {
  require(heatmap.rank() == 3, "peak_mask: expected C x h x w heatmap");
  const std::int64_t C = heatmap.dim(0), h = heatmap.dim(1), w = heatmap.dim(2);
  TensorT<T> out(heatmap.shape());
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const T v = heatmap(c, y, x);
        T m = v;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const auto ny = std::clamp<std::int64_t>(y + dy, 0, h - 1);
            const auto nx = std::clamp<std::int64_t>(x + dx, 0, w - 1);
            m = std::max(m, heatmap(c, ny, nx));
          }
        if (v == m) out(c, y, x) = v;
      }
  return out;
}

// Decodes peak cells into detections: global top-k scores over all channels,
// side distances clamped non-negative, boxes clipped to the input image.
// Determinism: ties break by (channel, row, column) ascending.
template <typename T>
std::vector<Detection> decode(const TensorT<T>& class_heatmap,
                              const TensorT<T>& reg_map, int topk,
                              double score_thresh, int H, int W) {
  require(topk > 0, "decode: topk must be positive");
  require(class_heatmap.rank() == 3, "decode: expected C x h x w heatmap");
  require(reg_map.rank() == 3 && reg_map.dim(0) == 4 &&
              reg_map.dim(1) == class_heatmap.dim(1) &&
              reg_map.dim(2) == class_heatmap.dim(2),
          "decode: regression map must be 4 x h x w matching the heatmap");

  const auto peaks = peak_mask(class_heatmap);
  const std::int64_t C = peaks.dim(0), h = peaks.dim(1), w = peaks.dim(2);

  struct Cand {
    double score;
    std::int64_t c, y, x;
  };
  std::vector<Cand> cands;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double s = static_cast<double>(peaks(c, y, x));
        if (s >= score_thresh && s > 0.0) cands.push_back({s, c, y, x});
      }

  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.c != b.c) return a.c < b.c;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (static_cast<int>(cands.size()) > topk) cands.resize(topk);

  std::vector<Detection> dets;
  dets.reserve(cands.size());
  for (const auto& cd : cands) {
    const double l = std::max(0.0, static_cast<double>(reg_map(0, cd.y, cd.x)));
    const double t = std::max(0.0, static_cast<double>(reg_map(1, cd.y, cd.x)));
    const double r = std::max(0.0, static_cast<double>(reg_map(2, cd.y, cd.x)));
    const double b = std::max(0.0, static_cast<double>(reg_map(3, cd.y, cd.x)));
    const BBox box = BBox{cd.x * double(kStride) - l, cd.y * double(kStride) - t,
                          cd.x * double(kStride) + r, cd.y * double(kStride) + b}
                         .clipped(double(W), double(H));
    dets.push_back({box, static_cast<int>(cd.c), cd.score});
  }
  return dets;
}

}  // namespace afdet
