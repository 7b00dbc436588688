#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <utility>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/tensor.hpp"

namespace afdet {

// One training image with its labels. box_weights carry the mixing credit a
// box keeps after MixUp/CutMix (1 when the sample was never mixed).
template <typename T>
struct TrainSampleT {
  TensorT<T> image;  // 3 x H x W, values in [0,1]
  std::vector<BBox> boxes;
  std::vector<int> classes;
  std::vector<double> box_weights;

  std::int64_t height() const { return image.dim(1); }
  std::int64_t width() const { return image.dim(2); }

  void validate() const {
    require(image.rank() == 3 && image.dim(0) == 3,
            "TrainSample: image must be 3 x H x W");
    require(boxes.size() == classes.size() &&
                boxes.size() == box_weights.size(),
            "TrainSample: boxes, classes and box_weights must align");
    const auto w = static_cast<double>(width());
    const auto h = static_cast<double>(height());
    for (const auto& b : boxes)
      require(b.valid() && b.x_min >= 0 && b.y_min >= 0 && b.x_max <= w &&
                  b.y_max <= h,
              "TrainSample: box outside image bounds");
    for (const double bw : box_weights)
      require(bw > 0.0 && bw <= 1.0, "TrainSample: box weight outside (0,1]");
    for (std::int64_t i = 0; i < image.numel(); ++i)
      require(image[i] >= T(0) && image[i] <= T(1),
              "TrainSample: pixel outside [0,1]");
  }
};

using TrainSample = TrainSampleT<float>;

template <typename T>
TrainSampleT<T> make_sample(TensorT<T> image, std::vector<BBox> boxes,
                            std::vector<int> classes) {
  TrainSampleT<T> s{std::move(image), std::move(boxes), std::move(classes),
                    {}};
  s.box_weights.assign(s.boxes.size(), 1.0);
  return s;
}

struct GridMaskParams {
  int unit = 32;       // grid period d in pixels
  double ratio = 0.6;  // fraction of each period kept visible per axis
  int offset_x = 0;
  int offset_y = 0;
  double apply_prob = 0.7;

  void validate(std::int64_t h, std::int64_t w) const {
    require(unit >= 2 && unit <= std::min(h, w),
            "GridMaskParams: unit must lie in [2, min(H,W)]");
    require(ratio > 0.0 && ratio < 1.0, "GridMaskParams: ratio must be in (0,1)");
    require(offset_x >= 0 && offset_x < unit && offset_y >= 0 &&
                offset_y < unit,
            "GridMaskParams: offsets must lie in [0, unit)");
    require(apply_prob >= 0.0 && apply_prob <= 1.0,
            "GridMaskParams: apply_prob must lie in [0,1]");
  }
};

// Eq. 6: convex image blend; both label sets survive with scaled credit.
// Boxes whose credit hits exactly zero (lam 0 or 1) are dropped.
template <typename T>
TrainSampleT<T> mixup(const TrainSampleT<T>& a, const TrainSampleT<T>& b,
                      double lam) {
  check_same_shape(a.image, b.image, "mixup");
  require(lam >= 0.0 && lam <= 1.0, "mixup: lam must lie in [0,1]");

  TrainSampleT<T> out;
  out.image = TensorT<T>(a.image.shape());
  const T la = T(lam);
  for (std::int64_t i = 0; i < out.image.numel(); ++i)
    out.image[i] = la * a.image[i] + (T(1) - la) * b.image[i];

  const auto append = [&out](const TrainSampleT<T>& src, double scale) {
    for (std::size_t i = 0; i < src.boxes.size(); ++i) {
      const double w = src.box_weights[i] * scale;
      if (w <= 0.0) continue;
      out.boxes.push_back(src.boxes[i]);
      out.classes.push_back(src.classes[i]);
      out.box_weights.push_back(w);
    }
  };
  append(a, lam);
  append(b, 1.0 - lam);
  return out;
}

// Eq. 7: paste a rectangle of b into a. The patch has side fractions
// sqrt(1-lam) and is placed uniformly so it fits inside the image, making the
// pasted-area fraction match 1-lam up to pixel quantization on every draw.
// a keeps boxes whose centers stay visible; b contributes boxes centered in
// the patch, clipped to it. Credits scale with the visible-area split.
template <typename T>
TrainSampleT<T> cutmix(const TrainSampleT<T>& a, const TrainSampleT<T>& b,
                       double lam, Rng& rng) {
  check_same_shape(a.image, b.image, "cutmix");
  require(lam > 0.0 && lam < 1.0, "cutmix: lam must lie in (0,1)");

  const std::int64_t h = a.height(), w = a.width();
  const double side = std::sqrt(1.0 - lam);
  const auto pw = static_cast<std::int64_t>(std::lround(static_cast<double>(w) * side));
  const auto ph = static_cast<std::int64_t>(std::lround(static_cast<double>(h) * side));
  const std::int64_t x0 = pw < w ? rng.uniform_int(0, w - pw) : 0;
  const std::int64_t y0 = ph < h ? rng.uniform_int(0, h - ph) : 0;
  const std::int64_t x1 = x0 + pw, y1 = y0 + ph;
  const double frac =
      static_cast<double>(pw * ph) / static_cast<double>(w * h);

  TrainSampleT<T> out;
  out.image = a.image;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x)
        out.image(c, y, x) = b.image(c, y, x);

  const auto center_inside = [&](const BBox& box) {
    const double cx = box.center_x(), cy = box.center_y();
    return cx >= static_cast<double>(x0) && cx < static_cast<double>(x1) &&
           cy >= static_cast<double>(y0) && cy < static_cast<double>(y1);
  };
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    if (center_inside(a.boxes[i])) continue;
    const double bw = a.box_weights[i] * (1.0 - frac);
    if (bw <= 0.0) continue;
    out.boxes.push_back(a.boxes[i]);
    out.classes.push_back(a.classes[i]);
    out.box_weights.push_back(bw);
  }
  const BBox patch{static_cast<double>(x0), static_cast<double>(y0),
                   static_cast<double>(x1), static_cast<double>(y1)};
  for (std::size_t i = 0; i < b.boxes.size(); ++i) {
    if (!center_inside(b.boxes[i])) continue;
    const double bw = b.box_weights[i] * frac;
    if (bw <= 0.0) continue;
    out.boxes.push_back(b.boxes[i].clipped(patch));
    out.classes.push_back(b.classes[i]);
    out.box_weights.push_back(bw);
  }
  return out;
}

// Zeroes a regular grid of square holes: pixels whose shifted coordinates
// both fall in the first floor(d*(1-ratio)) pixels of their period. The
// floor makes the hole vanish (identity) as ratio approaches 1. Labels are
// untouched; with probability 1-apply_prob the sample passes through as-is.
template <typename T>
TrainSampleT<T> gridmask(const TrainSampleT<T>& s, const GridMaskParams& p,
                         Rng& rng) {
  p.validate(s.height(), s.width());
  if (!rng.bernoulli(p.apply_prob)) return s;

  const auto hole = static_cast<std::int64_t>(
      std::floor(static_cast<double>(p.unit) * (1.0 - p.ratio)));
  if (hole <= 0) return s;
  TrainSampleT<T> out = s;
  for (std::int64_t y = 0; y < s.height(); ++y) {
    if ((y + p.offset_y) % p.unit >= hole) continue;
    for (std::int64_t x = 0; x < s.width(); ++x) {
      if ((x + p.offset_x) % p.unit >= hole) continue;
      for (std::int64_t c = 0; c < 3; ++c) out.image(c, y, x) = T(0);
    }
  }
  return out;
}

// Deterministic core of random_expand: place the image on a fill-colored
// canvas at (offset_x, offset_y) and translate the boxes with it.
template <typename T>
TrainSampleT<T> expand_to(const TrainSampleT<T>& s, std::int64_t new_h,
                          std::int64_t new_w, std::int64_t offset_y,
                          std::int64_t offset_x,
                          const std::array<double, 3>& fill) {
  require(new_h >= s.height() && new_w >= s.width(),
          "expand_to: canvas smaller than image");
  require(offset_x >= 0 && offset_x + s.width() <= new_w && offset_y >= 0 &&
              offset_y + s.height() <= new_h,
          "expand_to: image placed outside canvas");
  for (const double f : fill)
    require(f >= 0.0 && f <= 1.0, "expand_to: fill outside [0,1]");

  TrainSampleT<T> out;
  out.image = TensorT<T>({3, new_h, new_w});
  for (std::int64_t c = 0; c < 3; ++c) {
    const T f = T(fill[static_cast<std::size_t>(c)]);
    for (std::int64_t y = 0; y < new_h; ++y)
      for (std::int64_t x = 0; x < new_w; ++x) out.image(c, y, x) = f;
    for (std::int64_t y = 0; y < s.height(); ++y)
      for (std::int64_t x = 0; x < s.width(); ++x)
        out.image(c, y + offset_y, x + offset_x) = s.image(c, y, x);
  }
  out.classes = s.classes;
  out.box_weights = s.box_weights;
  out.boxes.reserve(s.boxes.size());
  for (const auto& b : s.boxes)
    out.boxes.push_back(b.translated(static_cast<double>(offset_x),
                                     static_cast<double>(offset_y)));
  return out;
}

template <typename T>
TrainSampleT<T> random_expand(const TrainSampleT<T>& s, double max_ratio,
                              const std::array<double, 3>& fill, Rng& rng) {
  require(max_ratio >= 1.0, "random_expand: max_ratio must be >= 1");
  const double rho = rng.uniform(1.0, max_ratio);
  const auto new_w = static_cast<std::int64_t>(
      std::lround(static_cast<double>(s.width()) * rho));
  const auto new_h = static_cast<std::int64_t>(
      std::lround(static_cast<double>(s.height()) * rho));
  const std::int64_t ox =
      new_w > s.width() ? rng.uniform_int(0, new_w - s.width()) : 0;
  const std::int64_t oy =
      new_h > s.height() ? rng.uniform_int(0, new_h - s.height()) : 0;
  return expand_to(s, new_h, new_w, oy, ox, fill);
}

struct CropWindow {
  std::int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  std::int64_t width() const { return x1 - x0; }
  std::int64_t height() const { return y1 - y0; }
  bool contains_center(const BBox& b) const {
    const double cx = b.center_x(), cy = b.center_y();
    return cx >= static_cast<double>(x0) && cx < static_cast<double>(x1) &&
           cy >= static_cast<double>(y0) && cy < static_cast<double>(y1);
  }
};

// Deterministic core of random_crop: keep boxes centered in the window,
// clip them to it and shift everything into window coordinates.
template <typename T>
TrainSampleT<T> apply_crop_window(const TrainSampleT<T>& s,
                                  const CropWindow& win) {
  require(win.x0 >= 0 && win.y0 >= 0 && win.x1 <= s.width() &&
              win.y1 <= s.height() && win.width() >= 1 && win.height() >= 1,
          "apply_crop_window: window outside image");

  TrainSampleT<T> out;
  out.image = TensorT<T>({3, win.height(), win.width()});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < win.height(); ++y)
      for (std::int64_t x = 0; x < win.width(); ++x)
        out.image(c, y, x) = s.image(c, y + win.y0, x + win.x0);

  const BBox frame{static_cast<double>(win.x0), static_cast<double>(win.y0),
                   static_cast<double>(win.x1), static_cast<double>(win.y1)};
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    if (!win.contains_center(s.boxes[i])) continue;
    out.boxes.push_back(s.boxes[i].clipped(frame).translated(
        -static_cast<double>(win.x0), -static_cast<double>(win.y0)));
    out.classes.push_back(s.classes[i]);
    out.box_weights.push_back(s.box_weights[i]);
  }
  return out;
}

// Samples up to 50 candidate windows (side fractions in [0.3, 1]); a window
// is accepted when at least one box keeps its center inside it and every
// surviving box retains at least min_iou_keep of its area.
template <typename T>
std::optional<CropWindow> sample_crop_window(const TrainSampleT<T>& s,
                                             double min_iou_keep, Rng& rng) {
  require(min_iou_keep >= 0.0 && min_iou_keep <= 1.0,
          "sample_crop_window: min_iou_keep must lie in [0,1]");
  if (s.boxes.empty()) return std::nullopt;

  const std::int64_t w = s.width(), h = s.height();
  for (int attempt = 0; attempt < 50; ++attempt) {
    const auto cw = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(
               std::lround(static_cast<double>(w) * rng.uniform(0.3, 1.0))));
    const auto ch = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(
               std::lround(static_cast<double>(h) * rng.uniform(0.3, 1.0))));
    CropWindow win;
    win.x0 = cw < w ? rng.uniform_int(0, w - cw) : 0;
    win.y0 = ch < h ? rng.uniform_int(0, h - ch) : 0;
    win.x1 = win.x0 + cw;
    win.y1 = win.y0 + ch;

    const BBox frame{static_cast<double>(win.x0), static_cast<double>(win.y0),
                     static_cast<double>(win.x1), static_cast<double>(win.y1)};
    bool any = false, ok = true;
    for (const auto& b : s.boxes) {
      if (!win.contains_center(b)) continue;
      any = true;
      const double kept = intersection_area(b, frame) / b.area();
      if (kept < min_iou_keep) {
        ok = false;
        break;
      }
    }
    if (any && ok) return win;
  }
  return std::nullopt;
}

template <typename T>
TrainSampleT<T> random_crop(const TrainSampleT<T>& s, double min_iou_keep,
                            Rng& rng) {
  const auto win = sample_crop_window(s, min_iou_keep, rng);
  if (!win) return s;
  return apply_crop_window(s, *win);
}

struct AugmentConfig {
  bool enabled = true;
  double expand_prob = 0.5;
  double expand_max_ratio = 2.0;
  std::array<double, 3> expand_fill{0.5, 0.5, 0.5};
  double crop_prob = 0.5;
  double crop_min_iou = 0.3;
  double mix_prob = 0.5;
  double beta_param = 1.5;      // lambda ~ Beta(beta_param, beta_param)
  double min_box_weight = 0.3;  // boxes below this credit are ignored by targets
  int gridmask_unit = 32;
  double gridmask_ratio = 0.6;
  double gridmask_prob = 0.7;

  bool operator==(const AugmentConfig&) const = default;

  void validate() const {
    for (const double p :
         {expand_prob, crop_prob, mix_prob, gridmask_prob})
      require(p >= 0.0 && p <= 1.0, "AugmentConfig: probability outside [0,1]");
    require(expand_max_ratio >= 1.0, "AugmentConfig: expand_max_ratio < 1");
    require(crop_min_iou >= 0.0 && crop_min_iou <= 1.0,
            "AugmentConfig: crop_min_iou outside [0,1]");
    require(beta_param > 0.0, "AugmentConfig: beta_param must be positive");
    require(min_box_weight >= 0.0 && min_box_weight <= 1.0,
            "AugmentConfig: min_box_weight outside [0,1]");
    require(gridmask_unit >= 2, "AugmentConfig: gridmask_unit < 2");
    require(gridmask_ratio > 0.0 && gridmask_ratio < 1.0,
            "AugmentConfig: gridmask_ratio outside (0,1)");
  }
};

// Default pipeline: expand -> crop -> mixup/cutmix (exclusive) -> gridmask.
// The geometric stages reuse one set of draws for the sample and its mix
// partner so both stay the same size until the blend.
template <typename T>
TrainSampleT<T> augment_pipeline(
    const TrainSampleT<T>& sample,
    std::type_identity_t<const TrainSampleT<T>*> partner,
    const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!cfg.enabled) return sample;

  TrainSampleT<T> a = sample;
  std::optional<TrainSampleT<T>> b;
  if (partner) {
    check_same_shape(sample.image, partner->image, "augment_pipeline");
    b = *partner;
  }

  if (rng.bernoulli(cfg.expand_prob)) {
    const double rho = rng.uniform(1.0, cfg.expand_max_ratio);
    const auto new_w = static_cast<std::int64_t>(
        std::lround(static_cast<double>(a.width()) * rho));
    const auto new_h = static_cast<std::int64_t>(
        std::lround(static_cast<double>(a.height()) * rho));
    const std::int64_t ox =
        new_w > a.width() ? rng.uniform_int(0, new_w - a.width()) : 0;
    const std::int64_t oy =
        new_h > a.height() ? rng.uniform_int(0, new_h - a.height()) : 0;
    a = expand_to(a, new_h, new_w, oy, ox, cfg.expand_fill);
    if (b) b = expand_to(*b, new_h, new_w, oy, ox, cfg.expand_fill);
  }

  if (rng.bernoulli(cfg.crop_prob)) {
    if (const auto win = sample_crop_window(a, cfg.crop_min_iou, rng)) {
      a = apply_crop_window(a, *win);
      if (b) b = apply_crop_window(*b, *win);
    }
  }

  if (b && rng.bernoulli(cfg.mix_prob)) {
    const double lam = rng.beta_symmetric(cfg.beta_param);
    if (rng.bernoulli(0.5)) {
      a = mixup(a, *b, lam);
    } else if (lam > 0.0 && lam < 1.0) {
      a = cutmix(a, *b, lam, rng);
    }
  }

  {
    GridMaskParams p;
    p.unit = static_cast<int>(
        std::clamp<std::int64_t>(cfg.gridmask_unit, 2,
                                 std::min(a.height(), a.width())));
    p.ratio = cfg.gridmask_ratio;
    p.offset_x = static_cast<int>(rng.uniform_int(0, p.unit - 1));
    p.offset_y = static_cast<int>(rng.uniform_int(0, p.unit - 1));
    p.apply_prob = cfg.gridmask_prob;
    a = gridmask(a, p, rng);
  }
  return a;
}

}  // namespace afdet
