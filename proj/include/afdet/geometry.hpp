#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "afdet/common.hpp"

namespace afdet {

// Axis-aligned box in continuous pixel coordinates, corner form.
template <typename T>
struct Box {
  T x_min{}, y_min{}, x_max{}, y_max{};

  bool operator==(const Box&) const = default;

  T width() const { return x_max - x_min; }
  T height() const { return y_max - y_min; }
  T area() const { return width() * height(); }
  bool valid() const { return x_min <= x_max && y_min <= y_max; }

  Box translated(T dx, T dy) const {
    return {x_min + dx, y_min + dy, x_max + dx, y_max + dy};
  }
  Box scaled(T sx, T sy) const {
    return {x_min * sx, y_min * sy, x_max * sx, y_max * sy};
  }
  Box clipped(T w, T h) const {
    return {std::clamp(x_min, T(0), w), std::clamp(y_min, T(0), h),
            std::clamp(x_max, T(0), w), std::clamp(y_max, T(0), h)};
  }
  Box clipped(const Box& frame) const {
    return {std::clamp(x_min, frame.x_min, frame.x_max),
            std::clamp(y_min, frame.y_min, frame.y_max),
            std::clamp(x_max, frame.x_min, frame.x_max),
            std::clamp(y_max, frame.y_min, frame.y_max)};
  }
  T center_x() const { return (x_min + x_max) / T(2); }
  T center_y() const { return (y_min + y_max) / T(2); }
};

using BBox = Box<double>;
using BBoxF = Box<float>;

template <typename T>
T intersection_area(const Box<T>& a, const Box<T>& b) {
  const T w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const T h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= T(0) || h <= T(0)) return T(0);
  return w * h;
}

// Intersection over union; 0 when the union has zero area.
template <typename T>
T iou(const Box<T>& a, const Box<T>& b) {
  const T inter = intersection_area(a, b);
  const T uni = a.area() + b.area() - inter;
  if (uni <= T(0)) return T(0);
  return inter / uni;
}

// Generalized IoU: iou - (area(enclosing) - area(union)) / area(enclosing).
// Returns 0 when the enclosing box is degenerate.
template <typename T>
T giou(const Box<T>& a, const Box<T>& b) {
  const T inter = intersection_area(a, b);
  const T uni = a.area() + b.area() - inter;
  const T cw = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
  const T ch = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
  const T enclose = cw * ch;
  if (enclose <= T(0)) return T(0);
  const T i = uni > T(0) ? inter / uni : T(0);
  return i - (enclose - uni) / enclose;
}

namespace detail {

// Subgradient of max(a, b) wrt a. Ties split evenly so the value agrees with
// the central-difference limit at aligned edges (e.g. pred == gt).
template <typename T>
T dmax_da(T a, T b) {
  if (a > b) return T(1);
  if (a < b) return T(0);
  return T(0.5);
}

template <typename T>
T dmin_da(T a, T b) {
  if (a < b) return T(1);
  if (a > b) return T(0);
  return T(0.5);
}

}  // namespace detail

// d giou(pred, gt) / d (pred.x_min, pred.y_min, pred.x_max, pred.y_max).
// gt is held fixed. pred must have positive area.
template <typename T>
std::array<T, 4> giou_grad(const Box<T>& pred, const Box<T>& gt) {
  require(pred.width() > T(0) && pred.height() > T(0),
          "giou_grad: degenerate predicted box");

  using detail::dmax_da;
  using detail::dmin_da;

  const T iw_raw = std::min(pred.x_max, gt.x_max) - std::max(pred.x_min, gt.x_min);
  const T ih_raw = std::min(pred.y_max, gt.y_max) - std::max(pred.y_min, gt.y_min);
  const T iw = std::max(iw_raw, T(0));
  const T ih = std::max(ih_raw, T(0));
  const T inter = iw * ih;

  const T area_p = pred.area();
  const T area_g = gt.area();
  const T uni = area_p + area_g - inter;

  const T cw = std::max(pred.x_max, gt.x_max) - std::min(pred.x_min, gt.x_min);
  const T ch = std::max(pred.y_max, gt.y_max) - std::min(pred.y_min, gt.y_min);
  const T enclose = cw * ch;

  // Clamp subgradients (even split exactly at zero overlap).
  const T clamp_w = iw_raw > T(0) ? T(1) : (iw_raw == T(0) ? T(0.5) : T(0));
  const T clamp_h = ih_raw > T(0) ? T(1) : (ih_raw == T(0) ? T(0.5) : T(0));

  // d(intersection width)/d pred edge, before the zero clamp.
  const T diw_dxmin = -dmax_da(pred.x_min, gt.x_min);
  const T diw_dxmax = dmin_da(pred.x_max, gt.x_max);
  const T dih_dymin = -dmax_da(pred.y_min, gt.y_min);
  const T dih_dymax = dmin_da(pred.y_max, gt.y_max);

  const std::array<T, 4> dinter = {
      clamp_w * diw_dxmin * ih, dih_dymin * clamp_h * iw,
      clamp_w * diw_dxmax * ih, dih_dymax * clamp_h * iw};

  const std::array<T, 4> darea_p = {-pred.height(), -pred.width(),
                                    pred.height(), pred.width()};

  // Enclosing box edges.
  const std::array<T, 4> dcw = {-dmin_da(pred.x_min, gt.x_min), T(0),
                                dmax_da(pred.x_max, gt.x_max), T(0)};
  const std::array<T, 4> dch = {T(0), -dmin_da(pred.y_min, gt.y_min), T(0),
                                dmax_da(pred.y_max, gt.y_max)};

  std::array<T, 4> grad{};
  for (int k = 0; k < 4; ++k) {
    const T duni = darea_p[k] - dinter[k];
    const T denclose = dcw[k] * ch + cw * dch[k];
    T g = T(0);
    if (uni > T(0)) g += (dinter[k] * uni - inter * duni) / (uni * uni);
    if (enclose > T(0))
      g += (duni * enclose - uni * denclose) / (enclose * enclose);
    grad[k] = g;
  }
  return grad;
}

}  // namespace afdet
