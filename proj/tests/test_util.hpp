#pragma once

// Shared test oracles: pixel-rasterization box overlap counting, central
// finite differences, random box generators. Everything here is independent
// of the library's analytic code paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/tensor.hpp"

namespace testutil {

// Counts unit pixels covered by an integer-coordinate box inside a grid.
inline std::int64_t raster_count(const afdet::BBox& b, int grid) {
  std::int64_t n = 0;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x)
      if (x >= b.x_min && x + 1 <= b.x_max && y >= b.y_min && y + 1 <= b.y_max)
        ++n;
  return n;
}

inline std::int64_t raster_intersection(const afdet::BBox& a,
                                        const afdet::BBox& b, int grid) {
  std::int64_t n = 0;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      const bool in_a =
          x >= a.x_min && x + 1 <= a.x_max && y >= a.y_min && y + 1 <= a.y_max;
      const bool in_b =
          x >= b.x_min && x + 1 <= b.x_max && y >= b.y_min && y + 1 <= b.y_max;
      if (in_a && in_b) ++n;
    }
  return n;
}

// IoU by pixel counting; exact for integer-coordinate boxes.
inline double raster_iou(const afdet::BBox& a, const afdet::BBox& b,
                         int grid) {
  const auto inter = raster_intersection(a, b, grid);
  const auto uni = raster_count(a, grid) + raster_count(b, grid) - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// GIoU evaluated from pixel counts plus the enclosing-box count.
inline double raster_giou(const afdet::BBox& a, const afdet::BBox& b,
                          int grid) {
  const auto inter = raster_intersection(a, b, grid);
  const auto uni = raster_count(a, grid) + raster_count(b, grid) - inter;
  const afdet::BBox enc{std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min),
                        std::max(a.x_max, b.x_max), std::max(a.y_max, b.y_max)};
  const auto enc_n = raster_count(enc, grid);
  if (enc_n == 0) return 0.0;
  const double i =
      uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  return i - static_cast<double>(enc_n - uni) / static_cast<double>(enc_n);
}

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> central_diff(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Max relative error between an analytic gradient and central differences.
inline double max_grad_rel_err(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, const std::vector<double>& analytic,
    double eps = 1e-5) {
  const auto cd = central_diff(f, x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, rel_err(analytic[i], cd[i]));
  return worst;
}

// Random box with integer coordinates inside [0, grid]^2, positive area.
inline afdet::BBox random_int_box(afdet::Rng& rng, int grid) {
  const auto x0 = rng.uniform_int(0, grid - 1);
  const auto y0 = rng.uniform_int(0, grid - 1);
  const auto x1 = rng.uniform_int(x0 + 1, grid);
  const auto y1 = rng.uniform_int(y0 + 1, grid);
  return {static_cast<double>(x0), static_cast<double>(y0),
          static_cast<double>(x1), static_cast<double>(y1)};
}

// Random continuous box inside [0, extent]^2 with sides >= min_side; the
// coordinates avoid exact alignment with probability 1.
inline afdet::BBox random_box(afdet::Rng& rng, double extent,
                              double min_side = 0.5) {
  const double x0 = rng.uniform(0.0, extent - min_side);
  const double y0 = rng.uniform(0.0, extent - min_side);
  const double x1 = rng.uniform(x0 + min_side, extent);
  const double y1 = rng.uniform(y0 + min_side, extent);
  return {x0, y0, x1, y1};
}

}  // namespace testutil
