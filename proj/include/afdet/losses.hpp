#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/target_codec.hpp"
#include "afdet/tensor.hpp"

namespace afdet {

inline constexpr double kDefaultLocWeight = 1.0;
inline constexpr double kDefaultRegWeight = 5.0;
inline constexpr double kDefaultAgsLambda = 0.5;
// Heatmap predictions are clamped to [eps, 1-eps] before any logarithm.
inline constexpr double kPredClampEps = 1e-6;

struct AgsConfig {
  double lambda = kDefaultAgsLambda;
  bool enabled = true;

  void validate() const {
    require(lambda >= 0.0 && lambda <= 1.0,
            "AgsConfig: lambda must lie in [0, 1]");
  }
};

template <typename T>
struct LossBreakdownT {
  T loc{};
  T reg{};
  T total{};
  T w_loc = T(kDefaultLocWeight);
  T w_reg = T(kDefaultRegWeight);
};

using LossBreakdown = LossBreakdownT<float>;

// Scalar loss together with its gradient w.r.t. the prediction tensor.
template <typename T>
struct LossGradT {
  T value{};
  TensorT<T> grad;
};

template <typename T>
void clamp_predictions(TensorT<T>& pred) {
  const T lo = T(kPredClampEps);
  const T hi = T(1) - T(kPredClampEps);
  for (std::int64_t i = 0; i < pred.numel(); ++i)
    pred[i] = std::clamp(pred[i], lo, hi);
}

// Penalty-reduced focal loss over a C x h x w heatmap. Cells with target
// exactly 1 are positives: -(1-p)^2 log p; every other cell contributes
// -(1-t)^4 p^2 log(1-p). Sum is divided by the positive count (floored at 1).
// Callers must keep pred strictly inside (0,1); see clamp_predictions.
template <typename T>
LossGradT<T> focal_loss(const TensorT<T>& pred, const TensorT<T>& target) {
  check_same_shape(pred, target, "focal_loss");
  require(pred.rank() == 3, "focal_loss: expected C x h x w tensors");

  LossGradT<T> out;
  out.grad = TensorT<T>(pred.shape());
  std::int64_t npos = 0;
  T sum = T(0);
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const T p = pred[i];
    const T t = target[i];
    if (t == T(1)) {
      ++npos;
      const T q = T(1) - p;
      sum += -q * q * std::log(p);
      out.grad[i] = T(2) * q * std::log(p) - q * q / p;
    } else {
      const T q = T(1) - t;
      const T pen = q * q * q * q;
      sum += -pen * p * p * std::log(T(1) - p);
      out.grad[i] = -pen * (T(2) * p * std::log(T(1) - p) - p * p / (T(1) - p));
    }
  }
  const T norm = T(std::max<std::int64_t>(std::int64_t{1}, npos));
  out.value = sum / norm;
  for (std::int64_t i = 0; i < out.grad.numel(); ++i) out.grad[i] /= norm;
  return out;
}

// S_ags for one object: max-reduce the localization logits over channels,
// softmax over the whole map, zero outside the object's Gaussian support.
// The result is a constant for backpropagation purposes (stop-gradient).
template <typename T>
TensorT<T> ags_map(const TensorT<T>& loc_logits,
                   const TensorT<T>& object_kernel) {
  require(loc_logits.rank() == 3, "ags_map: expected C x h x w logits");
  require(object_kernel.rank() == 2 &&
              object_kernel.dim(0) == loc_logits.dim(1) &&
              object_kernel.dim(1) == loc_logits.dim(2),
          "ags_map: kernel shape does not match logits");

  const std::int64_t C = loc_logits.dim(0);
  const std::int64_t h = loc_logits.dim(1);
  const std::int64_t w = loc_logits.dim(2);

  bool any_support = false;
  for (std::int64_t i = 0; i < object_kernel.numel(); ++i) {
    require(object_kernel[i] >= T(0), "ags_map: kernel must be non-negative");
    any_support |= object_kernel[i] > T(0);
  }
  require(any_support, "ags_map: object kernel has empty support");

  TensorT<T> reduced({h, w});
  T peak = -std::numeric_limits<T>::infinity();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      T m = loc_logits(0, y, x);
      for (std::int64_t c = 1; c < C; ++c)
        m = std::max(m, loc_logits(c, y, x));
      reduced(y, x) = m;
      peak = std::max(peak, m);
    }

  T z = T(0);
  for (std::int64_t i = 0; i < reduced.numel(); ++i) {
    reduced[i] = std::exp(reduced[i] - peak);
    z += reduced[i];
  }
  TensorT<T> out({h, w});
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = object_kernel[i] > T(0) ? reduced[i] / z : T(0);
  return out;
}

// Convenience: one masked AGS map per ground-truth object.
template <typename T>
std::vector<TensorT<T>> ags_maps(const TensorT<T>& loc_logits,
                                 const std::vector<GroundTruth>& gts,
                                 double alpha = kDefaultGaussianAlpha) {
  const std::int64_t h = loc_logits.dim(1);
  const std::int64_t w = loc_logits.dim(2);
  std::vector<TensorT<T>> maps;
  maps.reserve(gts.size());
  for (const auto& g : gts) {
    const auto spec = gaussian_spec_for_box(g.box, h, w, alpha);
    maps.push_back(ags_map(loc_logits, gaussian_kernel<T>(spec, h, w)));
  }
  return maps;
}

// Eq. 3: giou' = 1 - ((1-lambda) + lambda * s) * g.
template <typename T>
T reweight_giou(T g, T s, T lambda) {
  return T(1) - ((T(1) - lambda) + lambda * s) * g;
}

// AGS-reweighted GIoU regression loss (Eq. 1 / Eq. 3). pred_reg holds
// non-negative side distances (l, t, r, b); at each owned cell the predicted
// box is rebuilt around the cell center and compared to the owner's box. The
// per-cell term is w_g * (1 - g) with AGS disabled or w_g * giou' with it
// enabled; the sum is divided by the total sample weight (floored at 1).
// `ags` supplies one stop-gradient map per object and may be null when
// cfg.enabled is false.
template <typename T>
LossGradT<T> regression_loss(
    const TensorT<T>& pred_reg, const EncodedTargetsT<T>& targets,
    std::type_identity_t<const std::vector<TensorT<T>>*> ags,
    const AgsConfig& cfg = {}) {
  cfg.validate();
  require(pred_reg.rank() == 3 && pred_reg.dim(0) == 4,
          "regression_loss: expected 4 x h x w side distances");
  const std::int64_t h = targets.object_id.dim(0);
  const std::int64_t w = targets.object_id.dim(1);
  require(pred_reg.dim(1) == h && pred_reg.dim(2) == w,
          "regression_loss: prediction does not match target grid");
  if (cfg.enabled)
    require(ags != nullptr, "regression_loss: AGS enabled but no maps given");

  LossGradT<T> out;
  out.grad = TensorT<T>(pred_reg.shape());
  T sum = T(0);
  T weight_sum = T(0);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int32_t id = targets.object_id(y, x);
      if (id < 0) continue;
      const T wg = targets.weight_map(y, x);
      const T cx = T(x * kStride);
      const T cy = T(y * kStride);
      const Box<T> pred_box{cx - pred_reg(0, y, x), cy - pred_reg(1, y, x),
                            cx + pred_reg(2, y, x), cy + pred_reg(3, y, x)};
      const Box<T> gt_box{cx - targets.reg_target(0, y, x),
                          cy - targets.reg_target(1, y, x),
                          cx + targets.reg_target(2, y, x),
                          cy + targets.reg_target(3, y, x)};
      T k = T(1);
      if (cfg.enabled) {
        require(static_cast<std::size_t>(id) < ags->size(),
                "regression_loss: missing AGS map for object " +
                    std::to_string(id));
        const T s = (*ags)[static_cast<std::size_t>(id)](y, x);
        k = (T(1) - T(cfg.lambda)) + T(cfg.lambda) * s;
      }
      const T g = giou(pred_box, gt_box);
      const auto dg = giou_grad(pred_box, gt_box);
      sum += wg * (T(1) - k * g);
      const T scale = -wg * k;
      out.grad(0, y, x) = -scale * dg[0];
      out.grad(1, y, x) = -scale * dg[1];
      out.grad(2, y, x) = scale * dg[2];
      out.grad(3, y, x) = scale * dg[3];
      weight_sum += wg;
    }

  const T norm = std::max(T(1), weight_sum);
  out.value = sum / norm;
  for (std::int64_t i = 0; i < out.grad.numel(); ++i) out.grad[i] /= norm;
  return out;
}

// Eq. 2: total = w_loc * loc + w_reg * reg.
template <typename T>
LossBreakdownT<T> total_loss(T loc, T reg, T w_loc = T(kDefaultLocWeight),
                             T w_reg = T(kDefaultRegWeight)) {
  require(w_loc >= T(0) && w_reg >= T(0), "total_loss: negative loss weight");
  LossBreakdownT<T> b;
  b.loc = loc;
  b.reg = reg;
  b.w_loc = w_loc;
  b.w_reg = w_reg;
  b.total = w_loc * loc + w_reg * reg;
  return b;
}

}  // namespace afdet
