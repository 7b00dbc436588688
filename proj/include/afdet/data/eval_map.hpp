#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/geometry.hpp"
#include "afdet/target_codec.hpp"

namespace afdet::data {

// Ground truth box for evaluation. Crowd regions are never matched as true
// positives; detections overlapping them are dropped from scoring instead.
struct EvalGt {
  BBox box;
  int class_id = 0;
  bool crowd = false;
};

struct EvalResult {
  std::vector<double> thresholds;
  // class -> AP at each threshold (aligned with `thresholds`).
  std::map<int, std::vector<double>> per_class_ap;
  double map50 = 0.0;      // mean AP at IoU 0.5
  double map_avg = 0.0;    // mean AP over all thresholds
};

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

inline constexpr int kMaxDetectionsPerImage = 100;

namespace detail {

// Interpolated AP on the 101-point recall grid 0:0.01:1, integrated with a
// right-endpoint Riemann sum (the r=0 sample carries no mass). tp flags are
// in descending-score order; npos is the non-crowd ground-truth count.
inline double average_precision(const std::vector<bool>& tp, std::int64_t npos) {
  if (npos == 0) return 0.0;
  std::vector<double> precision, recall;
  std::int64_t tp_count = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]) ++tp_count;
    precision.push_back(static_cast<double>(tp_count) /
                        static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp_count) / static_cast<double>(npos));
  }
  // Monotone envelope: best precision at any recall >= r.
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  std::size_t k = 0;
  for (int i = 1; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    while (k < recall.size() && recall[k] + 1e-12 < r) ++k;
    if (k < precision.size()) sum += precision[k];
  }
  return sum / 100.0;
}

struct ClassDetection {
  std::size_t image = 0;
  BBox box;
  double score = 0.0;
};

}  // namespace detail

// COCO-style evaluation: per-class greedy matching at each IoU threshold,
// 101-point interpolated AP, crowd regions as ignore, at most 100 detections
// per image. Detections must arrive sorted by descending score per image.
inline EvalResult eval_map(
    const std::vector<std::vector<Detection>>& detections,
    const std::vector<std::vector<EvalGt>>& ground_truth,
    const std::vector<double>& thresholds = default_iou_thresholds(),
    int max_dets = kMaxDetectionsPerImage) {
  require(detections.size() == ground_truth.size(),
          "eval_map: detection and ground-truth image counts differ");
  require(!thresholds.empty(), "eval_map: need at least one IoU threshold");
  for (const auto& dets : detections)
    for (std::size_t i = 1; i < dets.size(); ++i)
      require(dets[i - 1].score >= dets[i].score,
              "eval_map: detections must be sorted by descending score");

  // Classes with at least one non-crowd ground truth participate in the mean.
  std::set<int> classes;
  std::map<int, std::int64_t> npos;
  for (const auto& gts : ground_truth)
    for (const auto& gt : gts)
      if (!gt.crowd) {
        classes.insert(gt.class_id);
        ++npos[gt.class_id];
      }

  EvalResult result;
  result.thresholds = thresholds;
  if (classes.empty()) return result;

  std::vector<double> map_per_threshold(thresholds.size(), 0.0);
  for (const int cls : classes) {
    std::vector<detail::ClassDetection> cdets;
    for (std::size_t img = 0; img < detections.size(); ++img) {
      const auto limit =
          std::min<std::size_t>(detections[img].size(),
                                static_cast<std::size_t>(max_dets));
      for (std::size_t i = 0; i < limit; ++i)
        if (detections[img][i].class_id == cls)
          cdets.push_back({img, detections[img][i].box, detections[img][i].score});
    }
    // Merge across images by score; ties broken by image then insertion order
    // so results are independent of container iteration quirks.
    std::stable_sort(cdets.begin(), cdets.end(),
                     [](const auto& a, const auto& b) { return a.score > b.score; });

    auto& aps = result.per_class_ap[cls];
    aps.resize(thresholds.size());
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      const double thr = thresholds[ti];
      std::vector<std::vector<bool>> taken(ground_truth.size());
      for (std::size_t img = 0; img < ground_truth.size(); ++img)
        taken[img].assign(ground_truth[img].size(), false);

      std::vector<bool> tp;
      tp.reserve(cdets.size());
      for (const auto& det : cdets) {
        const auto& gts = ground_truth[det.image];
        double best = 0.0;
        std::size_t best_gt = gts.size();
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
          if (gts[gi].crowd || gts[gi].class_id != cls || taken[det.image][gi])
            continue;
          const double v = iou(det.box, gts[gi].box);
          if (v > best) {
            best = v;
            best_gt = gi;
          }
        }
        if (best_gt < gts.size() && best >= thr) {
          taken[det.image][best_gt] = true;
          tp.push_back(true);
          continue;
        }
        // Unmatched: forgive detections covered by a same-class crowd region.
        bool ignored = false;
        const double det_area = det.box.area();
        for (const auto& gt : gts) {
          if (!gt.crowd || gt.class_id != cls) continue;
          const double inter = intersection_area(det.box, gt.box);
          if (det_area > 0.0 && inter / det_area >= thr) {
            ignored = true;
            break;
          }
        }
        if (!ignored) tp.push_back(false);
      }
      aps[ti] = detail::average_precision(tp, npos[cls]);
      map_per_threshold[ti] += aps[ti];
    }
  }

  for (double& v : map_per_threshold) v /= static_cast<double>(classes.size());
  double avg = 0.0;
  for (const double v : map_per_threshold) avg += v;
  result.map_avg = avg / static_cast<double>(map_per_threshold.size());

  result.map50 = 0.0;
  bool found50 = false;
  for (std::size_t ti = 0; ti < thresholds.size(); ++ti)
    if (std::abs(thresholds[ti] - 0.5) < 1e-9) {
      result.map50 = map_per_threshold[ti];
      found50 = true;
      break;
    }
  if (!found50) result.map50 = map_per_threshold.front();
  return result;
}

}  // namespace afdet::data
