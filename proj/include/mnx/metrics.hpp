// Mean average precision with 101-point interpolation.
//
// For each class present in the ground truth and each IoU threshold,
// detections are taken in descending score order (ties: input order) and
// greedily matched to the unmatched same-image gt with the highest IoU that
// reaches the threshold. Precision is replaced by its running maximum from
// the right, then sampled at recall 0, 0.01, ..., 1 using the first point
// whose recall reaches each sample (0 past the last point).
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mnx/box.hpp"

namespace mnx::inline MNX_ABI {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

// 101-point interpolated AP from a PR curve given in detection order.
inline double interpolated_ap(const std::vector<double>& recall, std::vector<double> precision) {
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  std::size_t k = 0;
  for (int s = 0; s <= 100; ++s) {
    const double r = s / 100.0;
    while (k < recall.size() && recall[k] < r - 1e-12) ++k;
    if (k == recall.size()) break;
    sum += precision[k];
  }
  return sum / 101.0;
}

inline double average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                                 int class_id, double iou_thresh) {
  std::vector<const GroundTruthBox*> g;
  for (const auto& b : gts) {
    if (b.class_id == class_id) g.push_back(&b);
  }
  if (g.empty()) return 0.0;
  std::vector<const Detection*> d;
  for (const auto& x : dets) {
    if (x.class_id == class_id) d.push_back(&x);
  }
  std::stable_sort(d.begin(), d.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });

  std::vector<bool> used(g.size(), false);
  std::vector<double> recall, precision;
  std::int64_t tp = 0, fp = 0;
  for (const Detection* det : d) {
    double best = -1.0;
    std::size_t best_k = g.size();
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (used[k] || g[k]->image_id != det->image_id) continue;
      const double o = iou(det->box, g[k]->box);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_k = k;
      }
    }
    if (best_k < g.size()) {
      used[best_k] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(g.size()));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return interpolated_ap(recall, precision);
}

struct MapResult {
  double ap50 = 0.0;
  double ap50_95 = 0.0;
  std::map<int, double> ap50_per_class;
};

inline MapResult evaluate_map(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                              const std::vector<double>& iou_thresholds = coco_iou_thresholds()) {
  if (gts.empty()) throw MetricError("evaluate_map: no ground truth boxes, AP is undefined");
  if (iou_thresholds.empty()) throw MetricError("evaluate_map: no IoU thresholds");
  std::vector<int> classes;
  for (const auto& g : gts) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  MapResult r;
  double sum50 = 0.0, sum_all = 0.0;
  for (int c : classes) {
    const double a50 = average_precision(dets, gts, c, 0.5);
    r.ap50_per_class[c] = a50;
    sum50 += a50;
    double acc = 0.0;
    for (double t : iou_thresholds) acc += (t == 0.5) ? a50 : average_precision(dets, gts, c, t);
    sum_all += acc / static_cast<double>(iou_thresholds.size());
  }
  r.ap50 = sum50 / static_cast<double>(classes.size());
  r.ap50_95 = sum_all / static_cast<double>(classes.size());
  return r;
}

}  // namespace mnx
