// Quadratic reference for class-aware greedy NMS, written independently of
// mnx::nms: full sort on (score desc, class asc, index asc), then each
// candidate is checked against every earlier survivor.
#pragma once

#include <algorithm>
#include <tuple>
#include <vector>

#include "mnx/box.hpp"
#include "mnx/rng.hpp"

namespace mnx::inline MNX_ABI::testing {

inline double oracle_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1));
  const double iy = std::max(0.0, std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1));
  const double i = ix * iy;
  const double u = (double(a.x2) - a.x1) * (double(a.y2) - a.y1) + (double(b.x2) - b.x1) * (double(b.y2) - b.y1) - i;
  return u > 0 ? i / u : 0.0;
}

inline std::vector<Detection> nms_brute_force(const std::vector<Detection>& dets, double thresh, bool class_aware) {
  std::vector<std::tuple<float, int, std::size_t>> keys;
  for (std::size_t i = 0; i < dets.size(); ++i) keys.emplace_back(-dets[i].score, dets[i].class_id, i);
  std::sort(keys.begin(), keys.end());
  std::vector<Detection> kept;
  for (const auto& [neg_score, cls, i] : keys) {
    bool keep = true;
    for (const Detection& k : kept) {
      if ((!class_aware || k.class_id == cls) && oracle_iou(k.box, dets[i].box) > thresh) keep = false;
    }
    if (keep) kept.push_back(dets[i]);
  }
  return kept;
}

// n boxes in a 200 x 200 field, clustered so suppression actually happens;
// scores drawn from a coarse grid so ties occur.
inline std::vector<Detection> random_detections(Rng& rng, int n, int num_classes) {
  std::vector<Detection> d;
  const int clusters = 1 + static_cast<int>(rng.below(6));
  std::vector<std::pair<double, double>> centres;
  for (int c = 0; c < clusters; ++c) centres.emplace_back(rng.uniform(20, 180), rng.uniform(20, 180));
  for (int i = 0; i < n; ++i) {
    const auto& [cx, cy] = centres[rng.below(centres.size())];
    const double x = cx + rng.uniform(-15, 15), y = cy + rng.uniform(-15, 15);
    const double w = rng.uniform(4, 40), h = rng.uniform(4, 40);
    Detection det;
    det.image_id = 0;
    det.class_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
    det.score = static_cast<float>(rng.below(50) + 1) / 50.0f;
    det.box = {static_cast<float>(x - w / 2), static_cast<float>(y - h / 2), static_cast<float>(x + w / 2),
               static_cast<float>(y + h / 2)};
    d.push_back(det);
  }
  return d;
}

inline bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score || !(a[i].box == b[i].box)) return false;
  }
  return true;
}

}  // namespace mnx::testing
