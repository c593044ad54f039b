// Axis-aligned boxes in input-pixel coordinates and the detection records
// passed between decoding, NMS, evaluation and the CLI.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>

#include "mnx/config.hpp"

namespace mnx::inline MNX_ABI {

struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  double area() const { return std::max(0.0, static_cast<double>(x2) - x1) * std::max(0.0, static_cast<double>(y2) - y1); }
  bool valid() const { return x2 > x1 && y2 > y1; }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1);
  const double ih = std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Detection {
  std::int64_t image_id = 0;
  int class_id = 0;
  float score = 0.0f;
  Box box;
};

struct GroundTruthBox {
  std::int64_t image_id = 0;
  int class_id = 0;
  Box box;
};

}  // namespace mnx
