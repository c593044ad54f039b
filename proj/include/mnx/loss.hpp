// Training targets and loss for the anchor-free head.
//
// Assignment: a cell is positive for a ground-truth box when its centre lies
// strictly inside the box and the largest of its four distances to the box
// edges, in units of the level stride, falls in [0,4) on P3, [4,8) on P4 or
// [8,inf) on P5. Among qualifying boxes the smallest area wins.
//
// Loss: BCE-with-logits summed over every cell and class, plus 5 x (1 - CIoU)
// summed over positive cells, all divided by max(1, #positives).
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "mnx/box.hpp"
#include "mnx/head.hpp"

namespace mnx::inline MNX_ABI {

inline constexpr std::array<double, 3> kLevelMin = {0.0, 4.0, 8.0};
inline constexpr std::array<double, 3> kLevelMax = {4.0, 8.0, std::numeric_limits<double>::infinity()};
inline constexpr double kBoxLossWeight = 5.0;

struct LevelGeometry {
  int stride;
  std::int64_t h, w;
};

inline std::array<LevelGeometry, 3> pyramid_geometry(std::int64_t input_h, std::int64_t input_w) {
  std::array<LevelGeometry, 3> g{};
  for (std::size_t l = 0; l < 3; ++l) g[l] = {kStrides[l], input_h / kStrides[l], input_w / kStrides[l]};
  return g;
}

// Index of the matched gt box per cell (row-major), -1 for negatives.
struct LevelAssignment {
  std::vector<int> match;
};

inline std::array<LevelAssignment, 3> assign_targets(const std::vector<GroundTruthBox>& gt,
                                                     const std::array<LevelGeometry, 3>& geo) {
  std::array<LevelAssignment, 3> out;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& g = geo[l];
    out[l].match.assign(static_cast<std::size_t>(g.h * g.w), -1);
    for (std::int64_t i = 0; i < g.h; ++i) {
      const double cy = (static_cast<double>(i) + 0.5) * g.stride;
      for (std::int64_t j = 0; j < g.w; ++j) {
        const double cx = (static_cast<double>(j) + 0.5) * g.stride;
        int best = -1;
        double best_area = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < gt.size(); ++k) {
          const Box& b = gt[k].box;
          if (!(cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2)) continue;
          const double m = std::max({cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy}) / g.stride;
          if (m < kLevelMin[l] || m >= kLevelMax[l]) continue;
          if (b.area() < best_area) {
            best_area = b.area();
            best = static_cast<int>(k);
          }
        }
        out[l].match[static_cast<std::size_t>(i * g.w + j)] = best;
      }
    }
  }
  return out;
}

struct PositiveCell {
  int level;
  std::int64_t n, i, j;
  Box gt;
};

struct TargetSet {
  std::array<Tensor, 3> cls;  // one-hot targets [N, K, Hl, Wl]
  std::vector<PositiveCell> positives;
  std::array<LevelGeometry, 3> geometry{};
};

inline TargetSet build_targets(const std::vector<std::vector<GroundTruthBox>>& gt_per_image, int num_classes,
                               std::int64_t input_h, std::int64_t input_w) {
  TargetSet ts;
  ts.geometry = pyramid_geometry(input_h, input_w);
  const auto N = static_cast<std::int64_t>(gt_per_image.size());
  for (std::size_t l = 0; l < 3; ++l) {
    ts.cls[l] = Tensor::zeros({N, num_classes, ts.geometry[l].h, ts.geometry[l].w});
  }
  for (std::int64_t n = 0; n < N; ++n) {
    const auto& gt = gt_per_image[static_cast<std::size_t>(n)];
    const auto asg = assign_targets(gt, ts.geometry);
    for (std::size_t l = 0; l < 3; ++l) {
      const auto& g = ts.geometry[l];
      const std::int64_t S = g.h * g.w;
      for (std::int64_t c = 0; c < S; ++c) {
        const int k = asg[l].match[static_cast<std::size_t>(c)];
        if (k < 0) continue;
        const auto& b = gt[static_cast<std::size_t>(k)];
        detail::require(b.class_id >= 0 && b.class_id < num_classes,
                        "build_targets: class id " + std::to_string(b.class_id) + " out of range");
        ts.cls[l][(n * num_classes + b.class_id) * S + c] = 1;
        ts.positives.push_back({static_cast<int>(l), n, c / g.w, c % g.w, b.box});
      }
    }
  }
  return ts;
}

// sum over elements of max(x,0) - x*t + log(1 + exp(-|x|)).
inline Tensor bce_with_logits_sum(const Tensor& logits, const Tensor& targets) {
  detail::require_same_shape(logits, targets, "bce_with_logits_sum");
  double s = 0.0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const double x = logits[i], t = targets[i];
    s += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(static_cast<Real>(s));
  detail::record("bce_with_logits_sum", {logits}, out, [logits, targets](std::span<const Real> go) {
    Real* g = detail::grad_buffer(logits);
    for (std::int64_t i = 0; i < logits.numel(); ++i) g[i] += go[0] * (detail::sigmoid(logits[i]) - targets[i]);
  });
  return out;
}

namespace detail {

// Forward-mode dual number carrying d/d(l, t, r, b).
struct Dual4 {
  double v = 0.0;
  std::array<double, 4> d{};

  static Dual4 constant(double v) { return {v, {}}; }
  static Dual4 seed(double v, int k) {
    Dual4 x{v, {}};
    x.d[static_cast<std::size_t>(k)] = 1.0;
    return x;
  }
  friend Dual4 operator+(Dual4 a, const Dual4& b) {
    a.v += b.v;
    for (int k = 0; k < 4; ++k) a.d[k] += b.d[k];
    return a;
  }
  friend Dual4 operator-(Dual4 a, const Dual4& b) {
    a.v -= b.v;
    for (int k = 0; k < 4; ++k) a.d[k] -= b.d[k];
    return a;
  }
  friend Dual4 operator*(const Dual4& a, const Dual4& b) {
    Dual4 r{a.v * b.v, {}};
    for (int k = 0; k < 4; ++k) r.d[k] = a.d[k] * b.v + a.v * b.d[k];
    return r;
  }
  friend Dual4 operator/(const Dual4& a, const Dual4& b) {
    Dual4 r{a.v / b.v, {}};
    for (int k = 0; k < 4; ++k) r.d[k] = (a.d[k] * b.v - a.v * b.d[k]) / (b.v * b.v);
    return r;
  }
  friend Dual4 operator*(double s, Dual4 a) {
    a.v *= s;
    for (auto& x : a.d) x *= s;
    return a;
  }
};

inline Dual4 dmin(const Dual4& a, const Dual4& b) { return a.v <= b.v ? a : b; }
inline Dual4 dmax(const Dual4& a, const Dual4& b) { return a.v >= b.v ? a : b; }
inline Dual4 datan(const Dual4& a) {
  Dual4 r{std::atan(a.v), {}};
  const double s = 1.0 / (1.0 + a.v * a.v);
  for (int k = 0; k < 4; ++k) r.d[k] = a.d[k] * s;
  return r;
}

inline constexpr double kCiouEps = 1e-7;

// CIoU = IoU - rho^2 / c^2 - alpha v with v = 4/pi^2 (atan(wg/hg) - atan(wp/hp))^2
// and alpha = v / (1 - IoU + v); differentiated in full, alpha included.
inline Dual4 ciou(const Dual4& px1, const Dual4& py1, const Dual4& px2, const Dual4& py2, const Box& g) {
  const Dual4 gx1 = Dual4::constant(g.x1), gy1 = Dual4::constant(g.y1);
  const Dual4 gx2 = Dual4::constant(g.x2), gy2 = Dual4::constant(g.y2);
  const Dual4 zero = Dual4::constant(0.0), eps = Dual4::constant(kCiouEps);
  const Dual4 pw = px2 - px1, ph = py2 - py1, gw = gx2 - gx1, gh = gy2 - gy1;
  const Dual4 iw = dmax(dmin(px2, gx2) - dmax(px1, gx1), zero);
  const Dual4 ih = dmax(dmin(py2, gy2) - dmax(py1, gy1), zero);
  const Dual4 inter = iw * ih;
  const Dual4 uni = pw * ph + gw * gh - inter + eps;
  const Dual4 iou = inter / uni;
  const Dual4 cw = dmax(px2, gx2) - dmin(px1, gx1), ch = dmax(py2, gy2) - dmin(py1, gy1);
  const Dual4 c2 = cw * cw + ch * ch + eps;
  const Dual4 dx = (px1 + px2) - (gx1 + gx2), dy = (py1 + py2) - (gy1 + gy2);
  const Dual4 rho2 = 0.25 * (dx * dx + dy * dy);
  const Dual4 da = datan(gw / (gh + eps)) - datan(pw / (ph + eps));
  const Dual4 v = (4.0 / (std::numbers::pi * std::numbers::pi)) * (da * da);
  const Dual4 alpha = v / (Dual4::constant(1.0) - iou + v + eps);
  return iou - rho2 / c2 - alpha * v;
}

}  // namespace detail

// Scalar CIoU of two boxes (no gradient), for tests and diagnostics.
inline double ciou(const Box& p, const Box& g) {
  using detail::Dual4;
  return detail::ciou(Dual4::constant(p.x1), Dual4::constant(p.y1), Dual4::constant(p.x2), Dual4::constant(p.y2), g)
      .v;
}

// sum over positives of (1 - CIoU(decoded box, gt)) for the given level's
// regression map [N, 4, H, W]; differentiable in reg.
inline Tensor ciou_loss_sum(const Tensor& reg, int stride, const std::vector<PositiveCell>& cells) {
  detail::require(reg.ndim() == 4 && reg.dim(1) == 4, "ciou_loss_sum: reg must be [N,4,H,W], got " + to_string(reg.shape()));
  const std::int64_t H = reg.dim(2), W = reg.dim(3), S = H * W;
  auto grads = std::make_shared<std::vector<std::array<double, 4>>>();
  double total = 0.0;
  for (const auto& pc : cells) {
    using detail::Dual4;
    const std::int64_t c = pc.i * W + pc.j;
    const double cx = (static_cast<double>(pc.j) + 0.5) * stride, cy = (static_cast<double>(pc.i) + 0.5) * stride;
    const auto d = [&](int k) { return Dual4::seed(reg[(pc.n * 4 + k) * S + c], k); };
    const Dual4 x1 = Dual4::constant(cx) - static_cast<double>(stride) * d(0);
    const Dual4 y1 = Dual4::constant(cy) - static_cast<double>(stride) * d(1);
    const Dual4 x2 = Dual4::constant(cx) + static_cast<double>(stride) * d(2);
    const Dual4 y2 = Dual4::constant(cy) + static_cast<double>(stride) * d(3);
    const Dual4 q = detail::ciou(x1, y1, x2, y2, pc.gt);
    total += 1.0 - q.v;
    grads->push_back({-q.d[0], -q.d[1], -q.d[2], -q.d[3]});
  }
  Tensor out = Tensor::scalar(static_cast<Real>(total));
  detail::record("ciou_loss_sum", {reg}, out, [reg, cells, grads, S](std::span<const Real> go) {
    Real* g = detail::grad_buffer(reg);
    const std::int64_t W = reg.dim(3);
    for (std::size_t p = 0; p < cells.size(); ++p) {
      const auto& pc = cells[p];
      const std::int64_t c = pc.i * W + pc.j;
      for (int k = 0; k < 4; ++k) g[(pc.n * 4 + k) * S + c] += static_cast<Real>(go[0] * (*grads)[p][static_cast<std::size_t>(k)]);
    }
  });
  return out;
}

struct LossParts {
  Tensor total;
  double cls = 0.0;   // BCE sum / normaliser
  double box = 0.0;   // weighted CIoU term / normaliser
  std::int64_t num_positive = 0;
};

inline LossParts compute_loss(const HeadOutput& pred, const TargetSet& targets) {
  LossParts parts;
  parts.num_positive = static_cast<std::int64_t>(targets.positives.size());
  const Real norm = Real(1) / static_cast<Real>(std::max<std::int64_t>(1, parts.num_positive));
  Tensor cls_sum, box_sum;
  for (std::size_t l = 0; l < 3; ++l) {
    detail::require(pred.cls[l].shape() == targets.cls[l].shape(),
                    "compute_loss: level " + std::to_string(l + 3) + " logits " + to_string(pred.cls[l].shape()) +
                        " vs targets " + to_string(targets.cls[l].shape()));
    Tensor b = bce_with_logits_sum(pred.cls[l], targets.cls[l]);
    cls_sum = cls_sum.defined() ? add(cls_sum, b) : b;
    std::vector<PositiveCell> cells;
    for (const auto& pc : targets.positives) {
      if (pc.level == static_cast<int>(l)) cells.push_back(pc);
    }
    if (cells.empty()) continue;
    Tensor c = ciou_loss_sum(pred.reg[l], targets.geometry[l].stride, cells);
    box_sum = box_sum.defined() ? add(box_sum, c) : c;
  }
  Tensor total = scale(cls_sum, norm);
  parts.cls = total.item();
  if (box_sum.defined()) {
    Tensor box = scale(box_sum, static_cast<Real>(kBoxLossWeight) * norm);
    parts.box = box.item();
    total = add(total, box);
  }
  parts.total = total;
  return parts;
}

}  // namespace mnx
