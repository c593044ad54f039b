// Decoupled anchor-free head over P3/P4/P5, box decoding and class-aware NMS.
//
// Per level: a classification stack and a regression stack, each two 3x3
// conv+SiLU layers, ending in 1x1 convs to K logits and to 4 distances
// (l, t, r, b) in stride units made positive with softplus.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mnx/box.hpp"
#include "mnx/neck.hpp"
#include "mnx/nn.hpp"

namespace mnx::inline MNX_ABI {

inline constexpr std::array<int, 3> kStrides = {8, 16, 32};
inline constexpr float kClsPriorBias = -4.6f;  // sigmoid(-4.6) ~ 0.01

struct HeadLevel {
  nn::Conv cls1, cls2, cls_out;
  nn::Conv reg1, reg2, reg_out;

  static HeadLevel make(Rng& rng, std::int64_t c, int num_classes) {
    HeadLevel h;
    h.cls1 = nn::Conv::make(rng, c, c, 3);
    h.cls2 = nn::Conv::make(rng, c, c, 3);
    h.cls_out = nn::Conv::make(rng, c, num_classes, 1);
    std::fill(h.cls_out.weight.data().begin(), h.cls_out.weight.data().end(), Real(0));
    std::fill(h.cls_out.bias.data().begin(), h.cls_out.bias.data().end(), static_cast<Real>(kClsPriorBias));
    h.reg1 = nn::Conv::make(rng, c, c, 3);
    h.reg2 = nn::Conv::make(rng, c, c, 3);
    h.reg_out = nn::Conv::make(rng, c, 4, 1);
    return h;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    cls1.visit(p + "cls1.", f);
    cls2.visit(p + "cls2.", f);
    cls_out.visit(p + "cls_out.", f);
    reg1.visit(p + "reg1.", f);
    reg2.visit(p + "reg2.", f);
    reg_out.visit(p + "reg_out.", f);
  }
};

struct Head {
  int num_classes = 0;
  std::array<HeadLevel, 3> levels;

  static Head make(Rng& rng, const std::array<std::int64_t, 3>& widths, int num_classes) {
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    Head h;
    h.num_classes = num_classes;
    for (std::size_t l = 0; l < 3; ++l) h.levels[l] = HeadLevel::make(rng, widths[l], num_classes);
    return h;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    static constexpr const char* kNames[3] = {"p3.", "p4.", "p5."};
    for (std::size_t l = 0; l < 3; ++l) levels[l].visit(p + kNames[l], f);
  }
};

struct HeadOutput {
  std::array<Tensor, 3> cls;  // [N, K, Hl, Wl] logits
  std::array<Tensor, 3> reg;  // [N, 4, Hl, Wl] positive distances in stride units
};

inline HeadOutput head_forward(const FeaturePyramid& pyr, const Head& head) {
  pyr.validate("head_forward");
  const std::array<const Tensor*, 3> maps = {&pyr.p3, &pyr.p4, &pyr.p5};
  HeadOutput out;
  for (std::size_t l = 0; l < 3; ++l) {
    const HeadLevel& h = head.levels[l];
    const Tensor& x = *maps[l];
    out.cls[l] = h.cls_out(silu(h.cls2(silu(h.cls1(x)))));
    out.reg[l] = softplus(h.reg_out(silu(h.reg2(silu(h.reg1(x))))));
  }
  return out;
}

// Cell (i, j) has centre ((j + 0.5) s, (i + 0.5) s).
inline Box decode_ltrb(double l, double t, double r, double b, std::int64_t i, std::int64_t j, int stride) {
  const double cx = (static_cast<double>(j) + 0.5) * stride, cy = (static_cast<double>(i) + 0.5) * stride;
  return Box{static_cast<float>(cx - l * stride), static_cast<float>(cy - t * stride),
             static_cast<float>(cx + r * stride), static_cast<float>(cy + b * stride)};
}

inline std::array<double, 4> encode_ltrb(const Box& box, std::int64_t i, std::int64_t j, int stride) {
  const double cx = (static_cast<double>(j) + 0.5) * stride, cy = (static_cast<double>(i) + 0.5) * stride;
  return {(cx - box.x1) / stride, (cy - box.y1) / stride, (box.x2 - cx) / stride, (box.y2 - cy) / stride};
}

inline Box clip_box(Box b, float w, float h) {
  b.x1 = std::clamp(b.x1, 0.0f, w);
  b.x2 = std::clamp(b.x2, 0.0f, w);
  b.y1 = std::clamp(b.y1, 0.0f, h);
  b.y2 = std::clamp(b.y2, 0.0f, h);
  return b;
}

// Every (cell, class) with sigmoid(logit) > conf_thresh becomes a detection
// for batch entry `n`; boxes are clipped to [0, image_w] x [0, image_h].
inline std::vector<Detection> decode_boxes(const Tensor& cls, const Tensor& reg, int stride, float conf_thresh,
                                           float image_w, float image_h, std::int64_t n = 0,
                                           std::int64_t image_id = 0) {
  detail::require(cls.ndim() == 4 && reg.ndim() == 4 && reg.dim(1) == 4,
                  "decode_boxes: expected cls [N,K,H,W] and reg [N,4,H,W], got " + to_string(cls.shape()) + " and " +
                      to_string(reg.shape()));
  detail::require(cls.dim(2) == reg.dim(2) && cls.dim(3) == reg.dim(3) && cls.dim(0) == reg.dim(0),
                  "decode_boxes: cls and reg grids differ");
  detail::require(n >= 0 && n < cls.dim(0), "decode_boxes: batch index out of range");
  if (!(conf_thresh > 0.0f && conf_thresh <= 1.0f)) throw ConfigError("decode_boxes: conf_thresh must be in (0, 1]");
  const std::int64_t K = cls.dim(1), H = cls.dim(2), W = cls.dim(3), S = H * W;
  std::vector<Detection> dets;
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      const std::int64_t cell = i * W + j;
      for (std::int64_t k = 0; k < K; ++k) {
        const float score = static_cast<float>(detail::sigmoid(cls[(n * K + k) * S + cell]));
        if (!(score > conf_thresh)) continue;
        const auto d = [&](int c) { return static_cast<double>(reg[(n * 4 + c) * S + cell]); };
        Box b = clip_box(decode_ltrb(d(0), d(1), d(2), d(3), i, j, stride), image_w, image_h);
        if (!b.valid()) continue;
        dets.push_back({image_id, static_cast<int>(k), score, b});
      }
    }
  }
  return dets;
}

// Decodes all three levels of one batch entry.
inline std::vector<Detection> decode_head(const HeadOutput& out, float conf_thresh, float image_w, float image_h,
                                          std::int64_t n = 0, std::int64_t image_id = 0) {
  std::vector<Detection> dets;
  for (std::size_t l = 0; l < 3; ++l) {
    auto d = decode_boxes(out.cls[l], out.reg[l], kStrides[l], conf_thresh, image_w, image_h, n, image_id);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return dets;
}

// Processing order: score descending, then lower class id, then input order.
inline std::vector<std::size_t> nms_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> idx(dets.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].class_id < dets[b].class_id;
  });
  return idx;
}

// Greedy suppression: a detection is kept unless an already kept one (of
// the same class when class_aware) overlaps it with IoU > iou_thresh.
// Output is in processing order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_thresh = 0.65f,
                                  bool class_aware = true) {
  const auto order = nms_order(dets);
  std::vector<Detection> kept;
  // kept boxes bucketed per class so the inner scan only sees candidates
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    const std::size_t bucket = class_aware ? static_cast<std::size_t>(std::max(d.class_id, 0)) : 0;
    if (bucket >= by_class.size()) by_class.resize(bucket + 1);
    bool suppressed = false;
    for (std::size_t k : by_class[bucket]) {
      if (iou(kept[k].box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    by_class[bucket].push_back(kept.size());
    kept.push_back(d);
  }
  return kept;
}

}  // namespace mnx
