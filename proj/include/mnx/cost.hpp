// Closed-form parameter and FLOP counts, computed from the config alone.
//
// FLOPs are 2 * multiply-accumulates of every convolution and linear layer
// (pointwise and depthwise included) plus 6 * L * Dinner * d_state per scan.
// Normalization, activations, pooling, elementwise adds and the state
// contraction are free. Parameters are learnable scalars only; BN running
// statistics are excluded.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

#include "mnx/model.hpp"

namespace mnx::inline MNX_ABI {

struct Cost {
  std::int64_t params = 0;
  std::int64_t flops = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    flops += o.flops;
    return *this;
  }
  double params_m() const { return static_cast<double>(params) / 1e6; }
  double flops_g() const { return static_cast<double>(flops) / 1e9; }
};

namespace cost {

struct Map {
  std::int64_t c, h, w;  // per image; batch 1
};

inline std::int64_t out_dim(std::int64_t x, int k, int stride, int pad) { return (x + 2 * pad - k) / stride + 1; }

// k x k conv with "same" padding (k/2) unless pad is given.
inline Cost conv(Map& m, std::int64_t cout, int k, int stride = 1, std::int64_t groups = 1, bool bias = true,
                 int pad = -1) {
  if (pad < 0) pad = k / 2;
  const std::int64_t ho = out_dim(m.h, k, stride, pad), wo = out_dim(m.w, k, stride, pad);
  const std::int64_t cin_g = m.c / groups;
  Cost c;
  c.params = cout * cin_g * k * k + (bias ? cout : 0);
  c.flops = 2 * cout * ho * wo * cin_g * k * k;
  m = {cout, ho, wo};
  return c;
}

inline Cost norm(const Map& m) { return {2 * m.c, 0}; }

inline Cost conv_bn_act(Map& m, std::int64_t cout, int k, int stride = 1) {
  Cost c = conv(m, cout, k, stride, 1, false);
  c += norm(m);
  return c;
}

inline Cost convnext_local(const Map& in, const BlockConfig& b) {
  Map m = in;
  Cost c = conv(m, b.channels, b.convnext_kernel, 1, b.channels, false);
  c += norm(m);
  c += conv(m, b.local_width(), 1);
  c += conv(m, b.channels, 1);
  c.params += b.channels;  // layer scale
  return c;
}

inline Cost mamba_global(const Map& in, const BlockConfig& b) {
  const std::int64_t d = b.dinner(), s = b.d_state, L = in.h * in.w;
  Map m = in;
  Cost c = norm(m);
  c += conv(m, d, 1);
  c += conv(m, d, b.conv_dim, 1, d, true);
  // scan projections A, B (D -> D*S) and delta (D -> D), plus the contraction vector
  c.params += 2 * (d * d * s + d * s) + (d * d + d) + s;
  c.flops += 2 * (2 * L * d * d * s) + 2 * L * d * d;
  c.flops += 6 * L * d * s;
  c += norm(m);
  c += conv(m, b.channels, 1);
  return c;
}

inline Cost resgate(const Map& in, const BlockConfig& b) {
  const std::int64_t h = b.gate_width();
  Map m = in;
  Cost c = norm(m);
  Map u = m;
  c += conv(u, h, 1);
  Map v = m;
  c += conv(v, h, 1);
  c += conv(u, h, 3, 1, h, true);
  c += conv(u, b.channels, 1);
  return c;
}

inline Cost block(const Map& in, const BlockConfig& b) {
  Map m = in;
  Cost c = conv(m, b.channels, 1, 1, 1, false);
  c += norm(m);
  if (uses_local(b.mode)) c += convnext_local(in, b);
  if (uses_global(b.mode)) {
    c += mamba_global(in, b);
    c += resgate(in, b);
  }
  return c;
}

inline Cost vcm(Map& m, std::int64_t out) {
  Map phase{m.c, m.h / 2, m.w / 2};
  Cost c;
  for (int i = 0; i < 4; ++i) {
    Map p = phase;
    c += conv(p, m.c, 1, 1, 1, true, 0);
  }
  Map cat{4 * m.c, phase.h, phase.w};
  c += conv(cat, out, 1, 1, 1, true, 0);
  m = cat;  // now {out, H/2, W/2}
  return c;
}

inline Cost sppf(Map& m) {
  const std::int64_t ch = m.c;
  Cost c = conv_bn_act(m, ch / 2, 1);
  m.c = 2 * ch;
  c += conv_bn_act(m, ch, 1);
  return c;
}

inline Cost fusion(Map& m, std::int64_t in, const BlockConfig& b, int depth) {
  m.c = in;
  Cost c = conv_bn_act(m, b.channels, 1);
  for (int i = 0; i < depth; ++i) c += block(m, b);
  return c;
}

}  // namespace cost

struct CostBreakdown {
  Cost backbone, neck, head;
  Cost total() const {
    Cost t = backbone;
    t += neck;
    t += head;
    return t;
  }
};

// Costs at a square input of `input` pixels (cfg.input_size when 0), batch 1.
inline CostBreakdown count_params_flops(const ModelConfig& cfg, int input = 0) {
  cfg.validate();
  using cost::Map;
  const std::int64_t s = input > 0 ? input : cfg.input_size;
  const auto w = cfg.widths();
  CostBreakdown r;

  Map m{3, s, s};
  r.backbone += cost::conv_bn_act(m, w[0] / 2, 3, 2);
  r.backbone += cost::conv_bn_act(m, w[0], 3, 2);
  std::array<Map, 4> taps{};
  for (std::size_t st = 0; st < 4; ++st) {
    if (st > 0) r.backbone += cost::vcm(m, w[st]);
    m.c = w[st];
    for (int b = 0; b < cfg.stage_depths[st]; ++b) r.backbone += cost::block(m, cfg.block(w[st]));
    taps[st] = m;
  }
  r.backbone += cost::sppf(taps[3]);

  const auto nw = cfg.neck_widths();
  auto bc = [&](std::int64_t c) { return cfg.block(c); };
  const int d = cfg.neck_depth;
  Map c3 = taps[1], c4 = taps[2], c5 = taps[3];
  Map l5 = c5, l4 = c4, l3 = c3;
  r.neck += cost::conv_bn_act(l5, nw[2], 1);
  r.neck += cost::conv_bn_act(l4, nw[1], 1);
  Map t4 = l4;
  r.neck += cost::fusion(t4, nw[2] + nw[1], bc(nw[1]), d);
  r.neck += cost::conv_bn_act(l3, nw[0], 1);
  Map lt4 = t4;
  r.neck += cost::conv_bn_act(lt4, nw[0], 1);
  Map p3 = l3;
  r.neck += cost::fusion(p3, 2 * nw[0], bc(nw[0]), d);
  Map dn3 = p3;
  if (cfg.downsample_mode == DownsampleMode::kConv) {
    r.neck += cost::conv_bn_act(dn3, nw[0], 3, 2);
  }
  Map p4 = t4;
  r.neck += cost::fusion(p4, nw[0] + 2 * nw[1], bc(nw[1]), d);
  Map dn4 = p4;
  if (cfg.downsample_mode == DownsampleMode::kConv) r.neck += cost::conv_bn_act(dn4, nw[1], 3, 2);
  Map p5 = l5;
  r.neck += cost::fusion(p5, nw[1] + nw[2], bc(nw[2]), d);

  const std::array<Map, 3> levels = {p3, p4, p5};
  for (const Map& lv : levels) {
    for (int branch = 0; branch < 2; ++branch) {
      Map x = lv;
      r.head += cost::conv(x, lv.c, 3);
      r.head += cost::conv(x, lv.c, 3);
      r.head += cost::conv(x, branch == 0 ? cfg.num_classes : 4, 1);
    }
  }
  return r;
}

inline std::string format_cost(const Cost& c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1fM params, %.1fG FLOPs", c.params_m(), c.flops_g());
  return buf;
}

}  // namespace mnx
