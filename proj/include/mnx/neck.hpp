// Multi-branch asymmetric fusion pyramid over the C3/C4/C5 backbone taps.
//
//   top-down:   T4 = node(up2x(lat5(C5)), lat4(C4))
//               P3 = node(up2x(lat_t4(T4)), lat3(C3))
//   bottom-up:  P4 = node(down(P3), T4, lat4(C4))
//               P5 = node(down(P4), lat5(C5))
//
// A node concatenates its branches, maps them to the level width with a
// 1x1 conv-BN-SiLU and runs `depth` MambaNeXt blocks. P4 takes a shallow,
// same-level and deep branch.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mnx/blocks.hpp"

namespace mnx::inline MNX_ABI {

enum class DownsampleMode { kConv, kPool };

inline const char* to_string(DownsampleMode m) { return m == DownsampleMode::kConv ? "conv" : "pool"; }

inline DownsampleMode parse_downsample_mode(const std::string& s) {
  if (s == "conv") return DownsampleMode::kConv;
  if (s == "pool") return DownsampleMode::kPool;
  throw ConfigError("downsample_mode: unknown value '" + s + "' (expected conv|pool)");
}

struct FeaturePyramid {
  Tensor p3, p4, p5;

  void validate(const char* where) const {
    auto bad = [&](const std::string& why) { throw DimensionError(std::string(where) + ": pyramid geometry: " + why); };
    if (p3.ndim() != 4 || p4.ndim() != 4 || p5.ndim() != 4) bad("levels must be [N,C,H,W]");
    if (p3.dim(0) != p4.dim(0) || p4.dim(0) != p5.dim(0)) bad("batch sizes differ");
    if (p3.dim(2) != 2 * p4.dim(2) || p3.dim(3) != 2 * p4.dim(3)) {
      bad("level 4 " + to_string(p4.shape()) + " is not half of level 3 " + to_string(p3.shape()));
    }
    if (p4.dim(2) != 2 * p5.dim(2) || p4.dim(3) != 2 * p5.dim(3)) {
      bad("level 5 " + to_string(p5.shape()) + " is not half of level 4 " + to_string(p4.shape()));
    }
  }
};

// 3x3 stride-2 conv-BN-SiLU, or a 2x2 stride-2 max-pool in pool mode.
struct Downsample {
  DownsampleMode mode = DownsampleMode::kConv;
  nn::ConvBnAct conv;

  static Downsample make(Rng& rng, std::int64_t c, DownsampleMode mode) {
    Downsample d;
    d.mode = mode;
    if (mode == DownsampleMode::kConv) d.conv = nn::ConvBnAct::make(rng, c, c, 3, 2);
    return d;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    if (mode == DownsampleMode::kConv) conv.visit(p, f);
  }
};

inline Tensor downsample_conv(const Tensor& x, Downsample& w, bool training) {
  detail::require(x.ndim() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                  "downsample: spatial dims must be even, got " + to_string(x.shape()));
  if (w.mode == DownsampleMode::kPool) return max_pool2d(x, 2, 2, 0);
  return w.conv(x, training);
}

struct FusionNode {
  nn::ConvBnAct fuse;
  std::vector<MambaNeXtBlock> blocks;

  static FusionNode make(Rng& rng, std::int64_t in, const BlockConfig& block, int depth) {
    FusionNode n;
    n.fuse = nn::ConvBnAct::make(rng, in, block.channels, 1);
    for (int i = 0; i < depth; ++i) n.blocks.push_back(MambaNeXtBlock::make(rng, block));
    return n;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    fuse.visit(p + "fuse.", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + "block" + std::to_string(i) + ".", f);
  }
  Tensor operator()(const std::vector<Tensor>& branches, bool training) {
    Tensor x = fuse(concat_channels(branches), training);
    for (auto& b : blocks) x = b(x, training);
    return x;
  }
};

struct NeckConfig {
  std::int64_t in3 = 128, in4 = 256, in5 = 512;      // backbone tap widths
  std::int64_t width3 = 64, width4 = 128, width5 = 256;  // fused level widths
  int depth = 1;
  DownsampleMode downsample = DownsampleMode::kConv;
  BlockConfig block;  // channels overridden per node
  bool bottom_up = true;  // debug switch: false gives P4 = T4, P5 = lat5(C5)
};

struct MafpnNeck {
  NeckConfig cfg;
  nn::ConvBnAct lat3, lat4, lat5, lat_t4;
  FusionNode td4, td3, bu4, bu5;
  Downsample down3, down4;

  static MafpnNeck make(Rng& rng, const NeckConfig& cfg) {
    MafpnNeck n;
    n.cfg = cfg;
    auto at = [&](std::int64_t c) {
      BlockConfig b = cfg.block;
      b.channels = c;
      return b;
    };
    n.lat5 = nn::ConvBnAct::make(rng, cfg.in5, cfg.width5, 1);
    n.lat4 = nn::ConvBnAct::make(rng, cfg.in4, cfg.width4, 1);
    n.lat3 = nn::ConvBnAct::make(rng, cfg.in3, cfg.width3, 1);
    n.lat_t4 = nn::ConvBnAct::make(rng, cfg.width4, cfg.width3, 1);
    n.td4 = FusionNode::make(rng, cfg.width5 + cfg.width4, at(cfg.width4), cfg.depth);
    n.td3 = FusionNode::make(rng, 2 * cfg.width3, at(cfg.width3), cfg.depth);
    n.down3 = Downsample::make(rng, cfg.width3, cfg.downsample);
    n.bu4 = FusionNode::make(rng, cfg.width3 + 2 * cfg.width4, at(cfg.width4), cfg.depth);
    n.down4 = Downsample::make(rng, cfg.width4, cfg.downsample);
    n.bu5 = FusionNode::make(rng, cfg.width4 + cfg.width5, at(cfg.width5), cfg.depth);
    return n;
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    lat5.visit(p + "lat5.", f);
    lat4.visit(p + "lat4.", f);
    lat3.visit(p + "lat3.", f);
    lat_t4.visit(p + "lat_t4.", f);
    td4.visit(p + "td4.", f);
    td3.visit(p + "td3.", f);
    down3.visit(p + "down3.", f);
    bu4.visit(p + "bu4.", f);
    down4.visit(p + "down4.", f);
    bu5.visit(p + "bu5.", f);
  }
};

inline FeaturePyramid neck_forward(const Tensor& c3, const Tensor& c4, const Tensor& c5, MafpnNeck& n,
                                   bool training) {
  FeaturePyramid in{c3, c4, c5};
  in.validate("neck_forward");
  detail::require(c3.dim(1) == n.cfg.in3 && c4.dim(1) == n.cfg.in4 && c5.dim(1) == n.cfg.in5,
                  "neck_forward: channel widths " + std::to_string(c3.dim(1)) + "/" + std::to_string(c4.dim(1)) +
                      "/" + std::to_string(c5.dim(1)) + " do not match the configured taps");
  Tensor l5 = n.lat5(c5, training);
  Tensor l4 = n.lat4(c4, training);
  Tensor t4 = n.td4({upsample_nearest2x(l5), l4}, training);
  Tensor p3 = n.td3({upsample_nearest2x(n.lat_t4(t4, training)), n.lat3(c3, training)}, training);
  FeaturePyramid out;
  out.p3 = p3;
  if (n.cfg.bottom_up) {
    out.p4 = n.bu4({downsample_conv(p3, n.down3, training), t4, l4}, training);
    out.p5 = n.bu5({downsample_conv(out.p4, n.down4, training), l5}, training);
  } else {
    out.p4 = t4;
    out.p5 = l5;
  }
  out.validate("neck_forward");
  return out;
}

}  // namespace mnx
