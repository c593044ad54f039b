// Full detector: stem, four MambaNeXt stages joined by Vision Clue Merge,
// SPPF on the last stage, the fusion neck and the detection head.
//
//   image [N,3,H,W] -> stem (stride 4) -> stage0 -> vcm0 -> stage1 = C3 (stride 8)
//     -> vcm1 -> stage2 = C4 (stride 16) -> vcm2 -> stage3 -> sppf = C5 (stride 32)
//   (C3, C4, C5) -> neck -> (P3, P4, P5) -> head
//
// Parameter names:
//   backbone.stem.{c1,c2}.   backbone.stage<i>.block<j>.   backbone.vcm<i>.
//   backbone.sppf.           neck.{lat3,lat4,lat5,lat_t4,td4,td3,down3,bu4,down4,bu5}.
//   head.{p3,p4,p5}.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mnx/blocks.hpp"
#include "mnx/head.hpp"
#include "mnx/neck.hpp"

namespace mnx::inline MNX_ABI {

struct ModelConfig {
  int input_size = 640;
  std::array<std::int64_t, 4> stage_widths = {64, 128, 256, 512};  // before width_mult
  double width_mult = 1.0;
  std::array<int, 4> stage_depths = {1, 2, 2, 1};
  double neck_mult = 0.5;
  int neck_depth = 1;
  int num_classes = 20;
  int d_state = 16;
  double ssm_ratio = 2.0;
  int mlp_ratio = 4;
  int conv_dim = 3;
  int convnext_kernel = 7;
  int convnext_expand = 4;
  double layer_scale = 1e-6;
  DownsampleMode downsample_mode = DownsampleMode::kConv;
  BlockMode block_mode = BlockMode::kResGateFirst;
  std::uint64_t seed = 0;
  int scan_chunk = ssm::kDefaultChunk;

  std::array<std::int64_t, 4> widths() const {
    std::array<std::int64_t, 4> w{};
    for (std::size_t i = 0; i < 4; ++i) {
      w[i] = static_cast<std::int64_t>(std::llround(static_cast<double>(stage_widths[i]) * width_mult));
    }
    return w;
  }
  std::array<std::int64_t, 3> neck_widths() const {
    const auto w = widths();
    std::array<std::int64_t, 3> n{};
    for (std::size_t i = 0; i < 3; ++i) {
      n[i] = std::max<std::int64_t>(1, std::llround(static_cast<double>(w[i + 1]) * neck_mult));
    }
    return n;
  }

  BlockConfig block(std::int64_t channels) const {
    BlockConfig b;
    b.channels = channels;
    b.d_state = d_state;
    b.ssm_ratio = ssm_ratio;
    b.mlp_ratio = mlp_ratio;
    b.conv_dim = conv_dim;
    b.convnext_kernel = convnext_kernel;
    b.convnext_expand = convnext_expand;
    b.layer_scale_init = layer_scale;
    b.mode = block_mode;
    b.scan_chunk = scan_chunk;
    return b;
  }

  // Throws ConfigError listing every offending field.
  void validate() const {
    std::string bad;
    auto fail = [&](const std::string& m) { bad += (bad.empty() ? "" : "; ") + m; };
    if (input_size < 32 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
    if (!(width_mult > 0.0)) fail("width_mult must be > 0");
    const auto w = widths();
    for (std::size_t i = 0; i < 4; ++i) {
      if (w[i] < 2) fail("stage_widths[" + std::to_string(i) + "] must be >= 2 after width_mult");
      if (i > 0 && w[i] <= w[i - 1]) fail("stage_widths must be strictly increasing");
      if (stage_depths[i] < 0) fail("stage_depths[" + std::to_string(i) + "] must be >= 0");
    }
    if (w[0] % 2 != 0) fail("stage_widths[0] must be even after width_mult (stem halves it)");
    if (w[3] % 2 != 0) fail("stage_widths[3] must be even after width_mult (SPPF halves it)");
    if (!(neck_mult > 0.0)) fail("neck_mult must be > 0");
    if (neck_depth < 0) fail("neck_depth must be >= 0");
    if (num_classes < 1) fail("num_classes must be >= 1");
    try {
      block(w[0]).validate();
    } catch (const ConfigError& e) {
      fail(e.what());
    }
    if (!bad.empty()) throw ConfigError("invalid model config: " + bad);
  }
};

struct ForwardResult {
  FeaturePyramid taps;     // C3, C4, C5
  FeaturePyramid pyramid;  // P3, P4, P5
  HeadOutput head;
};

struct Model {
  ModelConfig cfg;
  Stem stem_;
  std::array<std::vector<MambaNeXtBlock>, 4> stages;
  std::array<VisionClueMerge, 3> vcm;
  Sppf sppf_;
  MafpnNeck neck;
  Head head;

  template <class F>
  void visit(F&& f) {
    stem_.visit("backbone.stem.", f);
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        stages[s][b].visit("backbone.stage" + std::to_string(s) + ".block" + std::to_string(b) + ".", f);
      }
      if (s < 3) vcm[s].visit("backbone.vcm" + std::to_string(s) + ".", f);
    }
    sppf_.visit("backbone.sppf.", f);
    neck.visit("neck.", f);
    head.visit("head.", f);
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    visit([&](const std::string&, Tensor& t, bool buffer) {
      if (!buffer) n += t.numel();
    });
    return n;
  }

  ForwardResult forward(const Tensor& images, bool training) {
    detail::require(images.ndim() == 4 && images.dim(1) == 3,
                    "model: input must be [N,3,H,W], got " + to_string(images.shape()));
    detail::require(images.dim(2) % 32 == 0 && images.dim(3) % 32 == 0,
                    "model: H and W must be multiples of 32, got " + to_string(images.shape()));
    ForwardResult r;
    Tensor x = stem(images, stem_, training);
    std::array<Tensor, 4> stage_out;
    for (std::size_t s = 0; s < 4; ++s) {
      if (s > 0) x = vision_clue_merge(x, vcm[s - 1]);
      for (auto& b : stages[s]) x = b(x, training);
      stage_out[s] = x;
    }
    r.taps = {stage_out[1], stage_out[2], sppf(stage_out[3], sppf_, training)};
    r.pyramid = neck_forward(r.taps.p3, r.taps.p4, r.taps.p5, neck, training);
    r.head = head_forward(r.pyramid, head);
    return r;
  }
};

inline Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto w = cfg.widths();
  Model m;
  m.cfg = cfg;
  m.stem_ = Stem::make(rng, w[0]);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) m.vcm[s - 1] = VisionClueMerge::make(rng, w[s - 1], w[s]);
    for (int b = 0; b < cfg.stage_depths[s]; ++b) m.stages[s].push_back(MambaNeXtBlock::make(rng, cfg.block(w[s])));
  }
  m.sppf_ = Sppf::make(rng, w[3]);
  NeckConfig nc;
  nc.in3 = w[1];
  nc.in4 = w[2];
  nc.in5 = w[3];
  const auto nw = cfg.neck_widths();
  nc.width3 = nw[0];
  nc.width4 = nw[1];
  nc.width5 = nw[2];
  nc.depth = cfg.neck_depth;
  nc.downsample = cfg.downsample_mode;
  nc.block = cfg.block(nw[0]);
  m.neck = MafpnNeck::make(rng, nc);
  m.head = Head::make(rng, nw, cfg.num_classes);
  return m;
}

// ---------------------------------------------------------------------------
// Named tensor collection; insertion order is the file order.

class WeightError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class WeightStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw WeightError("weight store: duplicate tensor name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw WeightError("weight store: no tensor named '" + name + "'");
    return entries_[it->second].second;
  }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Snapshot of every parameter and buffer (copies, so later training steps
// do not alter the store).
inline WeightStore to_store(Model& m) {
  WeightStore s;
  m.visit([&](const std::string& name, Tensor& t, bool) { s.add(name, t.detach()); });
  return s;
}

// Copies tensors into the model; every model tensor must be present with a
// matching shape and the store must hold nothing else.
inline void load_store(Model& m, const WeightStore& s) {
  std::size_t seen = 0;
  m.visit([&](const std::string& name, Tensor& t, bool) {
    const Tensor& src = s.at(name);
    if (src.shape() != t.shape()) {
      throw WeightError("weight '" + name + "': file shape " + to_string(src.shape()) + " vs model " +
                        to_string(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
    ++seen;
  });
  if (seen != s.size()) {
    throw WeightError("weight store holds " + std::to_string(s.size() - seen) + " tensor(s) the model does not use");
  }
}

}  // namespace mnx
