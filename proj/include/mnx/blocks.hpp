// Composite units of the backbone and neck: the MambaNeXt block (pre-process,
// ConvNeXt local path, state-space global path, ResGate fusion), the Vision
// Clue Merge downsampler, the patch-embedding stem and SPPF.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "mnx/nn.hpp"
#include "mnx/ops.hpp"
#include "mnx/ssm.hpp"

namespace mnx::inline MNX_ABI {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BlockMode { kResGateFirst, kConvNeXtFirst, kConvNeXtOnly, kResGateOnly };

inline const char* to_string(BlockMode m) {
  switch (m) {
    case BlockMode::kResGateFirst: return "resgate_first";
    case BlockMode::kConvNeXtFirst: return "convnext_first";
    case BlockMode::kConvNeXtOnly: return "convnext_only";
    case BlockMode::kResGateOnly: return "resgate_only";
  }
  return "?";
}

inline BlockMode parse_block_mode(const std::string& s) {
  if (s == "resgate_first") return BlockMode::kResGateFirst;
  if (s == "convnext_first") return BlockMode::kConvNeXtFirst;
  if (s == "convnext_only") return BlockMode::kConvNeXtOnly;
  if (s == "resgate_only") return BlockMode::kResGateOnly;
  throw ConfigError("block_mode: unknown value '" + s +
                    "' (expected resgate_first|convnext_first|convnext_only|resgate_only)");
}

inline bool uses_local(BlockMode m) { return m != BlockMode::kResGateOnly; }
inline bool uses_global(BlockMode m) { return m != BlockMode::kConvNeXtOnly; }

struct BlockConfig {
  std::int64_t channels = 64;
  int d_state = 16;
  double ssm_ratio = 2.0;
  int mlp_ratio = 4;
  int conv_dim = 3;  // depthwise kernel ahead of the scan
  int convnext_kernel = 7;
  int convnext_expand = 4;
  double layer_scale_init = 1e-6;
  BlockMode mode = BlockMode::kResGateFirst;
  int scan_chunk = ssm::kDefaultChunk;

  std::int64_t dinner() const { return static_cast<std::int64_t>(std::llround(ssm_ratio * static_cast<double>(channels))); }
  std::int64_t gate_width() const { return mlp_ratio * channels; }
  std::int64_t local_width() const { return convnext_expand * channels; }

  void validate() const {
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (d_state < 1) throw ConfigError("d_state must be >= 1");
    if (ssm_ratio < 1.0) throw ConfigError("ssm_ratio must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (convnext_expand < 1) throw ConfigError("convnext_expand must be >= 1");
    if (conv_dim < 1 || conv_dim % 2 == 0) throw ConfigError("conv_dim must be a positive odd kernel size");
    if (convnext_kernel < 1 || convnext_kernel % 2 == 0) {
      throw ConfigError("convnext_kernel must be a positive odd kernel size");
    }
    if (!(layer_scale_init > 0.0)) throw ConfigError("layer_scale must be > 0");
    if (scan_chunk < 1) throw ConfigError("scan_chunk must be >= 1");
  }
};

// X' = SiLU(BN(Conv1x1(X))), channel count preserved.
struct Preprocess {
  nn::Conv pw;
  nn::BatchNorm bn;

  static Preprocess make(Rng& rng, std::int64_t c) {
    return {nn::Conv::make(rng, c, c, 1, 1, 0, 1, false), nn::BatchNorm::make(c)};
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    pw.visit(p + "pw.", f);
    bn.visit(p + "bn.", f);
  }
};

inline Tensor preprocess(const Tensor& x, Preprocess& w, bool training) { return silu(w.bn(w.pw(x), training)); }

// x + gamma * PW2(GELU(PW1(BN(DWConv_k(x))))), gamma per channel.
struct ConvNeXtLocal {
  nn::Conv dw;
  nn::BatchNorm bn;
  nn::Conv pw1, pw2;
  Tensor gamma;  // [C,1,1] so it broadcasts over [N,C,H,W]

  static ConvNeXtLocal make(Rng& rng, const BlockConfig& cfg) {
    const auto c = cfg.channels, e = cfg.local_width();
    ConvNeXtLocal m;
    m.dw = nn::Conv::make(rng, c, c, cfg.convnext_kernel, 1, -1, static_cast<int>(c), false);
    m.bn = nn::BatchNorm::make(c);
    m.pw1 = nn::Conv::make(rng, c, e, 1, 1, 0);
    m.pw2 = nn::Conv::make(rng, e, c, 1, 1, 0);
    m.gamma = Tensor::full({c, 1, 1}, static_cast<Real>(cfg.layer_scale_init));
    return m;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    dw.visit(p + "dw.", f);
    bn.visit(p + "bn.", f);
    pw1.visit(p + "pw1.", f);
    pw2.visit(p + "pw2.", f);
    f(p + "layer_scale", gamma, false);
  }
};

inline Tensor convnext_local(const Tensor& x, ConvNeXtLocal& w, bool training) {
  Tensor y = w.pw2(gelu(w.pw1(w.bn(w.dw(x), training))));
  return add(x, mul(y, w.gamma));
}

// LN -> Linear C->Dinner -> DWConv -> SiLU -> scan -> contract -> LN -> Linear Dinner->C.
struct MambaGlobal {
  nn::LayerNorm ln_in;
  nn::Conv in_proj;
  nn::Conv dw;
  ssm::ScanWeights scan;
  nn::LayerNorm ln_out;
  nn::Conv out_proj;
  int chunk = ssm::kDefaultChunk;

  static MambaGlobal make(Rng& rng, const BlockConfig& cfg) {
    const auto c = cfg.channels, d = cfg.dinner();
    MambaGlobal m;
    m.ln_in = nn::LayerNorm::make(c);
    m.in_proj = nn::Conv::make(rng, c, d, 1, 1, 0);
    m.dw = nn::Conv::make(rng, d, d, cfg.conv_dim, 1, -1, static_cast<int>(d));
    m.scan = ssm::ScanWeights::init(d, cfg.d_state, rng);
    m.ln_out = nn::LayerNorm::make(d);
    m.out_proj = nn::Conv::make(rng, d, c, 1, 1, 0);
    m.chunk = cfg.scan_chunk;
    return m;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    ln_in.visit(p + "ln_in.", f);
    in_proj.visit(p + "in_proj.", f);
    dw.visit(p + "dw.", f);
    scan.visit(p + "scan.", f);
    ln_out.visit(p + "ln_out.", f);
    out_proj.visit(p + "out_proj.", f);
  }
};

inline Tensor mamba_global(const Tensor& x, const MambaGlobal& w) {
  const std::int64_t H = x.dim(2), W = x.dim(3);
  Tensor f_scan = silu(w.dw(w.in_proj(w.ln_in(x))));
  Tensor tokens = flatten_hw(f_scan);
  const std::int64_t S = w.scan.d_state();
  Tensor a = pointwise(tokens, w.scan.w_a, w.scan.b_a);
  Tensor z_b = pointwise(tokens, w.scan.w_b, w.scan.b_b);
  Tensor z_d = pointwise(tokens, w.scan.w_delta, w.scan.b_delta);
  // delta = softplus(z_d) and B = tanh(z_b) (1 - exp(-delta)) keep the gain
  // exp(-delta) + B inside (-1, 1) for any token, so long scans cannot blow up.
  Tensor h = ssm::scan_lanes(a, ssm::bounded_gain(z_b, z_d, S), softplus(z_d), S, w.chunk);
  Tensor f_mamba = unflatten_hw(ssm::contract_lanes(h, w.scan.c_out), H, W);
  return w.out_proj(w.ln_out(f_mamba));
}

struct ResGate {
  nn::LayerNorm ln;
  nn::Conv proj1, proj2;  // C -> mlp_ratio*C; proj1 yields the gate V, proj2 the value U
  nn::Conv dw;            // 3x3 depthwise on U
  nn::Conv proj3;         // mlp_ratio*C -> C

  static ResGate make(Rng& rng, const BlockConfig& cfg) {
    const auto c = cfg.channels, h = cfg.gate_width();
    ResGate m;
    m.ln = nn::LayerNorm::make(c);
    m.proj1 = nn::Conv::make(rng, c, h, 1, 1, 0);
    m.proj2 = nn::Conv::make(rng, c, h, 1, 1, 0);
    m.dw = nn::Conv::make(rng, h, h, 3, 1, 1, static_cast<int>(h));
    m.proj3 = nn::Conv::make(rng, h, c, 1, 1, 0);
    return m;
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    ln.visit(p + "ln.", f);
    proj1.visit(p + "proj1.", f);
    proj2.visit(p + "proj2.", f);
    dw.visit(p + "dw.", f);
    proj3.visit(p + "proj3.", f);
  }
};

struct ResGateOutput {
  Tensor f_tilde;  // F_global + X'
  Tensor f_prime;  // LN(f_tilde)
  Tensor y;        // f_prime + Proj3(Z)
  Tensor f_final;  // f_tilde + y
};

inline ResGateOutput resgate_fuse(const Tensor& f_global, const Tensor& x_pre, const ResGate& w) {
  detail::require_same_shape(f_global, x_pre, "resgate_fuse");
  ResGateOutput o;
  o.f_tilde = add(f_global, x_pre);
  o.f_prime = w.ln(o.f_tilde);
  Tensor u = w.proj2(o.f_prime);
  Tensor v = w.proj1(o.f_prime);
  Tensor z = mul(gelu(add(w.dw(u), u)), v);
  o.y = add(o.f_prime, w.proj3(z));
  o.f_final = add(o.f_tilde, o.y);
  return o;
}

struct MambaNeXtBlock {
  BlockConfig cfg;
  Preprocess pre;
  std::optional<ConvNeXtLocal> local;
  std::optional<MambaGlobal> global;
  std::optional<ResGate> gate;

  static MambaNeXtBlock make(Rng& rng, const BlockConfig& cfg) {
    cfg.validate();
    MambaNeXtBlock b;
    b.cfg = cfg;
    b.pre = Preprocess::make(rng, cfg.channels);
    if (uses_local(cfg.mode)) b.local = ConvNeXtLocal::make(rng, cfg);
    if (uses_global(cfg.mode)) {
      b.global = MambaGlobal::make(rng, cfg);
      b.gate = ResGate::make(rng, cfg);
    }
    return b;
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    pre.visit(p + "pre.", f);
    if (local) local->visit(p + "convnext.", f);
    if (global) global->visit(p + "mamba.", f);
    if (gate) gate->visit(p + "resgate.", f);
  }

  Tensor operator()(const Tensor& x, bool training);
};

// Wiring per mode, with X' the pre-processed input:
//   convnext_first: F_local = local(X'); G = global(F_local); out = fuse(G, X').f_final
//   resgate_first:  out = local(fuse(global(X'), X').f_final)
//   convnext_only:  out = local(X')
//   resgate_only:   out = fuse(global(X'), X').f_final
inline Tensor mambanext_forward(const Tensor& x, MambaNeXtBlock& b, bool training) {
  detail::require(x.ndim() == 4 && x.dim(1) == b.cfg.channels,
                  "mambanext_forward: expected [N," + std::to_string(b.cfg.channels) + ",H,W], got " +
                      to_string(x.shape()));
  Tensor xp = preprocess(x, b.pre, training);
  switch (b.cfg.mode) {
    case BlockMode::kConvNeXtFirst: {
      Tensor f_local = convnext_local(xp, *b.local, training);
      return resgate_fuse(mamba_global(f_local, *b.global), xp, *b.gate).f_final;
    }
    case BlockMode::kResGateFirst: {
      Tensor fused = resgate_fuse(mamba_global(xp, *b.global), xp, *b.gate).f_final;
      return convnext_local(fused, *b.local, training);
    }
    case BlockMode::kConvNeXtOnly:
      return convnext_local(xp, *b.local, training);
    case BlockMode::kResGateOnly:
      return resgate_fuse(mamba_global(xp, *b.global), xp, *b.gate).f_final;
  }
  throw std::logic_error("mambanext_forward: unhandled block mode");
}

inline Tensor MambaNeXtBlock::operator()(const Tensor& x, bool training) { return mambanext_forward(x, *this, training); }

// Splits into the four stride-2 phases in the order (even,even), (even,odd),
// (odd,even), (odd,odd) as (row, col); compresses each with a pointwise conv,
// concatenates to 4C and merges to the output width. No normalization.
struct VisionClueMerge {
  std::array<nn::Conv, 4> phase;
  nn::Conv merge;

  static VisionClueMerge make(Rng& rng, std::int64_t c, std::int64_t out) {
    VisionClueMerge m;
    for (auto& p : m.phase) p = nn::Conv::make(rng, c, c, 1, 1, 0);
    m.merge = nn::Conv::make(rng, 4 * c, out, 1, 1, 0);
    return m;
  }
  static VisionClueMerge make(Rng& rng, std::int64_t c) { return make(rng, c, 2 * c); }

  template <class F>
  void visit(const std::string& p, F&& f) {
    static constexpr const char* kNames[4] = {"ee.", "eo.", "oe.", "oo."};
    for (int i = 0; i < 4; ++i) phase[static_cast<std::size_t>(i)].visit(p + "phase_" + kNames[i], f);
    merge.visit(p + "merge.", f);
  }
};

inline Tensor vision_clue_merge(const Tensor& x, const VisionClueMerge& w) {
  detail::require(x.ndim() == 4, "vision_clue_merge: input must be [N,C,H,W], got " + to_string(x.shape()));
  detail::require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                  "vision_clue_merge: spatial dims must be even, got " + to_string(x.shape()));
  static constexpr int kPhases[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  std::vector<Tensor> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(w.phase[static_cast<std::size_t>(i)](space_phase(x, kPhases[i][0], kPhases[i][1])));
  return w.merge(concat_channels(parts));
}

// Two 3x3 stride-2 conv-BN-SiLU layers: 3 -> C0/2 -> C0, overall stride 4.
struct Stem {
  nn::ConvBnAct c1, c2;

  static Stem make(Rng& rng, std::int64_t c0) {
    return {nn::ConvBnAct::make(rng, 3, c0 / 2, 3, 2), nn::ConvBnAct::make(rng, c0 / 2, c0, 3, 2)};
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    c1.visit(p + "c1.", f);
    c2.visit(p + "c2.", f);
  }
};

inline Tensor stem(const Tensor& image, Stem& w, bool training) {
  detail::require(image.ndim() == 4 && image.dim(1) == 3,
                  "stem: input must be [N,3,H,W], got " + to_string(image.shape()));
  detail::require(image.dim(2) % 4 == 0 && image.dim(3) % 4 == 0,
                  "stem: H and W must be divisible by 4, got " + to_string(image.shape()));
  return w.c2(w.c1(image, training), training);
}

// Pointwise C -> C/2, three chained k x k stride-1 max-pools, concat of the
// four maps, pointwise back to C.
struct Sppf {
  nn::ConvBnAct cv1, cv2;
  int k = 5;

  static Sppf make(Rng& rng, std::int64_t c, int k = 5) {
    return {nn::ConvBnAct::make(rng, c, c / 2, 1), nn::ConvBnAct::make(rng, 2 * c, c, 1), k};
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    cv1.visit(p + "cv1.", f);
    cv2.visit(p + "cv2.", f);
  }
};

inline Tensor sppf_pool_chain(const Tensor& x, int k) {
  Tensor p1 = max_pool2d(x, k, 1, k / 2);
  Tensor p2 = max_pool2d(p1, k, 1, k / 2);
  Tensor p3 = max_pool2d(p2, k, 1, k / 2);
  return concat_channels({x, p1, p2, p3});
}

inline Tensor sppf(const Tensor& x, Sppf& w, bool training) {
  return w.cv2(sppf_pool_chain(w.cv1(x, training), w.k), training);
}

}  // namespace mnx
