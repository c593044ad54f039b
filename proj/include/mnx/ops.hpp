// Differentiable tensor operators over NCHW feature maps.
//
// Every op computes its output eagerly and, when recording, registers a
// closure that accumulates input gradients from the output gradient.
// Broadcasting in add/mul follows trailing-axis alignment: shapes are
// right-aligned, missing leading axes count as 1, and an axis of size 1
// stretches to match the other operand.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "mnx/tensor.hpp"

namespace mnx::inline MNX_ABI {

namespace detail {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

// Product of the axes after the channel axis.
inline std::int64_t spatial_size(const Tensor& x) {
  std::int64_t s = 1;
  for (int i = 2; i < x.ndim(); ++i) s *= x.dim(i);
  return s;
}

inline Real sigmoid(Real v) {
  if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
  Real e = std::exp(v);
  return e / (1.0f + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

namespace detail {

inline void im2col(const Real* in, std::int64_t C, std::int64_t H, std::int64_t W, int kh, int kw, int stride,
                   int pad, std::int64_t Ho, std::int64_t Wo, Real* col) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        Real* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          std::int64_t iy = oy * stride + ky - pad;
          Real* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, 0.0f);
            continue;
          }
          const Real* src = in + (c * H + iy) * W;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            std::int64_t ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_add(const Real* col, std::int64_t C, std::int64_t H, std::int64_t W, int kh, int kw,
                       int stride, int pad, std::int64_t Ho, std::int64_t Wo, Real* out) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const Real* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          Real* dst = out + (c * H + iy) * W;
          const Real* src = row + oy * Wo;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            std::int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Output columns [lo, hi) whose input column ox*stride + k - pad lies in [0, W).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t W, std::int64_t Wo, int k, int stride,
                                                         int pad) {
  std::int64_t lo = 0;
  while (lo < Wo && lo * stride + k - pad < 0) ++lo;
  std::int64_t hi = Wo;
  while (hi > lo && (hi - 1) * stride + k - pad >= W) --hi;
  return {lo, hi};
}

inline void depthwise_plane(const Real* in, std::int64_t H, std::int64_t W, const Real* w, int k, int stride,
                            int pad, Real bias, std::int64_t Ho, std::int64_t Wo, Real* out) {
  std::fill(out, out + Ho * Wo, bias);
  for (std::int64_t oy = 0; oy < Ho; ++oy) {
    Real* orow = out + oy * Wo;
    for (int ky = 0; ky < k; ++ky) {
      std::int64_t iy = oy * stride + ky - pad;
      if (iy < 0 || iy >= H) continue;
      const Real* irow = in + iy * W;
      for (int kx = 0; kx < k; ++kx) {
        const Real wv = w[ky * k + kx];
        auto [lo, hi] = valid_range(W, Wo, kx, stride, pad);
        const std::int64_t off = kx - pad;
        if (stride == 1) {
          for (std::int64_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox + off];
        } else {
          for (std::int64_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * stride + off];
        }
      }
    }
  }
}

inline void depthwise_plane_backward(const Real* in, std::int64_t H, std::int64_t W, const Real* w, int k,
                                     int stride, int pad, std::int64_t Ho, std::int64_t Wo, const Real* gout,
                                     Real* gin, double* gw) {
  for (std::int64_t oy = 0; oy < Ho; ++oy) {
    const Real* grow = gout + oy * Wo;
    for (int ky = 0; ky < k; ++ky) {
      std::int64_t iy = oy * stride + ky - pad;
      if (iy < 0 || iy >= H) continue;
      const Real* irow = in + iy * W;
      Real* girow = gin ? gin + iy * W : nullptr;
      for (int kx = 0; kx < k; ++kx) {
        const Real wv = w[ky * k + kx];
        auto [lo, hi] = valid_range(W, Wo, kx, stride, pad);
        double acc = 0.0;
        for (std::int64_t ox = lo; ox < hi; ++ox) {
          std::int64_t ix = ox * stride + kx - pad;
          acc += static_cast<double>(grow[ox]) * irow[ix];
          if (girow) girow[ix] += wv * grow[ox];
        }
        if (gw) gw[ky * k + kx] += acc;
      }
    }
  }
}

}  // namespace detail

// x [N, Cin, ...] times w [Cout, Cin/groups] (or [Cout, Cin/groups, 1, 1]) per position.
inline Tensor pointwise(const Tensor& x, const Tensor& w, const Tensor& b = {}, int groups = 1) {
  using namespace detail;
  require(x.ndim() >= 2, "pointwise: input needs [N,C,...], got " + to_string(x.shape()));
  require(w.ndim() == 2 || (w.ndim() == 4 && w.dim(2) == 1 && w.dim(3) == 1),
          "pointwise: weight must be [Cout,Cin] or [Cout,Cin,1,1], got " + to_string(w.shape()));
  const std::int64_t N = x.dim(0), Cin = x.dim(1), S = spatial_size(x);
  const std::int64_t Cout = w.dim(0), Cin_g = w.dim(1);
  require(groups >= 1 && Cin % groups == 0 && Cout % groups == 0,
          "pointwise: channels (in " + std::to_string(Cin) + ", out " + std::to_string(Cout) +
              ") not divisible by groups " + std::to_string(groups));
  require(Cin_g * groups == Cin, "pointwise: weight axis 1 (" + std::to_string(Cin_g) +
                                     ") must equal input channels/groups (" + std::to_string(Cin / groups) + ")");
  if (b.defined()) require(b.numel() == Cout, "pointwise: bias length must equal Cout");
  const std::int64_t Cout_g = Cout / groups;

  Shape os = x.shape();
  os[1] = Cout;
  Tensor out(os);
  for (std::int64_t n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      ConstMatMap W(w.ptr() + g * Cout_g * Cin_g, Cout_g, Cin_g);
      ConstMatMap X(x.ptr() + (n * Cin + g * Cin_g) * S, Cin_g, S);
      MatMap O(out.ptr() + (n * Cout + g * Cout_g) * S, Cout_g, S);
      O.noalias() = W * X;
    }
    if (b.defined()) {
      for (std::int64_t c = 0; c < Cout; ++c) {
        Real* o = out.ptr() + (n * Cout + c) * S;
        const Real bv = b[c];
        for (std::int64_t s = 0; s < S; ++s) o[s] += bv;
      }
    }
  }
  flop_tally() += static_cast<std::uint64_t>(2 * N * Cout * S * Cin_g);

  record("pointwise", {x, w, b}, out, [x, w, b, out, groups, N, Cin, Cout, Cin_g, Cout_g, S](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    Real* gw = grad_buffer(w);
    Real* gb = grad_buffer(b);
    for (std::int64_t n = 0; n < N; ++n) {
      for (int g = 0; g < groups; ++g) {
        ConstMatMap G(go.data() + (n * Cout + g * Cout_g) * S, Cout_g, S);
        if (gx) {
          ConstMatMap W(w.ptr() + g * Cout_g * Cin_g, Cout_g, Cin_g);
          MatMap GX(gx + (n * Cin + g * Cin_g) * S, Cin_g, S);
          GX.noalias() += W.transpose() * G;
        }
        if (gw) {
          ConstMatMap X(x.ptr() + (n * Cin + g * Cin_g) * S, Cin_g, S);
          MatMap GW(gw + g * Cout_g * Cin_g, Cout_g, Cin_g);
          GW.noalias() += G * X.transpose();
        }
      }
      if (gb) {
        for (std::int64_t c = 0; c < Cout; ++c) {
          const Real* gr = go.data() + (n * Cout + c) * S;
          double acc = 0.0;
          for (std::int64_t s = 0; s < S; ++s) acc += gr[s];
          gb[c] += static_cast<Real>(acc);
        }
      }
    }
  });
  return out;
}

// Row-wise affine map: x [M, Din] times w [Dout, Din]^T plus b [Dout].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  using namespace detail;
  require(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
          "linear: expected x [M,Din] and w [Dout,Din], got " + to_string(x.shape()) + " and " + to_string(w.shape()));
  const std::int64_t M = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  if (b.defined()) require(b.numel() == Dout, "linear: bias length must equal Dout");
  Tensor out({M, Dout});
  MatMap O(out.ptr(), M, Dout);
  O.noalias() = ConstMatMap(x.ptr(), M, Din) * ConstMatMap(w.ptr(), Dout, Din).transpose();
  if (b.defined()) {
    for (std::int64_t m = 0; m < M; ++m) {
      for (std::int64_t j = 0; j < Dout; ++j) out[m * Dout + j] += b[j];
    }
  }
  flop_tally() += static_cast<std::uint64_t>(2 * M * Din * Dout);
  record("linear", {x, w, b}, out, [x, w, b, M, Din, Dout](std::span<const Real> go) {
    ConstMatMap G(go.data(), M, Dout);
    if (Real* gx = grad_buffer(x)) MatMap(gx, M, Din).noalias() += G * ConstMatMap(w.ptr(), Dout, Din);
    if (Real* gw = grad_buffer(w)) MatMap(gw, Dout, Din).noalias() += G.transpose() * ConstMatMap(x.ptr(), M, Din);
    if (Real* gb = grad_buffer(b)) {
      for (std::int64_t j = 0; j < Dout; ++j) {
        double acc = 0.0;
        for (std::int64_t m = 0; m < M; ++m) acc += go[static_cast<std::size_t>(m * Dout + j)];
        gb[j] += static_cast<Real>(acc);
      }
    }
  });
  return out;
}

// x [N,Cin,H,W], w [Cout,Cin/groups,kh,kw], optional b [Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = {}, Conv2dParams p = {}) {
  using namespace detail;
  require(x.ndim() == 4, "conv2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  require(w.ndim() == 4, "conv2d: weight must be [Cout,Cin/groups,kh,kw], got " + to_string(w.shape()));
  const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0), Cin_g = w.dim(1);
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const int G = p.groups;
  require(G >= 1 && Cin % G == 0,
          "conv2d: input channels " + std::to_string(Cin) + " not divisible by groups " + std::to_string(G));
  require(Cout % G == 0,
          "conv2d: output channels " + std::to_string(Cout) + " not divisible by groups " + std::to_string(G));
  require(Cin_g * G == Cin, "conv2d: weight axis 1 (" + std::to_string(Cin_g) + ") != Cin/groups (" +
                                std::to_string(Cin / G) + ")");
  require(p.stride >= 1 && p.padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  if (b.defined()) require(b.numel() == Cout, "conv2d: bias length must equal Cout");
  const std::int64_t Ho = (H + 2 * p.padding - kh) / p.stride + 1;
  const std::int64_t Wo = (W + 2 * p.padding - kw) / p.stride + 1;
  require(H + 2 * p.padding >= kh && Ho >= 1, "conv2d: axis H (" + std::to_string(H) + ") too small for kernel");
  require(W + 2 * p.padding >= kw && Wo >= 1, "conv2d: axis W (" + std::to_string(W) + ") too small for kernel");

  if (kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0) return pointwise(x, w, b, G);

  const std::int64_t Cout_g = Cout / G;
  const bool depthwise = (G == Cin && Cout == Cin && Cin_g == 1 && kh == kw);
  Tensor out({N, Cout, Ho, Wo});
  flop_tally() += static_cast<std::uint64_t>(2 * N * Cout * Ho * Wo * Cin_g * kh * kw);

  if (depthwise) {
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t c = 0; c < Cin; ++c) {
        depthwise_plane(x.ptr() + (n * Cin + c) * H * W, H, W, w.ptr() + c * kh * kw, kh, p.stride, p.padding,
                        b.defined() ? b[c] : 0.0f, Ho, Wo, out.ptr() + (n * Cout + c) * Ho * Wo);
      }
    }
    record("conv2d_depthwise", {x, w, b}, out, [x, w, b, p, N, Cin, H, W, Ho, Wo, kh](std::span<const Real> go) {
      Real* gx = grad_buffer(x);
      Real* gw = grad_buffer(w);
      Real* gb = grad_buffer(b);
      std::vector<double> gwc(static_cast<std::size_t>(kh * kh));
      for (std::int64_t c = 0; c < Cin; ++c) {
        std::fill(gwc.begin(), gwc.end(), 0.0);
        double bacc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const Real* gplane = go.data() + (n * Cin + c) * Ho * Wo;
          depthwise_plane_backward(x.ptr() + (n * Cin + c) * H * W, H, W, w.ptr() + c * kh * kh, kh, p.stride,
                                   p.padding, Ho, Wo, gplane, gx ? gx + (n * Cin + c) * H * W : nullptr,
                                   gw ? gwc.data() : nullptr);
          if (gb) {
            for (std::int64_t i = 0; i < Ho * Wo; ++i) bacc += gplane[i];
          }
        }
        if (gw) {
          for (int i = 0; i < kh * kh; ++i) gw[c * kh * kh + i] += static_cast<Real>(gwc[static_cast<std::size_t>(i)]);
        }
        if (gb) gb[c] += static_cast<Real>(bacc);
      }
    });
    detail::debug_check_finite(out, "conv2d");
    return out;
  }

  const std::int64_t K = Cin_g * kh * kw;
  std::vector<Real> col(static_cast<std::size_t>(K * Ho * Wo));
  for (std::int64_t n = 0; n < N; ++n) {
    for (int g = 0; g < G; ++g) {
      im2col(x.ptr() + (n * Cin + g * Cin_g) * H * W, Cin_g, H, W, kh, kw, p.stride, p.padding, Ho, Wo, col.data());
      ConstMatMap Wm(w.ptr() + g * Cout_g * K, Cout_g, K);
      ConstMatMap Cm(col.data(), K, Ho * Wo);
      MatMap O(out.ptr() + (n * Cout + g * Cout_g) * Ho * Wo, Cout_g, Ho * Wo);
      O.noalias() = Wm * Cm;
    }
    if (b.defined()) {
      for (std::int64_t c = 0; c < Cout; ++c) {
        Real* o = out.ptr() + (n * Cout + c) * Ho * Wo;
        for (std::int64_t s = 0; s < Ho * Wo; ++s) o[s] += b[c];
      }
    }
  }
  record("conv2d", {x, w, b}, out, [x, w, b, p, N, Cin, H, W, Cout, Cin_g, Cout_g, kh, kw, Ho, Wo, K, G](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    Real* gw = grad_buffer(w);
    Real* gb = grad_buffer(b);
    std::vector<Real> colb(static_cast<std::size_t>(K * Ho * Wo));
    std::vector<Real> dcol(gx ? colb.size() : 0);
    for (std::int64_t n = 0; n < N; ++n) {
      for (int g = 0; g < G; ++g) {
        ConstMatMap Gm(go.data() + (n * Cout + g * Cout_g) * Ho * Wo, Cout_g, Ho * Wo);
        if (gw) {
          im2col(x.ptr() + (n * Cin + g * Cin_g) * H * W, Cin_g, H, W, kh, kw, p.stride, p.padding, Ho, Wo,
                 colb.data());
          ConstMatMap Cm(colb.data(), K, Ho * Wo);
          MatMap GW(gw + g * Cout_g * K, Cout_g, K);
          GW.noalias() += Gm * Cm.transpose();
        }
        if (gx) {
          ConstMatMap Wm(w.ptr() + g * Cout_g * K, Cout_g, K);
          MatMap D(dcol.data(), K, Ho * Wo);
          D.noalias() = Wm.transpose() * Gm;
          col2im_add(dcol.data(), Cin_g, H, W, kh, kw, p.stride, p.padding, Ho, Wo,
                     gx + (n * Cin + g * Cin_g) * H * W);
        }
      }
      if (gb) {
        for (std::int64_t c = 0; c < Cout; ++c) {
          const Real* gr = go.data() + (n * Cout + c) * Ho * Wo;
          double acc = 0.0;
          for (std::int64_t s = 0; s < Ho * Wo; ++s) acc += gr[s];
          gb[c] += static_cast<Real>(acc);
        }
      }
    }
  });
  detail::debug_check_finite(out, "conv2d");
  return out;
}

// Max pooling with implicit -inf padding; ties go to the first maximum.
inline Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding = 0) {
  using namespace detail;
  require(x.ndim() == 4, "max_pool2d: input must be [N,C,H,W], got " + to_string(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "max_pool2d: spatial size " + to_string(x.shape()) + " too small for kernel");
  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(out.numel()));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const Real* in = x.ptr() + nc * H * W;
    Real* o = out.ptr() + nc * Ho * Wo;
    std::int32_t* am = argmax->data() + nc * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        Real best = -std::numeric_limits<Real>::infinity();
        std::int32_t bi = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          std::int64_t iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            std::int64_t ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= W) continue;
            Real v = in[iy * W + ix];
            if (bi < 0 || v > best) {
              best = v;
              bi = static_cast<std::int32_t>(iy * W + ix);
            }
          }
        }
        o[oy * Wo + ox] = best;
        am[oy * Wo + ox] = bi;
      }
    }
  }
  record("max_pool2d", {x}, out, [x, argmax, N, C, H, W, Ho, Wo](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      for (std::int64_t i = 0; i < Ho * Wo; ++i) {
        gx[nc * H * W + (*argmax)[static_cast<std::size_t>(nc * Ho * Wo + i)]] += go[static_cast<std::size_t>(nc * Ho * Wo + i)];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormConstants {
  static constexpr Real kBatchNormEps = 1e-5f;
  static constexpr Real kBatchNormMomentum = 0.03f;
  static constexpr Real kLayerNormEps = 1e-6f;
};

// Per-channel normalization over (N, spatial). Training mode uses batch
// statistics and updates the running estimates in place; eval mode uses them.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, bool training, Real momentum = NormConstants::kBatchNormMomentum,
                         Real eps = NormConstants::kBatchNormEps) {
  using namespace detail;
  require(x.ndim() >= 2, "batch_norm: input needs [N,C,...], got " + to_string(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), S = spatial_size(x);
  require(gamma.numel() == C && beta.numel() == C,
          "batch_norm: gamma/beta length must equal channel count " + std::to_string(C));
  require(running_mean.numel() == C && running_var.numel() == C,
          "batch_norm: running stats length must equal channel count " + std::to_string(C));
  Tensor out(x.shape());
  auto mean = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(C));
  auto invstd = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(C));
  const double M = static_cast<double>(N * S);
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const Real* p = x.ptr() + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) s += p[i];
      }
      mu = s / M;
      double q = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const Real* p = x.ptr() + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) {
          double d = p[i] - mu;
          q += d * d;
        }
      }
      var = q / M;
      const double unbiased = M > 1 ? var * M / (M - 1) : var;
      running_mean[c] = static_cast<Real>((1.0 - momentum) * running_mean[c] + momentum * mu);
      running_var[c] = static_cast<Real>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const Real is = static_cast<Real>(1.0 / std::sqrt(var + eps));
    (*mean)[static_cast<std::size_t>(c)] = static_cast<Real>(mu);
    (*invstd)[static_cast<std::size_t>(c)] = is;
    const Real scale = gamma[c] * is, shift = beta[c] - static_cast<Real>(mu) * scale;
    for (std::int64_t n = 0; n < N; ++n) {
      const Real* p = x.ptr() + (n * C + c) * S;
      Real* o = out.ptr() + (n * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) o[i] = p[i] * scale + shift;
    }
  }
  record("batch_norm", {x, gamma, beta}, out, [x, gamma, beta, mean, invstd, training, N, C, S, M](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    Real* gg = grad_buffer(gamma);
    Real* gb = grad_buffer(beta);
    for (std::int64_t c = 0; c < C; ++c) {
      const Real mu = (*mean)[static_cast<std::size_t>(c)], is = (*invstd)[static_cast<std::size_t>(c)];
      double sdy = 0.0, sdyx = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const Real* p = x.ptr() + (n * C + c) * S;
        const Real* g = go.data() + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) {
          sdy += g[i];
          sdyx += static_cast<double>(g[i]) * (p[i] - mu) * is;
        }
      }
      if (gg) gg[c] += static_cast<Real>(sdyx);
      if (gb) gb[c] += static_cast<Real>(sdy);
      if (!gx) continue;
      const Real k = gamma[c] * is;
      if (training) {
        const Real a = static_cast<Real>(sdy / M), bcoef = static_cast<Real>(sdyx / M);
        for (std::int64_t n = 0; n < N; ++n) {
          const Real* p = x.ptr() + (n * C + c) * S;
          const Real* g = go.data() + (n * C + c) * S;
          Real* d = gx + (n * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) d[i] += k * (g[i] - a - (p[i] - mu) * is * bcoef);
        }
      } else {
        for (std::int64_t n = 0; n < N; ++n) {
          const Real* g = go.data() + (n * C + c) * S;
          Real* d = gx + (n * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) d[i] += k * g[i];
        }
      }
    }
  });
  return out;
}

// Normalizes across the channel axis independently at every (n, position).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Real eps = NormConstants::kLayerNormEps) {
  using namespace detail;
  require(x.ndim() >= 2, "layer_norm: input needs [N,C,...], got " + to_string(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), S = spatial_size(x);
  require(gamma.numel() == C && beta.numel() == C,
          "layer_norm: gamma/beta length must equal channel count " + std::to_string(C));
  Tensor out(x.shape());
  auto mean = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(N * S));
  auto invstd = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(N * S));
  std::vector<double> acc(static_cast<std::size_t>(S)), acc2(static_cast<std::size_t>(S));
  for (std::int64_t n = 0; n < N; ++n) {
    const Real* xb = x.ptr() + n * C * S;
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(acc2.begin(), acc2.end(), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
      const Real* p = xb + c * S;
      for (std::int64_t i = 0; i < S; ++i) acc[static_cast<std::size_t>(i)] += p[i];
    }
    Real* mu = mean->data() + n * S;
    for (std::int64_t i = 0; i < S; ++i) mu[i] = static_cast<Real>(acc[static_cast<std::size_t>(i)] / C);
    for (std::int64_t c = 0; c < C; ++c) {
      const Real* p = xb + c * S;
      for (std::int64_t i = 0; i < S; ++i) {
        double d = static_cast<double>(p[i]) - mu[i];
        acc2[static_cast<std::size_t>(i)] += d * d;
      }
    }
    Real* is = invstd->data() + n * S;
    for (std::int64_t i = 0; i < S; ++i) {
      is[i] = static_cast<Real>(1.0 / std::sqrt(acc2[static_cast<std::size_t>(i)] / C + eps));
    }
    for (std::int64_t c = 0; c < C; ++c) {
      const Real* p = xb + c * S;
      Real* o = out.ptr() + (n * C + c) * S;
      const Real gv = gamma[c], bv = beta[c];
      for (std::int64_t i = 0; i < S; ++i) o[i] = (p[i] - mu[i]) * is[i] * gv + bv;
    }
  }
  record("layer_norm", {x, gamma, beta}, out, [x, gamma, beta, mean, invstd, N, C, S](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    Real* gg = grad_buffer(gamma);
    Real* gb = grad_buffer(beta);
    std::vector<double> mg(static_cast<std::size_t>(S)), mgx(static_cast<std::size_t>(S));
    for (std::int64_t n = 0; n < N; ++n) {
      const Real* mu = mean->data() + n * S;
      const Real* is = invstd->data() + n * S;
      std::fill(mg.begin(), mg.end(), 0.0);
      std::fill(mgx.begin(), mgx.end(), 0.0);
      for (std::int64_t c = 0; c < C; ++c) {
        const Real* p = x.ptr() + (n * C + c) * S;
        const Real* g = go.data() + (n * C + c) * S;
        const Real gv = gamma[c];
        double sg = 0.0, sgx = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
          const Real xh = (p[i] - mu[i]) * is[i];
          const Real gg_i = g[i] * gv;
          mg[static_cast<std::size_t>(i)] += gg_i;
          mgx[static_cast<std::size_t>(i)] += static_cast<double>(gg_i) * xh;
          sg += g[i];
          sgx += static_cast<double>(g[i]) * xh;
        }
        if (gg) gg[c] += static_cast<Real>(sgx);
        if (gb) gb[c] += static_cast<Real>(sg);
      }
      if (!gx) continue;
      for (std::int64_t c = 0; c < C; ++c) {
        const Real* p = x.ptr() + (n * C + c) * S;
        const Real* g = go.data() + (n * C + c) * S;
        Real* d = gx + (n * C + c) * S;
        const Real gv = gamma[c];
        for (std::int64_t i = 0; i < S; ++i) {
          const Real xh = (p[i] - mu[i]) * is[i];
          const Real a = static_cast<Real>(mg[static_cast<std::size_t>(i)] / C);
          const Real bcoef = static_cast<Real>(mgx[static_cast<std::size_t>(i)] / C);
          d[i] += is[i] * (g[i] * gv - a - xh * bcoef);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& x, const char* op, F f, DF df) {
  Tensor out(x.shape());
  const auto n = x.numel();
  const Real* in = x.ptr();
  Real* o = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) o[i] = f(in[i]);
  record(op, {x}, out, [x, df, n](std::span<const Real> go) {
    Real* gx = grad_buffer(x);
    const Real* in = x.ptr();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += go[static_cast<std::size_t>(i)] * df(in[i]);
  });
  return out;
}

constexpr Real kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr Real kGeluA = 0.044715f;

}  // namespace detail

inline Tensor silu(const Tensor& x) {
  return detail::unary(
      x, "silu", [](Real v) { return v * detail::sigmoid(v); },
      [](Real v) {
        const Real s = detail::sigmoid(v);
        return s * (1.0f + v * (1.0f - s));
      });
}

// GELU, tanh approximation: 0.5 v (1 + tanh(sqrt(2/pi) (v + 0.044715 v^3))).
// Evaluated with Eigen's vectorised tanh; std::tanh dominated block time.
inline Tensor gelu(const Tensor& x) {
  using detail::kGeluA;
  using detail::kGeluC;
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using ConstArrMap = Eigen::Map<const Arr>;
  const auto n = x.numel();
  Tensor out(x.shape());
  {
    const ConstArrMap v(x.ptr(), n);
    Eigen::Map<Arr>(out.ptr(), n) = Real(0.5) * v * (Real(1) + (kGeluC * (v + kGeluA * v * v * v)).tanh());
  }
  detail::record("gelu", {x}, out, [x, n](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    const ConstArrMap v(x.ptr(), n);
    const Arr t = (kGeluC * (v + kGeluA * v * v * v)).tanh();
    Eigen::Map<Arr>(gx, n) += ConstArrMap(go.data(), n) *
                              (Real(0.5) * (Real(1) + t) +
                               Real(0.5) * v * (Real(1) - t * t) * kGeluC * (Real(1) + Real(3) * kGeluA * v * v));
  });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid", [](Real v) { return detail::sigmoid(v); },
      [](Real v) {
        const Real s = detail::sigmoid(v);
        return s * (1.0f - s);
      });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x, "softplus", [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v) { return detail::sigmoid(v); });
}

inline Tensor scale(const Tensor& x, Real s) {
  return detail::unary(
      x, "scale", [s](Real v) { return v * s; }, [s](Real) { return s; });
}

namespace detail {

struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // element strides per output axis, 0 when broadcast
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.resize(nd);
  p.sa.assign(nd, 0);
  p.sb.assign(nd, 0);
  std::int64_t ka = 1, kb = 1;
  for (std::size_t r = 0; r < nd; ++r) {
    const std::size_t i = nd - 1 - r;
    const std::int64_t da = r < a.size() ? a[a.size() - 1 - r] : 1;
    const std::int64_t db = r < b.size() ? b[b.size() - 1 - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcastable at axis " + std::to_string(i));
    }
    p.out[i] = std::max(da, db);
    p.sa[i] = da == 1 ? 0 : ka;
    p.sb[i] = db == 1 ? 0 : kb;
    ka *= da;
    kb *= db;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t nd = p.out.size();
  std::vector<std::int64_t> idx(nd, 0);
  const std::int64_t total = numel(p.out);
  const std::int64_t inner = p.out[nd - 1];
  const std::int64_t sa_in = p.sa[nd - 1], sb_in = p.sb[nd - 1];
  std::int64_t ai = 0, bi = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(o + j, ai + j * sa_in, bi + j * sb_in);
    for (std::size_t ax = nd - 1; ax-- > 0;) {
      ++idx[ax];
      ai += p.sa[ax];
      bi += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      ai -= p.sa[ax] * p.out[ax];
      bi -= p.sb[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  using namespace detail;
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const auto n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    record("add", {a, b}, out, [a, b, n](std::span<const Real> go) {
      if (Real* ga = grad_buffer(a)) {
        for (std::int64_t i = 0; i < n; ++i) ga[i] += go[static_cast<std::size_t>(i)];
      }
      if (Real* gb = grad_buffer(b)) {
        for (std::int64_t i = 0; i < n; ++i) gb[i] += go[static_cast<std::size_t>(i)];
      }
    });
    return out;
  }
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), "add"));
  Tensor out(plan->out);
  for_each_broadcast(*plan, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = a[i] + b[j]; });
  record("add", {a, b}, out, [a, b, plan](std::span<const Real> go) {
    Real* ga = grad_buffer(a);
    Real* gb = grad_buffer(b);
    for_each_broadcast(*plan, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
      const Real g = go[static_cast<std::size_t>(o)];
      if (ga) ga[i] += g;
      if (gb) gb[j] += g;
    });
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  using namespace detail;
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const auto n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    record("mul", {a, b}, out, [a, b, n](std::span<const Real> go) {
      if (Real* ga = grad_buffer(a)) {
        for (std::int64_t i = 0; i < n; ++i) ga[i] += go[static_cast<std::size_t>(i)] * b[i];
      }
      if (Real* gb = grad_buffer(b)) {
        for (std::int64_t i = 0; i < n; ++i) gb[i] += go[static_cast<std::size_t>(i)] * a[i];
      }
    });
    return out;
  }
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), "mul"));
  Tensor out(plan->out);
  for_each_broadcast(*plan, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = a[i] * b[j]; });
  record("mul", {a, b}, out, [a, b, plan](std::span<const Real> go) {
    Real* ga = grad_buffer(a);
    Real* gb = grad_buffer(b);
    for_each_broadcast(*plan, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
      const Real g = go[static_cast<std::size_t>(o)];
      if (ga) ga[i] += g * b[j];
      if (gb) gb[j] += g * a[i];
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  detail::record("reshape", {x}, out, [x](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return out;
}

inline Tensor flatten_hw(const Tensor& x) {
  detail::require(x.ndim() == 4, "flatten_hw: input must be [N,C,H,W], got " + to_string(x.shape()));
  return reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
}

inline Tensor unflatten_hw(const Tensor& x, std::int64_t H, std::int64_t W) {
  detail::require(x.ndim() == 3 && x.dim(2) == H * W,
                  "unflatten_hw: cannot map " + to_string(x.shape()) + " to spatial " + std::to_string(H) + "x" +
                      std::to_string(W));
  return reshape(x, {x.dim(0), x.dim(1), H, W});
}

inline Tensor upsample_nearest2x(const Tensor& x) {
  detail::require(x.ndim() == 4, "upsample_nearest2x: input must be [N,C,H,W], got " + to_string(x.shape()));
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (std::int64_t p = 0; p < NC; ++p) {
    const Real* in = x.ptr() + p * H * W;
    Real* o = out.ptr() + p * 4 * H * W;
    for (std::int64_t y = 0; y < 2 * H; ++y) {
      for (std::int64_t xx = 0; xx < 2 * W; ++xx) o[y * 2 * W + xx] = in[(y / 2) * W + xx / 2];
    }
  }
  detail::record("upsample_nearest2x", {x}, out, [x, NC, H, W](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    for (std::int64_t p = 0; p < NC; ++p) {
      const Real* g = go.data() + p * 4 * H * W;
      Real* d = gx + p * H * W;
      for (std::int64_t y = 0; y < 2 * H; ++y) {
        for (std::int64_t xx = 0; xx < 2 * W; ++xx) d[(y / 2) * W + xx / 2] += g[y * 2 * W + xx];
      }
    }
  });
  return out;
}

// Concatenates along axis 1; all other axes must agree.
inline Tensor concat_channels(const std::vector<Tensor>& xs) {
  detail::require(!xs.empty(), "concat_channels: no inputs");
  const Tensor& f = xs.front();
  detail::require(f.ndim() >= 2, "concat_channels: inputs need [N,C,...]");
  const std::int64_t N = f.dim(0), S = detail::spatial_size(f);
  std::int64_t C = 0;
  for (const auto& t : xs) {
    detail::require(t.ndim() == f.ndim() && t.dim(0) == N, "concat_channels: axis 0 mismatch " +
                                                                to_string(t.shape()) + " vs " + to_string(f.shape()));
    for (int a = 2; a < f.ndim(); ++a) {
      detail::require(t.dim(a) == f.dim(a), "concat_channels: axis " + std::to_string(a) + " mismatch " +
                                                to_string(t.shape()) + " vs " + to_string(f.shape()));
    }
    C += t.dim(1);
  }
  Shape os = f.shape();
  os[1] = C;
  Tensor out(os);
  std::int64_t off = 0;
  for (const auto& t : xs) {
    const std::int64_t Ct = t.dim(1);
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(t.ptr() + n * Ct * S, Ct * S, out.ptr() + (n * C + off) * S);
    }
    off += Ct;
  }
  detail::record("concat_channels", xs, out, [xs, N, C, S](std::span<const Real> go) {
    std::int64_t off = 0;
    for (const auto& t : xs) {
      const std::int64_t Ct = t.dim(1);
      if (Real* g = detail::grad_buffer(t)) {
        for (std::int64_t n = 0; n < N; ++n) {
          const Real* src = go.data() + (n * C + off) * S;
          Real* dst = g + n * Ct * S;
          for (std::int64_t i = 0; i < Ct * S; ++i) dst[i] += src[i];
        }
      }
      off += Ct;
    }
  });
  return out;
}

// The (row_phase, col_phase) stride-2 sub-grid: out[.., i, j] = x[.., 2i+row_phase, 2j+col_phase].
inline Tensor space_phase(const Tensor& x, int row_phase, int col_phase) {
  detail::require(x.ndim() == 4, "space_phase: input must be [N,C,H,W], got " + to_string(x.shape()));
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(H % 2 == 0, "space_phase: axis H (" + std::to_string(H) + ") must be even");
  detail::require(W % 2 == 0, "space_phase: axis W (" + std::to_string(W) + ") must be even");
  const std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor out({x.dim(0), x.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < NC; ++p) {
    for (std::int64_t i = 0; i < Ho; ++i) {
      for (std::int64_t j = 0; j < Wo; ++j) {
        out[(p * Ho + i) * Wo + j] = x[(p * H + 2 * i + row_phase) * W + 2 * j + col_phase];
      }
    }
  }
  detail::record("space_phase", {x}, out, [x, NC, H, W, Ho, Wo, row_phase, col_phase](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    for (std::int64_t p = 0; p < NC; ++p) {
      for (std::int64_t i = 0; i < Ho; ++i) {
        for (std::int64_t j = 0; j < Wo; ++j) {
          gx[(p * H + 2 * i + row_phase) * W + 2 * j + col_phase] += go[static_cast<std::size_t>((p * Ho + i) * Wo + j)];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (Real v : x.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<Real>(s));
  detail::record("sum", {x}, out, [x](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    const Real g = go[0];
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
  return out;
}

// Sum of x_i * weights_i with constant weights (f64 accumulation).
inline Tensor weighted_sum(const Tensor& x, std::vector<Real> weights) {
  detail::require(static_cast<std::int64_t>(weights.size()) == x.numel(),
                  "weighted_sum: weight count must equal element count");
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += static_cast<double>(x[i]) * weights[static_cast<std::size_t>(i)];
  Tensor out = Tensor::scalar(static_cast<Real>(s));
  auto w = std::make_shared<std::vector<Real>>(std::move(weights));
  detail::record("weighted_sum", {x}, out, [x, w](std::span<const Real> go) {
    Real* gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < w->size(); ++i) gx[i] += go[0] * (*w)[i];
  });
  return out;
}

}  // namespace mnx
