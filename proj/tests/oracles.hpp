// Loop-level reference implementations used only by the tests. Written for
// obviousness, not speed; everything accumulates in double.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mnx/tensor.hpp"

namespace oracle {

using mnx::Tensor;

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, int groups) {
  const auto N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  const auto cout_g = Cout / groups;
  (void)Cin;
  Tensor y({N, Cout, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b[co] : 0.0;
          const auto g = co / cout_g;
          for (std::int64_t ci = 0; ci < Cg; ++ci)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                const auto c = g * Cg + ci;
                acc += static_cast<double>(x[((n * x.dim(1) + c) * H + iy) * W + ix]) *
                       w[((co * Cg + ci) * kh + ky) * kw + kx];
              }
          y[((n * Cout + co) * Ho + oy) * Wo + ox] = static_cast<float>(acc);
        }
  return y;
}

struct ChannelStats {
  std::vector<double> mean, var;  // biased variance
};

// Two passes: mean first, then squared deviations.
inline ChannelStats channel_stats(const Tensor& x) {
  const auto N = x.dim(0), C = x.dim(1);
  const auto S = x.numel() / (N * C);
  ChannelStats st{std::vector<double>(static_cast<std::size_t>(C)), std::vector<double>(static_cast<std::size_t>(C))};
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < S; ++i) s += x[(n * C + c) * S + i];
    const double m = s / static_cast<double>(N * S);
    double q = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < S; ++i) {
        const double d = x[(n * C + c) * S + i] - m;
        q += d * d;
      }
    st.mean[static_cast<std::size_t>(c)] = m;
    st.var[static_cast<std::size_t>(c)] = q / static_cast<double>(N * S);
  }
  return st;
}

inline Tensor max_pool2d(const Tensor& x, int k, int stride, int pad) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor y({N, C, Ho, Wo});
  for (std::int64_t p = 0; p < N * C; ++p)
    for (std::int64_t oy = 0; oy < Ho; ++oy)
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        float m = -INFINITY;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) m = std::max(m, x[(p * H + iy) * W + ix]);
          }
        y[(p * Ho + oy) * Wo + ox] = m;
      }
  return y;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}


// Per-position channel mixing: y[n,o,i] = b[o] + sum_c w[o,c] x[n,c,i].
inline Tensor pointwise(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto N = x.dim(0), C = x.dim(1), O = w.dim(0);
  const auto S = x.numel() / (N * C);
  mnx::Shape shape = x.shape();
  shape[1] = O;
  Tensor y(shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t i = 0; i < S; ++i) {
        double acc = b.defined() ? b[o] : 0.0;
        for (std::int64_t c = 0; c < C; ++c) acc += static_cast<double>(w[o * C + c]) * x[(n * C + c) * S + i];
        y[(n * O + o) * S + i] = static_cast<float>(acc);
      }
  return y;
}

// Normalization across channels at each (n, position), two-pass.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto N = x.dim(0), C = x.dim(1);
  const auto S = x.numel() / (N * C);
  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < S; ++i) {
      double m = 0.0;
      for (std::int64_t c = 0; c < C; ++c) m += x[(n * C + c) * S + i];
      m /= static_cast<double>(C);
      double v = 0.0;
      for (std::int64_t c = 0; c < C; ++c) v += (x[(n * C + c) * S + i] - m) * (x[(n * C + c) * S + i] - m);
      v /= static_cast<double>(C);
      for (std::int64_t c = 0; c < C; ++c) {
        y[(n * C + c) * S + i] = static_cast<float>((x[(n * C + c) * S + i] - m) / std::sqrt(v + eps) * gamma[c] + beta[c]);
      }
    }
  return y;
}

template <class F>
inline Tensor map(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = static_cast<float>(f(static_cast<double>(x[i])));
  return y;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793) * (v + 0.044715 * v * v * v)));
}

template <class F>
inline Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor y(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = static_cast<float>(f(static_cast<double>(a[i]), static_cast<double>(b[i])));
  return y;
}

// max |a - b| / max(1, |b|)
inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]) / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  }
  return m;
}

}  // namespace oracle
