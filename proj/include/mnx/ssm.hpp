// Input-conditioned state recurrence used by the global branch of the block.
//
// For every token t the hidden state advances as
//
//     h_{t+1} = exp(-delta_t) * h_t + a_t + b_t * h_t        (elementwise)
//
// with a_t, b_t of shape [Dinner, d_state] and delta_t of shape [Dinner]
// broadcast across d_state. There is no input term and no output matrix
// beyond the learned d_state contraction in contract_state().
//
// selective_scan_reference() evaluates the recurrence exactly as written in
// f64 and is the oracle. selective_scan() rewrites it in affine form
// h_{t+1} = g_t h_t + a_t with g_t = exp(-delta_t) + b_t and evaluates it by
// composing per-chunk affine maps, (g, a) o (g', a') = (g g', g a' + a).
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mnx/ops.hpp"
#include "mnx/rng.hpp"
#include "mnx/tensor.hpp"

namespace mnx::inline MNX_ABI::ssm {

inline constexpr double kDeltaClamp = 20.0;
inline constexpr int kDefaultChunk = 64;

// A_seq, B_seq: [L, Dinner, d_state]; Delta_seq: [L, Dinner]; h_init: [Dinner, d_state].
struct ScanParams {
  Tensor a_seq;
  Tensor b_seq;
  Tensor delta_seq;
  Tensor h_init;

  std::int64_t length() const { return a_seq.dim(0); }
  std::int64_t dinner() const { return a_seq.dim(1); }
  std::int64_t d_state() const { return a_seq.dim(2); }
};

// Projections Dinner -> Dinner*d_state (A, B) and Dinner -> Dinner (delta),
// plus the length-d_state contraction applied to the hidden states.
struct ScanWeights {
  Tensor w_a, b_a;
  Tensor w_b, b_b;
  Tensor w_delta, b_delta;
  Tensor c_out;

  std::int64_t dinner() const { return w_delta.dim(0); }
  std::int64_t d_state() const { return c_out.numel(); }

  static ScanWeights zeros(std::int64_t dinner, std::int64_t d_state) {
    const std::int64_t ds = dinner * d_state;
    return ScanWeights{Tensor::zeros({ds, dinner}), Tensor::zeros({ds}),     Tensor::zeros({ds, dinner}),
                       Tensor::zeros({ds}),          Tensor::zeros({dinner, dinner}), Tensor::zeros({dinner}),
                       Tensor::full({d_state}, 1.0f / static_cast<Real>(d_state))};
  }

  // A projection gets the fan-in Kaiming bound; B and delta weights start
  // small. b_delta targets the network's softplus(delta) parametrisation:
  // per-channel decays exp(-softplus(b_delta)) log-spaced over [0.5, 0.98].
  static ScanWeights init(std::int64_t dinner, std::int64_t d_state, Rng& rng) {
    ScanWeights w = zeros(dinner, d_state);
    const double bound = std::sqrt(6.0 / static_cast<double>(dinner));
    const double small = 0.1 / std::sqrt(static_cast<double>(dinner));
    for (auto& v : w.w_a.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
    for (auto& v : w.w_b.data()) v = static_cast<Real>(rng.uniform(-small, small));
    for (auto& v : w.w_delta.data()) v = static_cast<Real>(rng.uniform(-small, small));
    for (std::int64_t d = 0; d < dinner; ++d) {
      const double f = dinner > 1 ? static_cast<double>(d) / static_cast<double>(dinner - 1) : 0.5;
      const double decay = std::exp(std::log(0.5) + f * (std::log(0.98) - std::log(0.5)));
      w.b_delta[d] = static_cast<Real>(std::log(1.0 / decay - 1.0));
    }
    return w;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w_a", w_a, false);
    f(prefix + "b_a", b_a, false);
    f(prefix + "w_b", w_b, false);
    f(prefix + "b_b", b_b, false);
    f(prefix + "w_delta", w_delta, false);
    f(prefix + "b_delta", b_delta, false);
    f(prefix + "c_out", c_out, false);
  }
};

namespace detail {

inline double decay(double delta) { return std::exp(-std::clamp(delta, -kDeltaClamp, kDeltaClamp)); }

// d/d(delta) of decay(delta); zero where the clamp is active.
inline double decay_grad(double delta) {
  return (delta > -kDeltaClamp && delta < kDeltaClamp) ? -std::exp(-delta) : 0.0;
}

inline bool& inject_fault_flag() {
  thread_local bool flag = false;
  return flag;
}

inline void warn_if_expanding([[maybe_unused]] std::int64_t expanding, [[maybe_unused]] std::int64_t L) {
#ifndef NDEBUG
  static std::atomic<bool> warned{false};
  if (L >= 8 && expanding * 2 > L && !warned.exchange(true)) {
    std::cerr << "mnx::ssm: |g_t| > 1.05 on most steps of a lane; the recurrence is expanding\n";
  }
#endif
}

// Chunked affine scan over token-major [L, Dinner, d_state] data. All
// Dinner*d_state lanes advance together so each step reads contiguous rows;
// per lane this is: compose g_t = exp(-delta_t) + B_t over each chunk into
// (G, acc), chain the chunk carries, then replay every chunk from its carry.
inline void scan_token_major(const Real* a, const Real* b, const Real* delta, const Real* h0, std::int64_t L,
                             std::int64_t D, std::int64_t S, int chunk, Real* h) {
  const std::int64_t W = D * S, n_chunks = (L + chunk - 1) / chunk;
  const auto w = static_cast<std::size_t>(W);
  std::vector<double> carry(static_cast<std::size_t>(n_chunks + 1) * w, 0.0), G(w), acc(w), e(static_cast<std::size_t>(D));
  std::vector<std::int64_t> expanding(w, 0);
  if (h0) {
    for (std::size_t i = 0; i < w; ++i) carry[i] = h0[i];
  }
  auto decays = [&](std::int64_t t) {
    for (std::int64_t d = 0; d < D; ++d) e[static_cast<std::size_t>(d)] = decay(delta[t * D + d]);
  };
  for (std::int64_t k = 0; k < n_chunks; ++k) {
    std::fill(G.begin(), G.end(), 1.0);
    std::fill(acc.begin(), acc.end(), 0.0);
    const std::int64_t end = std::min(L, (k + 1) * chunk);
    for (std::int64_t t = k * chunk; t < end; ++t) {
      decays(t);
      const Real* at = a + t * W;
      const Real* bt = b + t * W;
      for (std::size_t i = 0; i < w; ++i) {
        const double g = e[i / static_cast<std::size_t>(S)] + static_cast<double>(bt[i]);
        G[i] = g * G[i];
        acc[i] = g * acc[i] + static_cast<double>(at[i]);
        if (std::abs(g) > 1.05) ++expanding[i];
      }
    }
    const double* prev = carry.data() + static_cast<std::size_t>(k) * w;
    double* next = carry.data() + static_cast<std::size_t>(k + 1) * w;
    for (std::size_t i = 0; i < w; ++i) next[i] = G[i] * prev[i] + acc[i];
  }
  for (std::int64_t x : expanding) warn_if_expanding(x, L);
  const bool fault = inject_fault_flag();
  std::vector<double>& state = G;
  for (std::int64_t k = 0; k < n_chunks; ++k) {
    std::copy_n(carry.data() + static_cast<std::size_t>(k) * w, w, state.begin());
    const std::int64_t end = std::min(L, (k + 1) * chunk);
    for (std::int64_t t = k * chunk; t < end; ++t) {
      decays(t);
      const Real* at = a + t * W;
      const Real* bt = b + t * W;
      Real* ht = h + t * W;
      bool finite = true;
      for (std::size_t i = 0; i < w; ++i) {
        const double g = e[i / static_cast<std::size_t>(S)] + static_cast<double>(bt[i]);
        state[i] = g * state[i] + static_cast<double>(at[i]);
        finite = finite && std::isfinite(state[i]);
        ht[i] = static_cast<Real>(state[i]);
      }
      if (!finite) throw NumericError("selective_scan: non-finite hidden state at step t=" + std::to_string(t));
      if (fault && t == L - 1) {
        for (std::size_t i = 0; i < w; ++i) ht[i] = static_cast<Real>(state[i] * 1.01 + 1e-3);
      }
    }
  }
}

// Reverse pass of one lane. go/h share stride s_h; grads may be null.
inline double scan_lane_backward(const Real* b, const Real* delta, std::int64_t s_ab, std::int64_t s_d,
                                 std::int64_t L, double h0, const Real* h, const Real* go, std::int64_t s_h,
                                 Real* ga, Real* gb, double* gdelta) {
  double lambda = 0.0;
  for (std::int64_t t = L - 1; t >= 0; --t) {
    lambda += static_cast<double>(go[t * s_h]);
    if (ga) ga[t * s_ab] += static_cast<Real>(lambda);
    const double prev = t > 0 ? static_cast<double>(h[(t - 1) * s_h]) : h0;
    const double gg = lambda * prev;
    if (gb) gb[t * s_ab] += static_cast<Real>(gg);
    const double dv = delta[t * s_d];
    if (gdelta) gdelta[t] += gg * decay_grad(dv);
    lambda *= decay(dv) + static_cast<double>(b[t * s_ab]);
  }
  return lambda;
}

inline void require_scan_shapes(const ScanParams& p) {
  using mnx::detail::require;
  require(p.a_seq.defined() && p.b_seq.defined() && p.delta_seq.defined(), "scan: parameters not set");
  require(p.a_seq.ndim() == 3, "scan: A_seq must be [L,Dinner,d_state], got " + to_string(p.a_seq.shape()));
  require(p.b_seq.shape() == p.a_seq.shape(),
          "scan: B_seq " + to_string(p.b_seq.shape()) + " must match A_seq " + to_string(p.a_seq.shape()));
  require(p.delta_seq.ndim() == 2 && p.delta_seq.dim(0) == p.a_seq.dim(0) && p.delta_seq.dim(1) == p.a_seq.dim(1),
          "scan: Delta_seq " + to_string(p.delta_seq.shape()) + " must be [L,Dinner] for A_seq " +
              to_string(p.a_seq.shape()));
  if (p.h_init.defined()) {
    require(p.h_init.ndim() == 2 && p.h_init.dim(0) == p.a_seq.dim(1) && p.h_init.dim(1) == p.a_seq.dim(2),
            "scan: h_init " + to_string(p.h_init.shape()) + " must be [Dinner,d_state]");
  }
}

}  // namespace detail

// Test hook: perturbs the optimized scan's last output so oracle checks fail.
class ScanFaultInjection {
 public:
  ScanFaultInjection() { detail::inject_fault_flag() = true; }
  ~ScanFaultInjection() { detail::inject_fault_flag() = false; }
  ScanFaultInjection(const ScanFaultInjection&) = delete;
  ScanFaultInjection& operator=(const ScanFaultInjection&) = delete;
};

// A_t = W_A x_t + b_A, B_t = W_B x_t + b_B, delta_t = W_delta x_t + b_delta
// for x_seq [L, Dinner]; h_init is zero.
inline ScanParams project_params(const Tensor& x_seq, const ScanWeights& w) {
  using mnx::detail::require;
  require(x_seq.ndim() == 2, "project_params: x_seq must be [L,Dinner], got " + to_string(x_seq.shape()));
  const std::int64_t L = x_seq.dim(0), D = w.dinner(), S = w.d_state();
  require(x_seq.dim(1) == D, "project_params: x_seq axis 1 (" + std::to_string(x_seq.dim(1)) +
                                 ") must equal Dinner (" + std::to_string(D) + ")");
  require(w.w_a.dim(0) == D * S && w.w_b.dim(0) == D * S,
          "project_params: W_A/W_B must map Dinner to Dinner*d_state");
  for (Real v : x_seq.data()) {
    if (!std::isfinite(v)) throw NumericError("project_params: non-finite token");
  }
  ScanParams p;
  p.a_seq = reshape(linear(x_seq, w.w_a, w.b_a), {L, D, S});
  p.b_seq = reshape(linear(x_seq, w.w_b, w.b_b), {L, D, S});
  p.delta_seq = linear(x_seq, w.w_delta, w.b_delta);
  p.h_init = Tensor::zeros({D, S});
  return p;
}

// Literal sequential evaluation in f64; output row t is h_{t+1}.
inline Tensor selective_scan_reference(const ScanParams& p) {
  detail::require_scan_shapes(p);
  const std::int64_t L = p.length(), D = p.dinner(), S = p.d_state();
  std::vector<double> h(static_cast<std::size_t>(D * S), 0.0);
  if (p.h_init.defined()) {
    for (std::int64_t i = 0; i < D * S; ++i) h[static_cast<std::size_t>(i)] = p.h_init[i];
  }
  Tensor out({L, D, S});
  for (std::int64_t t = 0; t < L; ++t) {
    for (std::int64_t d = 0; d < D; ++d) {
      const double e = std::exp(-std::clamp(static_cast<double>(p.delta_seq[t * D + d]), -kDeltaClamp, kDeltaClamp));
      for (std::int64_t s = 0; s < S; ++s) {
        const std::int64_t i = d * S + s;
        double& hv = h[static_cast<std::size_t>(i)];
        hv = e * hv + static_cast<double>(p.a_seq[t * D * S + i]) + static_cast<double>(p.b_seq[t * D * S + i]) * hv;
        if (!std::isfinite(hv)) {
          throw NumericError("selective_scan_reference: non-finite hidden state at step t=" + std::to_string(t));
        }
        out[t * D * S + i] = static_cast<Real>(hv);
      }
    }
  }
  return out;
}

// Chunked affine-composition evaluation; differentiable in A, B, delta and h_init.
inline Tensor selective_scan(const ScanParams& p, int chunk = kDefaultChunk) {
  detail::require_scan_shapes(p);
  mnx::detail::require(chunk >= 1, "selective_scan: chunk must be >= 1");
  const std::int64_t L = p.length(), D = p.dinner(), S = p.d_state();
  Tensor out({L, D, S});
  detail::scan_token_major(p.a_seq.ptr(), p.b_seq.ptr(), p.delta_seq.ptr(), p.h_init.defined() ? p.h_init.ptr() : nullptr,
                           L, D, S, chunk, out.ptr());
  flop_tally() += static_cast<std::uint64_t>(6 * L * D * S);
  mnx::detail::record("selective_scan", {p.a_seq, p.b_seq, p.delta_seq, p.h_init}, out,
                      [p, out, L, D, S](std::span<const Real> go) {
                        Real* ga = mnx::detail::grad_buffer(p.a_seq);
                        Real* gb = mnx::detail::grad_buffer(p.b_seq);
                        Real* gd = mnx::detail::grad_buffer(p.delta_seq);
                        Real* gh0 = mnx::detail::grad_buffer(p.h_init);
                        std::vector<double> gdelta(static_cast<std::size_t>(L));
                        for (std::int64_t d = 0; d < D; ++d) {
                          std::fill(gdelta.begin(), gdelta.end(), 0.0);
                          for (std::int64_t s = 0; s < S; ++s) {
                            const std::int64_t i = d * S + s;
                            const double h0 = p.h_init.defined() ? p.h_init[i] : 0.0;
                            const double lam = detail::scan_lane_backward(
                                p.b_seq.ptr() + i, p.delta_seq.ptr() + d, D * S, D, L, h0, out.ptr() + i,
                                go.data() + i, D * S, ga ? ga + i : nullptr, gb ? gb + i : nullptr,
                                gd ? gdelta.data() : nullptr);
                            if (gh0) gh0[i] += static_cast<Real>(lam);
                          }
                          if (gd) {
                            for (std::int64_t t = 0; t < L; ++t) gd[t * D + d] += static_cast<Real>(gdelta[static_cast<std::size_t>(t)]);
                          }
                        }
                      });
  return out;
}

// y_t[d] = sum_s c[s] h_t[d, s] for h_seq [L, Dinner, d_state].
inline Tensor contract_state(const Tensor& h_seq, const Tensor& c) {
  using mnx::detail::require;
  require(h_seq.ndim() == 3, "contract_state: h_seq must be [L,Dinner,d_state], got " + to_string(h_seq.shape()));
  const std::int64_t L = h_seq.dim(0), D = h_seq.dim(1), S = h_seq.dim(2);
  require(c.numel() == S, "contract_state: contraction length " + std::to_string(c.numel()) +
                              " must equal d_state " + std::to_string(S));
  Tensor out({L, D});
  for (std::int64_t r = 0; r < L * D; ++r) {
    double acc = 0.0;
    for (std::int64_t s = 0; s < S; ++s) acc += static_cast<double>(c[s]) * h_seq[r * S + s];
    out[r] = static_cast<Real>(acc);
  }
  mnx::detail::record("contract_state", {h_seq, c}, out, [h_seq, c, L, D, S](std::span<const Real> go) {
    Real* gh = mnx::detail::grad_buffer(h_seq);
    Real* gc = mnx::detail::grad_buffer(c);
    std::vector<double> acc(static_cast<std::size_t>(S), 0.0);
    for (std::int64_t r = 0; r < L * D; ++r) {
      const Real g = go[static_cast<std::size_t>(r)];
      for (std::int64_t s = 0; s < S; ++s) {
        if (gh) gh[r * S + s] += g * c[s];
        acc[static_cast<std::size_t>(s)] += static_cast<double>(g) * h_seq[r * S + s];
      }
    }
    if (gc) {
      for (std::int64_t s = 0; s < S; ++s) gc[s] += static_cast<Real>(acc[static_cast<std::size_t>(s)]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Channel-major variants used inside the network, where tokens of one lane
// are contiguous: A, B [N, Dinner*d_state, L], delta [N, Dinner, L], h_1 = 0.

namespace detail {

// The d_state lanes of one channel share delta, so its decays are computed
// once and the lanes advance together (independent chains, better ILP).
// Per lane the arithmetic is exactly that of scan_token_major().
struct LaneGroupWork {
  std::vector<double> dec, dgrad, carry, G, acc, state, lambda, gdelta;
};

inline void scan_group(const Real* a, const Real* b, const Real* delta, std::int64_t S, std::int64_t L, int chunk,
                       Real* h, LaneGroupWork& w) {
  const std::int64_t n_chunks = (L + chunk - 1) / chunk;
  const auto su = static_cast<std::size_t>(S);
  w.dec.resize(static_cast<std::size_t>(L));
  for (std::int64_t t = 0; t < L; ++t) w.dec[static_cast<std::size_t>(t)] = decay(delta[t]);
  w.carry.assign(static_cast<std::size_t>(n_chunks + 1) * su, 0.0);
  w.G.resize(su);
  w.acc.resize(su);
  w.state.resize(su);
  std::int64_t expanding = 0;
  for (std::int64_t k = 0; k < n_chunks; ++k) {
    std::fill(w.G.begin(), w.G.end(), 1.0);
    std::fill(w.acc.begin(), w.acc.end(), 0.0);
    const std::int64_t end = std::min(L, (k + 1) * chunk);
    for (std::int64_t t = k * chunk; t < end; ++t) {
      const double dt = w.dec[static_cast<std::size_t>(t)];
      for (std::size_t s = 0; s < su; ++s) {
        const std::int64_t o = static_cast<std::int64_t>(s) * L + t;
        const double g = dt + static_cast<double>(b[o]);
        w.G[s] = g * w.G[s];
        w.acc[s] = g * w.acc[s] + static_cast<double>(a[o]);
        expanding += std::abs(g) > 1.05;
      }
    }
    const double* prev = w.carry.data() + static_cast<std::size_t>(k) * su;
    double* next = w.carry.data() + static_cast<std::size_t>(k + 1) * su;
    for (std::size_t s = 0; s < su; ++s) next[s] = w.G[s] * prev[s] + w.acc[s];
  }
  warn_if_expanding(expanding / S, L);
  const bool fault = inject_fault_flag();
  for (std::int64_t k = 0; k < n_chunks; ++k) {
    std::copy_n(w.carry.data() + static_cast<std::size_t>(k) * su, su, w.state.data());
    const std::int64_t end = std::min(L, (k + 1) * chunk);
    for (std::int64_t t = k * chunk; t < end; ++t) {
      const double dt = w.dec[static_cast<std::size_t>(t)];
      bool finite = true;
      for (std::size_t s = 0; s < su; ++s) {
        const std::int64_t o = static_cast<std::int64_t>(s) * L + t;
        const double st = (dt + static_cast<double>(b[o])) * w.state[s] + static_cast<double>(a[o]);
        w.state[s] = st;
        finite &= std::isfinite(st);
        h[o] = static_cast<Real>(fault && t == L - 1 ? st * 1.01 + 1e-3 : st);
      }
      if (!finite) throw NumericError("selective_scan: non-finite hidden state at step t=" + std::to_string(t));
    }
  }
}

// Reverse of scan_group, one lane at a time; gdelta (length L) receives
// the sum over lanes.
inline void scan_group_backward(const Real* b, const Real* delta, std::int64_t S, std::int64_t L, const Real* h,
                                const Real* go, Real* ga, Real* gb, double* gdelta, LaneGroupWork& w) {
  w.dec.resize(static_cast<std::size_t>(L));
  w.gdelta.assign(static_cast<std::size_t>(L), 0.0);
  for (std::int64_t t = 0; t < L; ++t) w.dec[static_cast<std::size_t>(t)] = decay(delta[t]);
  for (std::int64_t s = 0; s < S; ++s) {
    const std::int64_t o = s * L;
    double lam = 0.0;
    for (std::int64_t t = L - 1; t >= 0; --t) {
      lam += static_cast<double>(go[o + t]);
      if (ga) ga[o + t] += static_cast<Real>(lam);
      const double gg = t > 0 ? lam * static_cast<double>(h[o + t - 1]) : 0.0;
      if (gb) gb[o + t] += static_cast<Real>(gg);
      w.gdelta[static_cast<std::size_t>(t)] += gg;
      lam *= w.dec[static_cast<std::size_t>(t)] + static_cast<double>(b[o + t]);
    }
  }
  if (gdelta) {
    for (std::int64_t t = 0; t < L; ++t) gdelta[t] += w.gdelta[static_cast<std::size_t>(t)] * decay_grad(delta[t]);
  }
}

}  // namespace detail

inline Tensor scan_lanes(const Tensor& a, const Tensor& b, const Tensor& delta, std::int64_t d_state,
                         int chunk = kDefaultChunk) {
  using mnx::detail::require;
  require(a.ndim() == 3 && b.shape() == a.shape(),
          "scan_lanes: A and B must both be [N,Dinner*d_state,L], got " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  const std::int64_t N = a.dim(0), DS = a.dim(1), L = a.dim(2), S = d_state;
  require(S >= 1 && DS % S == 0, "scan_lanes: axis 1 (" + std::to_string(DS) + ") not divisible by d_state");
  const std::int64_t D = DS / S;
  require(delta.ndim() == 3 && delta.dim(0) == N && delta.dim(1) == D && delta.dim(2) == L,
          "scan_lanes: delta must be [N,Dinner,L] = [" + std::to_string(N) + "," + std::to_string(D) + "," +
              std::to_string(L) + "], got " + to_string(delta.shape()));
  require(chunk >= 1, "scan_lanes: chunk must be >= 1");
  Tensor out(a.shape());
  detail::LaneGroupWork work;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t d = 0; d < D; ++d) {
      const std::int64_t off = (n * DS + d * S) * L;
      detail::scan_group(a.ptr() + off, b.ptr() + off, delta.ptr() + (n * D + d) * L, S, L, chunk, out.ptr() + off,
                         work);
    }
  }
  flop_tally() += static_cast<std::uint64_t>(6 * N * L * DS);
  mnx::detail::record("scan_lanes", {a, b, delta}, out, [a, b, delta, out, N, D, S, L](std::span<const Real> go) {
    Real* ga = mnx::detail::grad_buffer(a);
    Real* gb = mnx::detail::grad_buffer(b);
    Real* gd = mnx::detail::grad_buffer(delta);
    std::vector<double> gdelta(static_cast<std::size_t>(L));
    detail::LaneGroupWork work;
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t d = 0; d < D; ++d) {
        std::fill(gdelta.begin(), gdelta.end(), 0.0);
        const std::int64_t off = (n * D * S + d * S) * L;
        detail::scan_group_backward(b.ptr() + off, delta.ptr() + (n * D + d) * L, S, L, out.ptr() + off,
                                    go.data() + off, ga ? ga + off : nullptr, gb ? gb + off : nullptr,
                                    gd ? gdelta.data() : nullptr, work);
        if (gd) {
          Real* dst = gd + (n * D + d) * L;
          for (std::int64_t t = 0; t < L; ++t) dst[t] += static_cast<Real>(gdelta[static_cast<std::size_t>(t)]);
        }
      }
    }
  });
  return out;
}

// B = tanh(z_b) * sigmoid(z_d) with z_b [N, Dinner*d_state, L] and z_d
// [N, Dinner, L] broadcast over d_state. Paired with delta = softplus(z_d),
// sigmoid(z_d) = 1 - exp(-delta), so g = exp(-delta) + B lies in (-1, 1).
inline Tensor bounded_gain(const Tensor& z_b, const Tensor& z_d, std::int64_t d_state) {
  using mnx::detail::require;
  require(z_b.ndim() == 3 && z_d.ndim() == 3 && d_state >= 1 && z_b.dim(1) == z_d.dim(1) * d_state &&
              z_b.dim(0) == z_d.dim(0) && z_b.dim(2) == z_d.dim(2),
          "bounded_gain: expected z_b [N,Dinner*d_state,L] and z_d [N,Dinner,L], got " + to_string(z_b.shape()) +
              " and " + to_string(z_d.shape()));
  const std::int64_t N = z_d.dim(0), D = z_d.dim(1), L = z_d.dim(2), S = d_state;
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using ArrMap = Eigen::Map<Arr>;
  using ConstArrMap = Eigen::Map<const Arr>;
  // Eigen's vectorised tanh; std::tanh is several times slower here and this
  // runs over every (lane, token).
  Tensor out(z_b.shape());
  Arr sg(L);
  for (std::int64_t nd = 0; nd < N * D; ++nd) {
    sg = ConstArrMap(z_d.ptr() + nd * L, L).unaryExpr([](Real v) { return mnx::detail::sigmoid(v); });
    for (std::int64_t s = 0; s < S; ++s) {
      const std::int64_t off = (nd * S + s) * L;
      ArrMap(out.ptr() + off, L) = ConstArrMap(z_b.ptr() + off, L).tanh() * sg;
    }
  }
  mnx::detail::record("bounded_gain", {z_b, z_d}, out, [z_b, z_d, N, D, S, L](std::span<const Real> go) {
    Real* gzb = mnx::detail::grad_buffer(z_b);
    Real* gzd = mnx::detail::grad_buffer(z_d);
    Arr sg(L), tau(L);
    Eigen::ArrayXd acc(L);
    for (std::int64_t nd = 0; nd < N * D; ++nd) {
      sg = ConstArrMap(z_d.ptr() + nd * L, L).unaryExpr([](Real v) { return mnx::detail::sigmoid(v); });
      acc.setZero();
      for (std::int64_t s = 0; s < S; ++s) {
        const std::int64_t off = (nd * S + s) * L;
        tau = ConstArrMap(z_b.ptr() + off, L).tanh();
        const ConstArrMap g(go.data() + off, L);
        if (gzb) ArrMap(gzb + off, L) += g * (Real(1) - tau * tau) * sg;
        acc += (g * tau).template cast<double>();
      }
      if (gzd) ArrMap(gzd + nd * L, L) += (acc * (sg * (Real(1) - sg)).template cast<double>()).template cast<Real>();
    }
  });
  return out;
}

// y[n, d, l] = sum_s c[s] h[n, d*d_state + s, l].
inline Tensor contract_lanes(const Tensor& h, const Tensor& c) {
  using mnx::detail::require;
  require(h.ndim() == 3, "contract_lanes: h must be [N,Dinner*d_state,L], got " + to_string(h.shape()));
  const std::int64_t N = h.dim(0), DS = h.dim(1), L = h.dim(2), S = c.numel();
  require(DS % S == 0, "contract_lanes: axis 1 (" + std::to_string(DS) + ") not divisible by d_state " +
                           std::to_string(S));
  const std::int64_t D = DS / S;
  Tensor out({N, D, L});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t d = 0; d < D; ++d) {
      Real* o = out.ptr() + (n * D + d) * L;
      for (std::int64_t s = 0; s < S; ++s) {
        const Real cv = c[s];
        const Real* src = h.ptr() + (n * DS + d * S + s) * L;
        for (std::int64_t l = 0; l < L; ++l) o[l] += cv * src[l];
      }
    }
  }
  mnx::detail::record("contract_lanes", {h, c}, out, [h, c, N, D, S, L](std::span<const Real> go) {
    using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
    Real* gh = mnx::detail::grad_buffer(h);
    Real* gc = mnx::detail::grad_buffer(c);
    std::vector<double> acc(static_cast<std::size_t>(S), 0.0);
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t d = 0; d < D; ++d) {
        const Eigen::Map<const Vec> g(go.data() + (n * D + d) * L, L);
        for (std::int64_t s = 0; s < S; ++s) {
          const std::int64_t off = (n * D * S + d * S + s) * L;
          if (gc) acc[static_cast<std::size_t>(s)] += static_cast<double>(g.dot(Eigen::Map<const Vec>(h.ptr() + off, L)));
          if (gh) Eigen::Map<Vec>(gh + off, L) += c[s] * g;
        }
      }
    }
    if (gc) {
      for (std::int64_t s = 0; s < S; ++s) gc[s] += static_cast<Real>(acc[static_cast<std::size_t>(s)]);
    }
  });
  return out;
}

}  // namespace mnx::ssm
