// Randomised comparison of the chunked scan against the sequential f64
// reference.
#pragma once

#include <algorithm>
#include <cmath>

#include "mnx/ssm.hpp"

namespace mnx::inline MNX_ABI::testing {

struct ScanCaseResult {
  std::int64_t L = 0, dinner = 0, d_state = 0;
  int chunk = 0;
  double max_rel = 0.0;
};

// Elementwise |x - r| / max(|r|, 1).
inline double scan_rel_error(const Tensor& x, const Tensor& ref) {
  double m = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double r = ref[i];
    m = std::max(m, std::abs(static_cast<double>(x[i]) - r) / std::max(std::abs(r), 1.0));
  }
  return m;
}

// L in [1, 256], d_state in {8, 16, 32}, Dinner in [1, 8], chunk in [1, 96].
// B in [-0.2, 0.2] and delta in [0, 1.5] keep the gains around (0, 1.2].
inline ScanCaseResult random_scan_case(Rng& rng) {
  static constexpr std::int64_t kStates[3] = {8, 16, 32};
  ScanCaseResult r;
  r.L = 1 + static_cast<std::int64_t>(rng.below(256));
  r.d_state = kStates[rng.below(3)];
  r.dinner = 1 + static_cast<std::int64_t>(rng.below(8));
  r.chunk = 1 + static_cast<int>(rng.below(96));
  auto fill = [&](Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(lo, hi));
    return t;
  };
  ssm::ScanParams p{fill({r.L, r.dinner, r.d_state}, -1, 1), fill({r.L, r.dinner, r.d_state}, -0.2, 0.2),
                    fill({r.L, r.dinner}, 0.0, 1.5), fill({r.dinner, r.d_state}, -1, 1)};
  NoGradScope no_grad;
  r.max_rel = scan_rel_error(ssm::selective_scan(p, r.chunk), ssm::selective_scan_reference(p));
  return r;
}

}  // namespace mnx::testing
