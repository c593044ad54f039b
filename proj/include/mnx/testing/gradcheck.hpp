// Central finite-difference check of tape gradients.
//
// The scalar probe is L = sum_i w_i * f(x)_i with fixed random weights w,
// accumulated in double. Each checked input element is moved by +-h and
// +-2h and the derivative taken from the fourth-order central stencil
//
//     (-L(x+2h) + 8 L(x+h) - 8 L(x-h) + L(x-2h)) / 12h
//
// The plain two-point quotient carries an O(h^2) truncation term that on
// the scan's stiffer inputs is already near the 1e-3 tolerance; the stencil
// pushes it to O(h^4). Run against a double build so rounding stays far
// below the tolerance as well.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mnx/ops.hpp"
#include "mnx/rng.hpp"
#include "mnx/tensor.hpp"

namespace mnx::inline MNX_ABI::testing {

struct GradCheckOptions {
  double h = 1e-3;
  // Gradients smaller than this are compared on an absolute scale.
  double floor = 1e-2;
  // Elements probed per input; 0 checks every element.
  std::int64_t max_per_input = 0;
};

struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;  // "name[index]: analytic vs numeric"
  std::int64_t checked = 0;

  bool passed(double tol) const { return max_rel < tol; }
};

using NamedInput = std::pair<std::string, Tensor>;

inline double probe(const Tensor& out, const std::vector<Real>& w) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < out.numel(); ++i) acc += static_cast<double>(w[static_cast<std::size_t>(i)]) * out[i];
  return acc;
}

inline GradCheckResult gradcheck(std::vector<NamedInput> inputs, const std::function<Tensor()>& f, Rng& rng,
                                 GradCheckOptions opt = {}) {
  std::vector<Real> w;
  {
    NoGradScope ng;
    Tensor out0 = f();
    w.resize(static_cast<std::size_t>(out0.numel()));
    for (auto& v : w) v = static_cast<Real>(rng.uniform(-1.0, 1.0));
  }

  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = weighted_sum(f(), w);
    tape.backward(loss);
  }

  GradCheckResult r;
  NoGradScope ng;
  for (auto& [name, t] : inputs) {
    std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0f);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t.numel()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
    if (opt.max_per_input > 0 && t.numel() > opt.max_per_input) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(opt.max_per_input));
    }
    for (std::int64_t i : idx) {
      const Real v = t[i];
      auto at = [&](double k) {
        t[i] = static_cast<Real>(v + k * opt.h);
        return probe(f(), w);
      };
      const double numeric = (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * opt.h);
      t[i] = v;
      const double a = analytic[static_cast<std::size_t>(i)];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++r.checked;
      if (rel > r.max_rel || !std::isfinite(rel)) {
        r.max_rel = std::isfinite(rel) ? rel : INFINITY;
        r.worst = name + "[" + std::to_string(i) + "]: analytic " + std::to_string(a) + " vs numeric " +
                  std::to_string(numeric);
      }
    }
    t.set_requires_grad(false);
    t.drop_grad();
  }
  return r;
}

// Uniform fill in [lo, hi].
inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

}  // namespace mnx::testing
