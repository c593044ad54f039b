// Built with MNX_REAL=double, MNX_ABI=f64 (see CMakeLists.txt).
#include <chrono>

#include "mnx/testing/grad_report.hpp"
#include "mnx/testing/grad_suite.hpp"

static_assert(sizeof(mnx::Real) == sizeof(double), "this file must be compiled with -DMNX_REAL=double");

namespace mnx::grad_report {

std::vector<Row> run_f64(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Row> rows;
  for (const auto& c : testing::gradient_suite()) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = c.run(rng);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({c.op, c.shape, r.worst, r.max_rel, r.checked, ms});
  }
  return rows;
}

}  // namespace mnx::grad_report
