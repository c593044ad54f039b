// Entry point to the gradient suite compiled in double precision
// (tools/gradient_suite_f64.cpp). Plain types only, so float-build code can
// call it without seeing the f64 namespace.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mnx::grad_report {

struct Row {
  std::string op;
  std::string shape;
  std::string worst;  // input[index] with the largest error
  double max_rel = 0.0;
  std::int64_t checked = 0;
  double ms = 0.0;
  bool passed(double tol) const { return checked > 0 && max_rel <= tol; }
};

std::vector<Row> run_f64(std::uint64_t seed);

}  // namespace mnx::grad_report
