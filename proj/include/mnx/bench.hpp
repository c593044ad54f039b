// Batch-1 eval-mode latency. Numbers are machine-specific.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "mnx/model.hpp"

namespace mnx::inline MNX_ABI {

struct BenchStats {
  std::string config;
  int input = 0;
  int iterations = 0;
  double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0, fps = 0.0;
};

// Nearest-rank percentile of a sorted sample.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline BenchStats summarize_latencies(std::vector<double> ms, std::string config, int input) {
  BenchStats s;
  s.config = std::move(config);
  s.input = input;
  s.iterations = static_cast<int>(ms.size());
  if (ms.empty()) return s;
  std::sort(ms.begin(), ms.end());
  double total = 0.0;
  for (double v : ms) total += v;
  s.mean_ms = total / static_cast<double>(ms.size());
  const std::size_t n = ms.size();
  s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  s.p95_ms = percentile(ms, 0.95);
  s.fps = 1000.0 / s.mean_ms;
  return s;
}

inline BenchStats bench(Model& model, const std::string& config_name, int n_warmup = 20, int n_iter = 100) {
  NoGradScope no_grad;
  const int size = model.cfg.input_size;
  Rng rng(model.cfg.seed + 1);
  Tensor image({1, 3, size, size});
  for (auto& v : image.data()) v = static_cast<Real>(rng.uniform());
  for (int i = 0; i < n_warmup; ++i) model.forward(image, false);
  std::vector<double> ms;
  for (int i = 0; i < n_iter; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(image, false);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return summarize_latencies(std::move(ms), config_name, size);
}

inline const char* kBenchCsvHeader = "config,input,mean_ms,p95_ms,fps";

inline std::string bench_csv_row(const BenchStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%d,%.3f,%.3f,%.3f", s.config.c_str(), s.input, s.mean_ms, s.p95_ms, s.fps);
  return buf;
}

inline std::string hardware_note() {
  return "note: single-threaded CPU timings on this machine (" + std::to_string(std::thread::hardware_concurrency()) +
         " hardware threads visible); absolute numbers are machine-specific";
}

}  // namespace mnx
