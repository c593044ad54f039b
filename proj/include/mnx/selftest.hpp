// Built-in consistency checks behind `mnx selftest` and the acceptance run.
// The gradient suite lives in a double-precision translation unit and is
// reached through grad_report::run_f64.
#pragma once

#include <chrono>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

#include "mnx/model.hpp"
#include "mnx/testing/grad_report.hpp"
#include "mnx/testing/nms_oracle.hpp"
#include "mnx/testing/scan_oracle.hpp"

namespace mnx::inline MNX_ABI {

struct SuiteResult {
  std::string name;
  std::int64_t cases = 0;
  std::int64_t failed = 0;
  double seconds = 0.0;
  std::string first_failure;

  bool ok() const { return cases > 0 && failed == 0; }
  void fail(const std::string& why) {
    if (failed++ == 0) first_failure = why;
  }
};

struct SelftestOptions {
  std::uint64_t seed = 1;
  int scan_cases = 100;
  int nms_cases = 1000;
  double scan_tol = 1e-5;
  double grad_tol = 1e-3;
  bool full_model_shapes = true;  // 640 px forward of the default model (~30 s, ~2 GB)
  bool inject_scan_fault = false;
};

namespace selftest {

inline SuiteResult timed(const std::string& name, const std::function<void(SuiteResult&)>& body) {
  SuiteResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.fail(std::string("exception: ") + e.what());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline SuiteResult scan_oracle(const SelftestOptions& o) {
  return timed("scan-oracle", [&](SuiteResult& r) {
    Rng rng(o.seed);
    std::optional<ssm::ScanFaultInjection> fault;
    if (o.inject_scan_fault) fault.emplace();
    for (int i = 0; i < o.scan_cases; ++i) {
      const auto c = testing::random_scan_case(rng);
      ++r.cases;
      if (!(c.max_rel <= o.scan_tol)) {
        r.fail("L=" + std::to_string(c.L) + " Dinner=" + std::to_string(c.dinner) + " d_state=" +
               std::to_string(c.d_state) + " chunk=" + std::to_string(c.chunk) + " rel=" + std::to_string(c.max_rel));
      }
    }
  });
}

inline SuiteResult gradients(const SelftestOptions& o) {
  return timed("fd-gradient", [&](SuiteResult& r) {
    for (const auto& row : grad_report::run_f64(o.seed)) {
      ++r.cases;
      if (!row.passed(o.grad_tol)) r.fail(row.op + " " + row.shape + " rel=" + std::to_string(row.max_rel) + " at " + row.worst);
    }
  });
}

inline SuiteResult nms_oracle(const SelftestOptions& o) {
  return timed("nms-oracle", [&](SuiteResult& r) {
    Rng rng(o.seed + 7);
    for (int i = 0; i < o.nms_cases; ++i) {
      const auto dets = testing::random_detections(rng, 1 + static_cast<int>(rng.below(80)), 1 + static_cast<int>(rng.below(4)));
      const float thr = static_cast<float>(rng.uniform(0.1, 0.9));
      const bool aware = rng.below(4) != 0;
      ++r.cases;
      if (!testing::same_detections(nms(dets, thr, aware), testing::nms_brute_force(dets, thr, aware))) {
        r.fail("case " + std::to_string(i) + ": " + std::to_string(dets.size()) + " boxes, iou " + std::to_string(thr));
      }
    }
  });
}

inline ModelConfig small_config(BlockMode mode) {
  ModelConfig c;
  c.input_size = 64;
  c.width_mult = 0.125;
  c.d_state = 4;
  c.num_classes = 3;
  c.block_mode = mode;
  return c;
}

inline SuiteResult shapes(const SelftestOptions& o) {
  return timed("shape", [&](SuiteResult& r) {
    NoGradScope no_grad;
    auto expect = [&](bool ok, const std::string& what) {
      ++r.cases;
      if (!ok) r.fail(what);
    };
    if (o.full_model_shapes) {
      ModelConfig cfg;
      Model m = build_model(cfg);
      const auto out = m.forward(Tensor::zeros({1, 3, cfg.input_size, cfg.input_size}), false);
      const auto& p = out.pyramid;
      expect(p.p3.dim(2) == 80 && p.p3.dim(3) == 80, "P3 is " + to_string(p.p3.shape()) + ", want 80x80");
      expect(p.p4.dim(2) == 40 && p.p4.dim(3) == 40, "P4 is " + to_string(p.p4.shape()) + ", want 40x40");
      expect(p.p5.dim(2) == 20 && p.p5.dim(3) == 20, "P5 is " + to_string(p.p5.shape()) + ", want 20x20");
    }
    Rng rng(o.seed + 11);
    for (const auto [c, h, w] : {std::array<std::int64_t, 3>{4, 8, 8}, {6, 16, 10}, {16, 32, 32}}) {
      const auto vcm = VisionClueMerge::make(rng, c);
      const Tensor y = vision_clue_merge(Tensor::zeros({2, c, h, w}), vcm);
      expect(y.shape() == Shape{2, 2 * c, h / 2, w / 2},
             "VCM " + to_string(Shape{2, c, h, w}) + " -> " + to_string(y.shape()));
    }
    for (BlockMode mode : {BlockMode::kResGateFirst, BlockMode::kConvNeXtFirst, BlockMode::kConvNeXtOnly,
                           BlockMode::kResGateOnly}) {
      for (const auto [c, h, w] : {std::array<std::int64_t, 3>{8, 8, 8}, {12, 6, 10}}) {
        BlockConfig bc;
        bc.channels = c;
        bc.d_state = 4;
        bc.mode = mode;
        auto block = MambaNeXtBlock::make(rng, bc);
        const Shape in{2, c, h, w};
        const Tensor y = block(Tensor::zeros(in), false);
        expect(y.shape() == in, std::string(to_string(mode)) + " maps " + to_string(in) + " to " + to_string(y.shape()));
      }
    }
  });
}

// Normalization parameters or statistics are recognised by name
// (bn / norm / ln / gamma / beta / running_*) and by the VCM's exact
// parameter budget: four C->C pointwise convs plus the 4C->out merge.
inline SuiteResult vcm_audit(const SelftestOptions&) {
  return timed("vcm-audit", [&](SuiteResult& r) {
    static const std::regex norm_like(R"((^|\.)(bn|norm|ln|gamma|beta|running_mean|running_var)(\.|$))");
    for (BlockMode mode : {BlockMode::kResGateFirst, BlockMode::kConvNeXtOnly}) {
      ModelConfig cfg = small_config(mode);
      Model m = build_model(cfg);
      const auto w = cfg.widths();
      std::int64_t vcm_params = 0;
      m.visit([&](const std::string& name, Tensor& t, bool) {
        if (name.rfind("backbone.vcm", 0) != 0) return;
        ++r.cases;
        vcm_params += t.numel();
        if (std::regex_search(name, norm_like)) r.fail("normalization tensor under VCM: " + name);
      });
      std::int64_t expected = 0;
      for (std::size_t s = 0; s < 3; ++s) expected += 4 * (w[s] * w[s] + w[s]) + (4 * w[s] * w[s + 1] + w[s + 1]);
      ++r.cases;
      if (vcm_params != expected) {
        r.fail("VCM parameter count " + std::to_string(vcm_params) + " != conv-only budget " + std::to_string(expected));
      }
    }
  });
}

}  // namespace selftest

inline std::vector<SuiteResult> run_selftest(const SelftestOptions& o = {}) {
  return {selftest::scan_oracle(o), selftest::gradients(o), selftest::nms_oracle(o), selftest::shapes(o),
          selftest::vcm_audit(o)};
}

inline bool print_selftest(const std::vector<SuiteResult>& rs, std::ostream& os) {
  bool ok = true;
  for (const auto& r : rs) {
    ok = ok && r.ok();
    os << (r.ok() ? "PASS " : "FAIL ") << r.name << ": " << r.cases - r.failed << "/" << r.cases << " cases ("
       << std::fixed << std::setprecision(2) << r.seconds << " s)";
    if (!r.first_failure.empty()) os << "  first failure: " << r.first_failure;
    os << "\n";
  }
  return ok;
}

}  // namespace mnx
