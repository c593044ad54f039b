#include <catch_amalgamated.hpp>

#include <algorithm>

#include "mnx/metrics.hpp"
#include "mnx/rng.hpp"

using namespace mnx;

namespace {

// 101-point interpolation from its definition: at each recall level r the
// best precision among PR points with recall >= r, zero when none.
double ap101_oracle(const std::vector<std::pair<double, double>>& pr) {
  double total = 0.0;
  for (int s = 0; s <= 100; ++s) {
    double best = 0.0;
    for (const auto& [r, p] : pr) {
      if (r >= s / 100.0 - 1e-12) best = std::max(best, p);
    }
    total += best;
  }
  return total / 101.0;
}

}  // namespace

TEST_CASE("hand PR case: TP@0.9, FP@0.8, TP@0.7 over two ground truths") {
  const std::vector<GroundTruthBox> gts = {{0, 0, {0, 0, 10, 10}}, {0, 0, {20, 20, 30, 30}}};
  const std::vector<Detection> dets = {{0, 0, 0.9f, {0, 0, 10, 10}},
                                       {0, 0, 0.8f, {50, 50, 60, 60}},
                                       {0, 0, 0.7f, {20, 20, 30, 30}}};
  const double expected = ap101_oracle({{0.5, 1.0}, {0.5, 0.5}, {1.0, 2.0 / 3.0}});
  CHECK(expected == Catch::Approx(0.834983).margin(1e-6));
  CHECK(average_precision(dets, gts, 0, 0.5) == Catch::Approx(expected).margin(1e-12));
  CHECK(std::abs(evaluate_map(dets, gts).ap50 - expected) < 1e-3);
}

TEST_CASE("perfect detector scores exactly 1, no detections score 0") {
  const std::vector<GroundTruthBox> gts = {{0, 0, {0, 0, 10, 10}}, {0, 1, {5, 5, 40, 30}}, {1, 1, {1, 2, 3, 4}}};
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back({g.image_id, g.class_id, 1.0f, g.box});
  const auto r = evaluate_map(dets, gts);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap50_95 == 1.0);
  CHECK(evaluate_map({}, gts).ap50 == 0.0);
  CHECK_THROWS_AS(evaluate_map(dets, {}), MetricError);
}

TEST_CASE("a detection never matches a ground truth on another image") {
  const std::vector<GroundTruthBox> gts = {{0, 0, {0, 0, 10, 10}}};
  CHECK(evaluate_map({{1, 0, 1.0f, {0, 0, 10, 10}}}, gts).ap50 == 0.0);
}

TEST_CASE("AP property: bounded, order-free for distinct scores, matches the oracle") {
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<GroundTruthBox> gts;
    const int ng = 1 + static_cast<int>(rng.below(6));
    for (int k = 0; k < ng; ++k) {
      const float x = static_cast<float>(40 * k);
      gts.push_back({0, 0, {x, 0, x + 20, 20}});
    }
    std::vector<Detection> dets;
    const int nd = static_cast<int>(rng.below(10));
    std::vector<int> ranks(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) ranks[static_cast<std::size_t>(i)] = i;
    rng.shuffle(ranks);
    for (int i = 0; i < nd; ++i) {
      const float x = static_cast<float>(40 * rng.below(static_cast<std::uint64_t>(ng + 2)));
      const float jitter = static_cast<float>(rng.uniform(0, 4));
      dets.push_back({0, 0, 0.05f + 0.09f * static_cast<float>(ranks[static_cast<std::size_t>(i)]), {x + jitter, 0, x + 20 + jitter, 20}});
    }
    const double ap = average_precision(dets, gts, 0, 0.5);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
    auto shuffled = dets;
    rng.shuffle(shuffled);
    CHECK(average_precision(shuffled, gts, 0, 0.5) == ap);

    // oracle: greedy matching in score order, then the 101-point rule
    auto sorted = dets;
    std::sort(sorted.begin(), sorted.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(gts.size(), false);
    std::vector<std::pair<double, double>> pr;
    int tp = 0, seen = 0;
    for (const auto& d : sorted) {
      ++seen;
      int hit = -1;
      double best = 0.0;
      for (std::size_t k = 0; k < gts.size(); ++k) {
        const double o = iou(d.box, gts[k].box);
        if (!used[k] && o >= 0.5 && o > best) {
          best = o;
          hit = static_cast<int>(k);
        }
      }
      if (hit >= 0) {
        used[static_cast<std::size_t>(hit)] = true;
        ++tp;
      }
      pr.emplace_back(static_cast<double>(tp) / ng, static_cast<double>(tp) / seen);
    }
    CHECK(ap == Catch::Approx(ap101_oracle(pr)).margin(1e-12));
  }
}

TEST_CASE("AP50:95 averages ten thresholds") {
  const auto t = coco_iou_thresholds();
  REQUIRE(t.size() == 10);
  CHECK(t.front() == 0.5);
  CHECK(t.back() == Catch::Approx(0.95));
  // IoU ~0.62 is a hit at 0.50, 0.55 and 0.60 only
  const std::vector<GroundTruthBox> gts = {{0, 0, {0, 0, 10, 10}}};
  const std::vector<Detection> dets = {{0, 0, 1.0f, {0, 0, 10, 6.2f}}};
  const auto r = evaluate_map(dets, gts);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap50_95 == Catch::Approx(0.3).margin(1e-12));
}
