#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "mnx/loss.hpp"
#include "mnx/testing/gradcheck.hpp"
#include "mnx/testing/nms_oracle.hpp"

using namespace mnx;
using mnx::testing::random_tensor;

namespace {

Detection det(int cls, float score, Box b) { return {0, cls, score, b}; }

}  // namespace

TEST_CASE("head output shapes at 640 with 20 classes and the prior score") {
  Rng rng(1);
  Head h = Head::make(rng, {4, 4, 4}, 20);
  NoGradScope ng;
  FeaturePyramid p{random_tensor({1, 4, 80, 80}, rng), random_tensor({1, 4, 40, 40}, rng),
                   random_tensor({1, 4, 20, 20}, rng)};
  const auto out = head_forward(p, h);
  CHECK(out.cls[0].shape() == Shape{1, 20, 80, 80});
  CHECK(out.cls[1].shape() == Shape{1, 20, 40, 40});
  CHECK(out.cls[2].shape() == Shape{1, 20, 20, 20});
  for (const auto& c : out.cls) {
    for (float v : c.data()) CHECK(1.0 / (1.0 + std::exp(-v)) == Catch::Approx(0.01).margin(5e-4));
  }
  for (const auto& r : out.reg) {
    CHECK(r.dim(1) == 4);
    for (float v : r.data()) CHECK(v > 0.0f);
  }
}

TEST_CASE("box decoding: hand case and thresholds") {
  const Box b = clip_box(decode_ltrb(1, 1, 1, 1, 0, 0, 8), 640, 640);
  CHECK(b == Box{0, 0, 12, 12});
  CHECK(decode_ltrb(1, 1, 1, 1, 0, 0, 8) == Box{-4, -4, 12, 12});

  Tensor cls = Tensor::full({1, 2, 2, 2}, 3.0f), reg = Tensor::full({1, 4, 2, 2}, 1.0f);
  CHECK(decode_boxes(cls, reg, 8, 1.0f, 64, 64).empty());
  CHECK(decode_boxes(cls, reg, 8, 0.5f, 64, 64).size() == 8);
  Tensor cold = Tensor::full({1, 2, 2, 2}, -std::numeric_limits<float>::infinity());
  CHECK(decode_boxes(cold, reg, 8, 0.001f, 64, 64).empty());
  CHECK_THROWS_AS(decode_boxes(cls, reg, 8, 0.0f, 64, 64), ConfigError);
}

TEST_CASE("encode and decode are inverse") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const int stride = kStrides[rng.below(3)];
    const std::int64_t ci = static_cast<std::int64_t>(rng.below(10)), cj = static_cast<std::int64_t>(rng.below(10));
    const double cx = (cj + 0.5) * stride, cy = (ci + 0.5) * stride;
    const Box g{static_cast<float>(cx - rng.uniform(1, 50)), static_cast<float>(cy - rng.uniform(1, 50)),
                static_cast<float>(cx + rng.uniform(1, 50)), static_cast<float>(cy + rng.uniform(1, 50))};
    const auto e = encode_ltrb(g, ci, cj, stride);
    const Box d = decode_ltrb(e[0], e[1], e[2], e[3], ci, cj, stride);
    CHECK(std::abs(d.x1 - g.x1) < 1e-4);
    CHECK(std::abs(d.y2 - g.y2) < 1e-4);
  }
}

TEST_CASE("NMS: duplicates, disjoint boxes, classes") {
  const Box b{0, 0, 10, 10};
  auto kept = nms({det(0, 0.8f, b), det(0, 0.9f, b)}, 0.65f);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9f);
  CHECK(nms({det(0, 0.9f, b), det(0, 0.8f, {20, 20, 30, 30}), det(0, 0.7f, {40, 0, 50, 10})}).size() == 3);
  CHECK(nms({det(0, 0.9f, b), det(1, 0.8f, b)}).size() == 2);
  CHECK(nms({det(0, 0.9f, b), det(1, 0.8f, b)}, 0.65f, false).size() == 1);
  CHECK(nms({}).empty());
}

TEST_CASE("NMS equals the brute-force oracle on 200 random boxes") {
  Rng rng(3);
  const auto dets = testing::random_detections(rng, 200, 3);
  CHECK(testing::same_detections(nms(dets, 0.5f), testing::nms_brute_force(dets, 0.5, true)));
}

TEST_CASE("NMS property: survivors never overlap within a class, suppressed boxes are covered") {
  Rng rng(4);
  for (int rep = 0; rep < 300; ++rep) {
    const auto dets = testing::random_detections(rng, 1 + static_cast<int>(rng.below(60)), 2);
    const float thr = static_cast<float>(rng.uniform(0.2, 0.8));
    const auto kept = nms(dets, thr);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id == kept[j].class_id) CHECK(iou(kept[i].box, kept[j].box) <= thr);
      }
    }
    for (const auto& d : dets) {
      bool covered = false;
      for (const auto& k : kept) {
        covered = covered || (k.class_id == d.class_id && k.score >= d.score &&
                              (iou(k.box, d.box) > thr || (k.box == d.box && k.score == d.score)));
      }
      CHECK(covered);
    }
  }
}

TEST_CASE("assigner: scale ranges pick the level") {
  const auto geo = pyramid_geometry(640, 640);
  // 40 px box centred at (100,100): centre-cell extent 20 px = 2.5 stride-8 units
  const auto a = assign_targets({{0, 0, {80, 80, 120, 120}}}, geo);
  auto positives = [&](std::size_t l) { return std::count(a[l].match.begin(), a[l].match.end(), 0); };
  CHECK(positives(0) > 0);
  CHECK(positives(1) == 0);
  CHECK(positives(2) == 0);

  const auto whole = assign_targets({{0, 0, {0, 0, 640, 640}}}, geo);
  CHECK(std::count(whole[2].match.begin(), whole[2].match.end(), 0) > 0);
  CHECK(std::count(whole[0].match.begin(), whole[0].match.end(), 0) == 0);

  const auto none = assign_targets({}, geo);
  for (const auto& l : none) CHECK(std::count(l.match.begin(), l.match.end(), -1) == static_cast<long>(l.match.size()));
}

TEST_CASE("loss: BCE of a zero logit against 1 is ln 2, CIoU of identical boxes is 1") {
  const Tensor b = bce_with_logits_sum(Tensor({1}, {0.0f}), Tensor({1}, {1.0f}));
  CHECK(b.item() == Catch::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(ciou({3, 4, 20, 30}, {3, 4, 20, 30}) == Catch::Approx(1.0).margin(1e-6));
  CHECK(ciou({0, 0, 10, 10}, {20, 20, 30, 30}) < 0.0);
}

TEST_CASE("loss of near-perfect predictions is below 1e-3") {
  const std::int64_t S = 64;
  const std::vector<std::vector<GroundTruthBox>> gts = {{{0, 1, {8, 8, 24, 24}}}};
  const auto targets = build_targets(gts, 2, S, S);
  REQUIRE(!targets.positives.empty());
  HeadOutput pred;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& g = targets.geometry[l];
    pred.cls[l] = Tensor::full({1, 2, g.h, g.w}, -30.0f);
    pred.reg[l] = Tensor::full({1, 4, g.h, g.w}, 1.0f);
    for (std::int64_t i = 0; i < pred.cls[l].numel(); ++i) {
      if (targets.cls[l][i] > 0.5f) pred.cls[l][i] = 30.0f;
    }
  }
  for (const auto& c : targets.positives) {
    const auto e = encode_ltrb(c.gt, c.i, c.j, targets.geometry[static_cast<std::size_t>(c.level)].stride);
    const auto& g = targets.geometry[static_cast<std::size_t>(c.level)];
    for (int k = 0; k < 4; ++k) pred.reg[static_cast<std::size_t>(c.level)][(c.n * 4 + k) * g.h * g.w + c.i * g.w + c.j] = static_cast<float>(e[static_cast<std::size_t>(k)]);
  }
  NoGradScope ng;
  const auto lp = compute_loss(pred, targets);
  CHECK(lp.total.item() < 1e-3);
}
