#include <catch_amalgamated.hpp>

#include "mnx/neck.hpp"
#include "mnx/testing/gradcheck.hpp"

using namespace mnx;
using mnx::testing::random_tensor;

namespace {

NeckConfig small_neck(DownsampleMode mode = DownsampleMode::kConv) {
  NeckConfig c;
  c.in3 = 8;
  c.in4 = 12;
  c.in5 = 16;
  c.width3 = 4;
  c.width4 = 6;
  c.width5 = 8;
  c.downsample = mode;
  c.block.d_state = 2;
  return c;
}

}  // namespace

TEST_CASE("downsampling halves the grid in both modes") {
  Rng rng(1);
  auto conv = Downsample::make(rng, 64, DownsampleMode::kConv);
  CHECK(downsample_conv(Tensor::zeros({1, 64, 40, 40}), conv, false).shape() == Shape{1, 64, 20, 20});
  auto pool = Downsample::make(rng, 3, DownsampleMode::kPool);
  const Tensor y = downsample_conv(Tensor::full({1, 3, 8, 6}, -1.25f), pool, false);
  CHECK(y.shape() == Shape{1, 3, 4, 3});
  for (float v : y.data()) CHECK(v == -1.25f);
  int params = 0;
  pool.visit("", [&](const std::string&, Tensor&, bool) { ++params; });
  CHECK(params == 0);
  CHECK(parse_downsample_mode("pool") == DownsampleMode::kPool);
  CHECK_THROWS_AS(parse_downsample_mode("avg"), ConfigError);
}

TEST_CASE("neck output grids follow the 8/16/32 stride layout of a 640 input") {
  Rng rng(2);
  auto neck = MafpnNeck::make(rng, small_neck());
  NoGradScope ng;
  const auto p = neck_forward(Tensor::zeros({1, 8, 80, 80}), Tensor::zeros({1, 12, 40, 40}),
                              Tensor::zeros({1, 16, 20, 20}), neck, false);
  CHECK(p.p3.shape() == Shape{1, 4, 80, 80});
  CHECK(p.p4.shape() == Shape{1, 6, 40, 40});
  CHECK(p.p5.shape() == Shape{1, 8, 20, 20});
  for (const Tensor* t : {&p.p3, &p.p4, &p.p5}) {
    for (float v : t->data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("neck rejects inconsistent pyramids") {
  Rng rng(3);
  auto neck = MafpnNeck::make(rng, small_neck());
  CHECK_THROWS_AS(neck_forward(Tensor::zeros({1, 8, 16, 16}), Tensor::zeros({1, 12, 8, 8}),
                               Tensor::zeros({1, 16, 3, 4}), neck, false),
                  DimensionError);
  CHECK_THROWS_AS(neck_forward(Tensor::zeros({1, 9, 16, 16}), Tensor::zeros({1, 12, 8, 8}),
                               Tensor::zeros({1, 16, 4, 4}), neck, false),
                  DimensionError);
}

TEST_CASE("a loss on P5 alone reaches all three backbone taps") {
  for (DownsampleMode mode : {DownsampleMode::kConv, DownsampleMode::kPool}) {
    Rng rng(4);
    auto neck = MafpnNeck::make(rng, small_neck(mode));
    Tensor c3 = random_tensor({1, 8, 16, 16}, rng), c4 = random_tensor({1, 12, 8, 8}, rng),
           c5 = random_tensor({1, 16, 4, 4}, rng);
    for (Tensor* t : {&c3, &c4, &c5}) t->set_requires_grad();
    Tape tape;
    {
      TapeScope s(tape);
      const auto p = neck_forward(c3, c4, c5, neck, true);
      tape.backward(sum(p.p5));
    }
    for (const Tensor* t : {&c3, &c4, &c5}) {
      double g = 0.0;
      for (float v : t->grad()) g += std::abs(v);
      CHECK(g > 0.0);
    }
  }
}

TEST_CASE("without the bottom-up path P5 is blind to C3") {
  Rng rng(5);
  NeckConfig cfg = small_neck();
  cfg.bottom_up = false;
  auto neck = MafpnNeck::make(rng, cfg);
  Tensor c3 = random_tensor({1, 8, 16, 16}, rng), c4 = random_tensor({1, 12, 8, 8}, rng),
         c5 = random_tensor({1, 16, 4, 4}, rng);
  c3.set_requires_grad();
  c5.set_requires_grad();
  Tape tape;
  {
    TapeScope s(tape);
    tape.backward(sum(neck_forward(c3, c4, c5, neck, true).p5));
  }
  for (float v : c3.grad()) CHECK(v == 0.0f);
  double g5 = 0.0;
  for (float v : c5.grad()) g5 += std::abs(v);
  CHECK(g5 > 0.0);
}
