#include <catch_amalgamated.hpp>

#include <cmath>

#include "mnx/ops.hpp"
#include "mnx/rng.hpp"
#include "mnx/testing/gradcheck.hpp"
#include "oracles.hpp"

using namespace mnx;
using mnx::testing::random_tensor;

TEST_CASE("conv2d box filter counts neighbours") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor y = conv2d(x, w, {}, {1, 1, 1});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y[4] == 9.0f);
  CHECK(y[0] == 4.0f);
  CHECK(y[1] == 6.0f);
}

TEST_CASE("grouped conv2d output shape") {
  Tensor x = Tensor::full({1, 2, 4, 4}, 1.0f);
  Tensor w = Tensor::full({2, 1, 3, 3}, 1.0f);
  Tensor y = conv2d(x, w, {}, {1, 0, 2});
  CHECK(y.shape() == Shape{1, 2, 2, 2});
  CHECK(y[0] == 9.0f);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(7);
  Tensor x = random_tensor({1, 3, 5, 5}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  CHECK(oracle::max_abs_diff(conv2d(x, w), oracle::conv2d(x, w, {}, 1, 0, 1)) < 1e-6);

  struct Case {
    Shape x, w;
    int stride, pad, groups;
  };
  const Case cases[] = {
      {{2, 4, 7, 6}, {6, 2, 3, 3}, 2, 1, 2},  // grouped, strided
      {{1, 5, 9, 9}, {5, 1, 7, 7}, 1, 3, 5},  // depthwise fast path
      {{1, 6, 8, 8}, {6, 1, 3, 3}, 2, 1, 6},  // strided depthwise
      {{2, 8, 4, 4}, {3, 8, 1, 1}, 1, 0, 1},  // pointwise fast path
      {{1, 3, 6, 6}, {4, 3, 3, 3}, 2, 1, 1},  // stem-like
  };
  for (const auto& c : cases) {
    Tensor xi = random_tensor(c.x, rng), wi = random_tensor(c.w, rng), bi = random_tensor({c.w[0]}, rng);
    Tensor got = conv2d(xi, wi, bi, {c.stride, c.pad, c.groups});
    Tensor ref = oracle::conv2d(xi, wi, bi, c.stride, c.pad, c.groups);
    REQUIRE(got.shape() == ref.shape());
    CHECK(oracle::max_abs_diff(got, ref) < 1e-5);
  }
}

TEST_CASE("conv2d shape errors name the offending axis") {
  Tensor x({1, 3, 5, 5});
  Tensor w({4, 2, 3, 3});
  try {
    conv2d(x, w);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("Cin") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(Tensor({1, 4, 5, 5}), Tensor({4, 4, 3, 3}), {}, {1, 0, 3}), DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3})), DimensionError);
}

TEST_CASE("batch_norm training normalizes per channel") {
  Rng rng(3);
  Tensor x({4, 2, 8, 8});
  for (auto& v : x.data()) v = static_cast<float>(5.0 + 2.0 * rng.normal());
  Tensor g = Tensor::full({2}, 1.0f), b = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
  Tensor y = batch_norm(x, g, b, rm, rv, true);
  auto st = oracle::channel_stats(y);
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(st.mean[c]) < 1e-4);
    CHECK(std::abs(st.var[c] - 1.0) < 1e-4);
  }
  // momentum 0.03 toward the batch statistics, unbiased variance
  auto sx = oracle::channel_stats(x);
  const double m = 4 * 8 * 8;
  CHECK(rm[0] == Catch::Approx(0.03 * sx.mean[0]).epsilon(1e-5));
  CHECK(rv[0] == Catch::Approx(0.97 + 0.03 * sx.var[0] * m / (m - 1)).epsilon(1e-5));
}

TEST_CASE("batch_norm matches two-pass statistics and eval uses running stats") {
  Rng rng(9);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, -2, 3);
  Tensor g = random_tensor({3}, rng), b = random_tensor({3}, rng);
  Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0f);
  Tensor y = batch_norm(x, g, b, rm, rv, true);
  auto st = oracle::channel_stats(x);
  double err = 0.0;
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 16; ++i) {
        const auto k = (n * 3 + c) * 16 + i;
        const double ref = (x[k] - st.mean[c]) / std::sqrt(st.var[c] + 1e-5) * g[c] + b[c];
        err = std::max(err, std::abs(ref - y[k]));
      }
  CHECK(err < 1e-5);

  Tensor rm2({3}, {1, 2, 3}), rv2({3}, {4, 1, 0.25f});
  Tensor ye = batch_norm(x, Tensor::full({3}, 1.0f), Tensor::zeros({3}), rm2, rv2, false);
  CHECK(ye[16] == Catch::Approx((x[16] - 2.0) / std::sqrt(1.0 + 1e-5)).epsilon(1e-6));
  CHECK(rm2[1] == 2.0f);  // eval leaves running stats alone
}

TEST_CASE("batch_norm with zero gamma outputs beta") {
  Rng rng(1);
  Tensor x = random_tensor({2, 2, 3, 3}, rng);
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
  Tensor y = batch_norm(x, Tensor::zeros({2}), Tensor({2}, {0.5f, -1.5f}), rm, rv, true);
  for (std::int64_t i = 0; i < 9; ++i) CHECK(y[i] == 0.5f);
  for (std::int64_t i = 9; i < 18; ++i) CHECK(y[i] == -1.5f);
  CHECK_THROWS_AS(batch_norm(x, Tensor::zeros({3}), Tensor::zeros({3}), rm, rv, true), DimensionError);
}

TEST_CASE("layer_norm over channels") {
  Tensor x({1, 2, 1, 1}, {1.0f, 2.0f});
  Tensor y = layer_norm(x, Tensor::full({2}, 1.0f), Tensor::zeros({2}));
  const double expect = 0.5 / std::sqrt(0.25 + 1e-6);
  CHECK(y[0] == Catch::Approx(-expect).epsilon(1e-6));
  CHECK(y[1] == Catch::Approx(expect).epsilon(1e-6));

  Tensor c = Tensor::full({1, 3, 2, 2}, 4.0f);
  Tensor beta({3}, {0.1f, 0.2f, 0.3f});
  Tensor yc = layer_norm(c, Tensor::full({3}, 2.0f), beta);
  for (std::int64_t ch = 0; ch < 3; ++ch)
    for (std::int64_t i = 0; i < 4; ++i) CHECK(yc[ch * 4 + i] == beta[ch]);

  Rng rng(2);
  Tensor r = random_tensor({1, 8, 2, 2}, rng, -3, 3);
  Tensor yr = layer_norm(r, Tensor::full({8}, 1.0f), Tensor::zeros({8}));
  for (std::int64_t p = 0; p < 4; ++p) {
    double m = 0.0;
    for (std::int64_t ch = 0; ch < 8; ++ch) m += yr[ch * 4 + p];
    CHECK(std::abs(m / 8) < 1e-6);
  }
  CHECK_THROWS_AS(layer_norm(r, Tensor::full({4}, 1.0f), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("activations at reference points") {
  Tensor z({1}, {0.0f});
  CHECK(silu(z)[0] == 0.0f);
  CHECK(gelu(z)[0] == 0.0f);
  CHECK(silu(Tensor({1}, {1.0f}))[0] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-6));
  const float s = silu(Tensor({1}, {-30.0f}))[0];
  CHECK(std::isfinite(s));
  CHECK(s == Catch::Approx(-30.0 / (1.0 + std::exp(30.0))).epsilon(1e-4));
  CHECK(silu(Tensor({1}, {-200.0f}))[0] == Catch::Approx(0.0).margin(1e-30));
  // tanh-form GELU at 1
  const double t = std::tanh(std::sqrt(2.0 / std::numbers::pi) * (1.0 + 0.044715));
  CHECK(gelu(Tensor({1}, {1.0f}))[0] == Catch::Approx(0.5 * (1.0 + t)).epsilon(1e-6));
  CHECK(softplus(Tensor({1}, {-100.0f}))[0] > 0.0f);
  CHECK(softplus(Tensor({1}, {100.0f}))[0] == 100.0f);
}

TEST_CASE("elementwise add/mul and broadcasting") {
  Tensor a({3}, {1, 2, 3}), b({3}, {4, 5, 6});
  Tensor s = add(a, b);
  CHECK(s[0] == 5.0f);
  CHECK(s[1] == 7.0f);
  CHECK(s[2] == 9.0f);
  Rng rng(4);
  Tensor r = random_tensor({2, 3, 4}, rng);
  CHECK(oracle::bitwise_equal(mul(r, Tensor::full({2, 3, 4}, 1.0f)), r));

  Tensor col = random_tensor({5, 1}, rng), m = random_tensor({5, 7}, rng);
  Tensor p = mul(col, m);
  REQUIRE(p.shape() == Shape{5, 7});
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 7; ++j) CHECK(p[i * 7 + j] == col[i] * m[i * 7 + j]);

  Tensor g = random_tensor({3, 1, 1}, rng), x = random_tensor({2, 3, 2, 2}, rng);
  Tensor q = add(x, g);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 4; ++i) CHECK(q[(n * 3 + c) * 4 + i] == x[(n * 3 + c) * 4 + i] + g[c]);

  CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

TEST_CASE("layout ops") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor u = upsample_nearest2x(x);
  REQUIRE(u.shape() == Shape{1, 1, 4, 4});
  const float expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(u[i] == expect[i]);

  CHECK(concat_channels({Tensor({1, 3, 4, 4}), Tensor({1, 5, 4, 4})}).shape() == Shape{1, 8, 4, 4});
  CHECK_THROWS_AS(concat_channels({Tensor({1, 3, 4, 4}), Tensor({1, 5, 4, 2})}), DimensionError);

  Rng rng(6);
  Tensor r = random_tensor({2, 3, 5, 7}, rng);
  Tensor f = flatten_hw(r);
  CHECK(f.shape() == Shape{2, 3, 35});
  CHECK(oracle::bitwise_equal(unflatten_hw(f, 5, 7), r));
}

TEST_CASE("max_pool2d matches oracle including padding") {
  Rng rng(8);
  Tensor x = random_tensor({2, 3, 9, 9}, rng);
  CHECK(oracle::max_abs_diff(max_pool2d(x, 5, 1, 2), oracle::max_pool2d(x, 5, 1, 2)) == 0.0);
  CHECK(oracle::max_abs_diff(max_pool2d(x, 2, 2, 0), oracle::max_pool2d(x, 2, 2, 0)) == 0.0);
}

TEST_CASE("space_phase picks the stride-2 sub-grid") {
  Tensor x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x[i] = static_cast<float>(i);
  Tensor eo = space_phase(x, 0, 1);
  CHECK(eo.shape() == Shape{1, 1, 2, 2});
  CHECK(eo[0] == 1.0f);
  CHECK(eo[1] == 3.0f);
  CHECK(eo[2] == 9.0f);
  CHECK(eo[3] == 11.0f);
  CHECK_THROWS_AS(space_phase(Tensor({1, 1, 3, 4}), 0, 0), DimensionError);
}

TEST_CASE("linear is x W^T + b") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w({2, 3}, {1, 0, -1, 0.5f, 0.5f, 0.5f});
  Tensor b({2}, {10, 20});
  Tensor y = linear(x, w, b);
  REQUIRE(y.shape() == Shape{2, 2});
  CHECK(y[0] == 8.0f);
  CHECK(y[1] == 23.0f);
  CHECK(y[2] == 8.0f);
  CHECK(y[3] == 27.5f);
}
