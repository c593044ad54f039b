#include <catch_amalgamated.hpp>

#include "mnx/ops.hpp"
#include "mnx/rng.hpp"
#include "mnx/tensor.hpp"
#include "oracles.hpp"

using namespace mnx;

TEST_CASE("tensor construction checks shape against data") {
  Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({-1}), DimensionError);
}

TEST_CASE("backward of sum(w*x) gives x") {
  Tensor w({4}, {1, 2, 3, 4});
  Tensor x({4}, {0.5f, -1, 2, 7});
  w.set_requires_grad();
  Tape tape;
  {
    TapeScope s(tape);
    tape.backward(sum(mul(w, x)));
  }
  REQUIRE(w.has_grad());
  for (int i = 0; i < 4; ++i) CHECK(w.grad()[i] == x[i]);
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("silu gradient at zero is one half") {
  Tensor x({1}, {0.0f});
  x.set_requires_grad();
  Tape tape;
  TapeScope s(tape);
  tape.backward(sum(silu(x)));
  CHECK(x.grad()[0] == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("backward rejects non-scalar loss, foreign loss and reuse") {
  Tensor x({3}, {1, 2, 3});
  x.set_requires_grad();
  Tape tape;
  TapeScope s(tape);
  Tensor y = silu(x);
  CHECK_THROWS_AS(tape.backward(y), TapeError);
  Tensor unrelated = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(tape.backward(unrelated), TapeError);
  Tensor loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);
}

TEST_CASE("non-leaf grads are freed and unreached leaves get zeros") {
  Tensor a({2}, {1, 2}), b({2}, {3, 4});
  a.set_requires_grad();
  b.set_requires_grad();
  Tape tape;
  TapeScope s(tape);
  Tensor mid = silu(a);
  Tensor side = silu(b);  // recorded but not part of the loss
  (void)side;
  Tensor loss = sum(mid);
  tape.backward(loss);
  CHECK_FALSE(mid.has_grad());
  REQUIRE(b.has_grad());
  CHECK(b.grad()[0] == 0.0f);
  CHECK(b.grad()[1] == 0.0f);
}

TEST_CASE("a leaf used twice accumulates both paths") {
  Tensor x({1}, {3.0f});
  x.set_requires_grad();
  Tape tape;
  TapeScope s(tape);
  tape.backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 6.0f);
}

TEST_CASE("no recording under NoGradScope") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  TapeScope s(tape);
  {
    NoGradScope ng;
    Tensor y = silu(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("two identical forward/backward passes give bit-identical grads") {
  auto run = [] {
    Rng rng(5);
    Tensor x({2, 3, 6, 6});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor w({4, 3, 3, 3});
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-1, 1));
    w.set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    tape.backward(sum(gelu(conv2d(x, w, {}, {1, 1, 1}))));
    return Tensor(w.shape(), std::vector<float>(w.grad().begin(), w.grad().end()));
  };
  CHECK(oracle::bitwise_equal(run(), run()));
}
