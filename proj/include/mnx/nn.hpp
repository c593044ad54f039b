// Parameterized layers: convolution, normalization, and their usual
// conv-BN-SiLU composition. Each layer exposes visit(prefix, f) which calls
// f(name, tensor, is_buffer) for its tensors in a fixed order; the order
// defines both the weight-file layout and the RNG consumption at init.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "mnx/ops.hpp"
#include "mnx/rng.hpp"
#include "mnx/tensor.hpp"

namespace mnx::inline MNX_ABI::nn {

// Kaiming-uniform with fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

struct Conv {
  Tensor weight;  // [Cout, Cin/groups, k, k]
  Tensor bias;    // [Cout] or undefined
  Conv2dParams params;

  static Conv make(Rng& rng, std::int64_t cin, std::int64_t cout, int k, int stride = 1, int pad = -1,
                   int groups = 1, bool with_bias = true) {
    Conv c;
    c.params = {stride, pad < 0 ? k / 2 : pad, groups};
    c.weight = kaiming_uniform({cout, cin / groups, k, k}, (cin / groups) * k * k, rng);
    if (with_bias) c.bias = Tensor::zeros({cout});
    return c;
  }

  std::int64_t in_channels() const { return weight.dim(1) * params.groups; }
  std::int64_t out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, params); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight, false);
    if (bias.defined()) f(prefix + "bias", bias, false);
  }
};

struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var;

  static BatchNorm make(std::int64_t c) {
    return BatchNorm{Tensor::full({c}, 1.0f), Tensor::zeros({c}), Tensor::zeros({c}), Tensor::full({c}, 1.0f)};
  }

  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma, false);
    f(prefix + "beta", beta, false);
    f(prefix + "running_mean", running_mean, true);
    f(prefix + "running_var", running_var, true);
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  static LayerNorm make(std::int64_t c) { return LayerNorm{Tensor::full({c}, 1.0f), Tensor::zeros({c})}; }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma, false);
    f(prefix + "beta", beta, false);
  }
};

// conv (no bias) -> BN -> SiLU
struct ConvBnAct {
  Conv conv;
  BatchNorm bn;

  static ConvBnAct make(Rng& rng, std::int64_t cin, std::int64_t cout, int k, int stride = 1) {
    return ConvBnAct{Conv::make(rng, cin, cout, k, stride, k / 2, 1, false), BatchNorm::make(cout)};
  }

  Tensor operator()(const Tensor& x, bool training) { return silu(bn(conv(x), training)); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(prefix + "conv.", f);
    bn.visit(prefix + "bn.", f);
  }
};

}  // namespace mnx::nn
