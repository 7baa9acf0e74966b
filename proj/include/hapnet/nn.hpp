#pragma once

// Parameterized building blocks shared by every model component.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "hapnet/autograd.hpp"
#include "hapnet/rng.hpp"

namespace hapnet::nn {

using ag::Tensor;

// Ordered name -> parameter registry. Entries alias the module's tensors, so
// optimizer writes are visible to the model.
class ParamSet {
 public:
  void add(std::string name, const Tensor& t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  const Tensor* find(const std::string& name) const;
  std::size_t size() const { return items_.size(); }
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

Tensor param_zeros(ag::Shape shape);
Tensor param_full(ag::Shape shape, double value);
Tensor param_normal(ag::Shape shape, double stddev, Rng& rng);
Tensor param_uniform(ag::Shape shape, double limit, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ag::linear(x, weight, bias); }
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return ag::layer_norm(x, gamma, beta); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

// Dense convolution on HWC maps.
struct Conv2d {
  Tensor weight;  // [k, k, in, out]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng,
         bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct DepthwiseConv2d {
  Tensor weight;  // [k, k, C]
  Tensor bias;
  std::size_t pad = 0;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(std::size_t channels, std::size_t kernel, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ag::depthwise_conv2d(x, weight, bias, pad); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct ConvTranspose2x2 {
  Tensor weight;  // [2, 2, in, out]
  Tensor bias;

  ConvTranspose2x2() = default;
  ConvTranspose2x2(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return ag::conv_transpose2x2(x, weight, bias); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

// Two affine maps with GELU between; the caller adds the residual.
struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}
  Tensor operator()(const Tensor& x) const { return fc2(ag::gelu(fc1(x))); }
  void collect(ParamSet& ps, const std::string& prefix) const {
    fc1.collect(ps, join(prefix, "fc1"));
    fc2.collect(ps, join(prefix, "fc2"));
  }
};

// Reshapes an HWC map to a token matrix [H*W, C] and back.
Tensor to_tokens(const Tensor& map);
Tensor to_map(const Tensor& tokens, std::size_t rows, std::size_t cols);

}  // namespace hapnet::nn
