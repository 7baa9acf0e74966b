#include "hapnet/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace hapnet::nn {

void ParamSet::add(std::string name, const Tensor& t) {
  if (!t.defined()) return;
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name " + name);
  items_.emplace_back(std::move(name), t);
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

Tensor param_zeros(ag::Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor param_full(ag::Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

Tensor param_normal(ag::Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(ag::shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor param_uniform(ag::Shape shape, double limit, Rng& rng) {
  std::vector<double> v(ag::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight(param_uniform({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng)) {
  if (with_bias) bias = param_zeros({out});
}

void Linear::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(join(prefix, "weight"), weight);
  ps.add(join(prefix, "bias"), bias);
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(param_full({dim}, 1.0)), beta(param_zeros({dim})) {}

void LayerNorm::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(join(prefix, "weight"), gamma);
  ps.add(join(prefix, "bias"), beta);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t pad_, Rng& rng,
               bool with_bias)
    : weight(param_normal({kernel, kernel, in, out}, std::sqrt(2.0 / static_cast<double>(kernel * kernel * in)), rng)),
      stride(stride_),
      pad(pad_) {
  if (with_bias) bias = param_zeros({out});
}

void Conv2d::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(join(prefix, "weight"), weight);
  ps.add(join(prefix, "bias"), bias);
}

DepthwiseConv2d::DepthwiseConv2d(std::size_t channels, std::size_t kernel, Rng& rng, bool with_bias)
    : weight(param_normal({kernel, kernel, channels}, std::sqrt(2.0 / static_cast<double>(kernel * kernel)), rng)),
      pad(kernel / 2) {
  if (with_bias) bias = param_zeros({channels});
}

void DepthwiseConv2d::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(join(prefix, "weight"), weight);
  ps.add(join(prefix, "bias"), bias);
}

ConvTranspose2x2::ConvTranspose2x2(std::size_t in, std::size_t out, Rng& rng)
    : weight(param_normal({2, 2, in, out}, std::sqrt(1.0 / static_cast<double>(in)), rng)),
      bias(param_zeros({out})) {}

void ConvTranspose2x2::collect(ParamSet& ps, const std::string& prefix) const {
  ps.add(join(prefix, "weight"), weight);
  ps.add(join(prefix, "bias"), bias);
}

Tensor to_tokens(const Tensor& map) {
  if (map.rank() != 3) throw ag::ShapeError("to_tokens expects an HWC map, got " + ag::shape_str(map.shape()));
  return ag::reshape(map, {map.dim(0) * map.dim(1), map.dim(2)});
}

Tensor to_map(const Tensor& tokens, std::size_t rows, std::size_t cols) {
  if (tokens.rank() != 2 || tokens.dim(0) != rows * cols) {
    throw ag::ShapeError("to_map: " + ag::shape_str(tokens.shape()) + " is not a " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " grid");
  }
  return ag::reshape(tokens, {rows, cols, tokens.dim(1)});
}

}  // namespace hapnet::nn
