#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "hapnet/config.hpp"
#include "hapnet/nn.hpp"

namespace hapnet {

using ag::Tensor;

// Normalized (x, y) reference point of a query, pixel centers at (i+0.5)/n.
using RefPoint = std::array<double, 2>;

// Keys/values plus the spatial grid of every level (needed by the
// deformable kind; the standard kind only reads the tokens).
struct KeyValueSet {
  Tensor tokens;  // [sum of level sizes, D]
  std::vector<ag::LevelShape> levels;
};

std::vector<RefPoint> grid_centers(std::size_t rows, std::size_t cols);

// Exact softmax attention with learned q/k/v/out projections.
struct MultiHeadAttention {
  nn::Linear q, k, v, out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& query, const Tensor& key, const Tensor& value) const;
  Tensor operator()(const Tensor& query, const Tensor& kv) const { return (*this)(query, kv, kv); }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

// Multi-scale deformable attention: each query reads `points` bilinear
// samples per level per head around its reference point.
struct DeformableAttention {
  nn::Linear value_proj, offsets, weights, out;
  std::size_t heads = 1;
  std::size_t levels = 1;
  std::size_t points = 1;

  DeformableAttention() = default;
  DeformableAttention(std::size_t dim, std::size_t heads, std::size_t levels, std::size_t points, Rng& rng);
  Tensor operator()(const Tensor& query, const std::vector<RefPoint>& refs, const KeyValueSet& kv) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

struct CrossAttention {
  AttentionKind kind = AttentionKind::kStandard;
  MultiHeadAttention standard;
  DeformableAttention deformable;

  CrossAttention() = default;
  CrossAttention(AttentionKind kind, std::size_t dim, std::size_t heads, std::size_t levels, std::size_t points,
                 Rng& rng);
  Tensor operator()(const Tensor& query, const std::vector<RefPoint>& refs, const KeyValueSet& kv) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

}  // namespace hapnet
