#include "hapnet/attention.hpp"

#include <cmath>
#include <numbers>

namespace hapnet {

std::vector<RefPoint> grid_centers(std::size_t rows, std::size_t cols) {
  std::vector<RefPoint> refs;
  refs.reserve(rows * cols);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      refs.push_back({(static_cast<double>(x) + 0.5) / static_cast<double>(cols),
                      (static_cast<double>(y) + 0.5) / static_cast<double>(rows)});
    }
  }
  return refs;
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t heads_, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), out(dim, dim, rng), heads(heads_) {}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& key, const Tensor& value) const {
  return out(ag::attention(q(query), k(key), v(value), heads));
}

void MultiHeadAttention::collect(nn::ParamSet& ps, const std::string& prefix) const {
  q.collect(ps, nn::join(prefix, "q"));
  k.collect(ps, nn::join(prefix, "k"));
  v.collect(ps, nn::join(prefix, "v"));
  out.collect(ps, nn::join(prefix, "out"));
}

DeformableAttention::DeformableAttention(std::size_t dim, std::size_t heads_, std::size_t levels_,
                                         std::size_t points_, Rng& rng)
    : value_proj(dim, dim, rng),
      offsets(dim, heads_ * levels_ * points_ * 2, rng),
      weights(dim, heads_ * levels_ * points_, rng),
      out(dim, dim, rng),
      heads(heads_),
      levels(levels_),
      points(points_) {
  // Offsets start as a fixed star: head h looks along angle 2*pi*h/heads,
  // point p sits (p+1) level-pixels out. Sample weights start uniform.
  std::fill(offsets.weight.mutable_data().begin(), offsets.weight.mutable_data().end(), 0.0);
  std::fill(weights.weight.mutable_data().begin(), weights.weight.mutable_data().end(), 0.0);
  auto bias = offsets.bias.mutable_data();
  for (std::size_t h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(heads);
    double cx = std::cos(theta), cy = std::sin(theta);
    const double m = std::max(std::abs(cx), std::abs(cy));
    cx /= m;
    cy /= m;
    for (std::size_t l = 0; l < levels; ++l) {
      for (std::size_t p = 0; p < points; ++p) {
        const std::size_t idx = ((h * levels + l) * points + p) * 2;
        bias[idx] = cx * static_cast<double>(p + 1);
        bias[idx + 1] = cy * static_cast<double>(p + 1);
      }
    }
  }
}

Tensor DeformableAttention::operator()(const Tensor& query, const std::vector<RefPoint>& refs,
                                       const KeyValueSet& kv) const {
  if (kv.levels.size() != levels) {
    throw ag::ShapeError("deformable attention: expected grid metadata for " + std::to_string(levels) +
                         " levels, got " + std::to_string(kv.levels.size()));
  }
  const std::size_t tq = query.dim(0);
  if (refs.size() != tq) throw ag::ShapeError("deformable attention: one reference point per query required");
  const std::size_t n = tq * heads * levels * points;
  std::vector<double> ref_v(n * 2), inv_v(n * 2);
  for (std::size_t q = 0; q < tq; ++q) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < levels; ++l) {
        for (std::size_t p = 0; p < points; ++p) {
          const std::size_t idx = (((q * heads + h) * levels + l) * points + p) * 2;
          ref_v[idx] = refs[q][0];
          ref_v[idx + 1] = refs[q][1];
          inv_v[idx] = 1.0 / static_cast<double>(kv.levels[l].cols);
          inv_v[idx + 1] = 1.0 / static_cast<double>(kv.levels[l].rows);
        }
      }
    }
  }
  const ag::Shape loc_shape{tq, heads, levels, points, 2};
  auto ref_t = Tensor::from(loc_shape, std::move(ref_v));
  auto inv_t = Tensor::from(loc_shape, std::move(inv_v));
  auto loc = ag::add(ref_t, ag::mul(ag::reshape(offsets(query), loc_shape), inv_t));
  auto w = ag::softmax(ag::reshape(weights(query), {tq * heads, levels * points}));
  w = ag::reshape(w, {tq, heads, levels, points});
  return out(ag::deformable_sample(value_proj(kv.tokens), kv.levels, loc, w, heads));
}

void DeformableAttention::collect(nn::ParamSet& ps, const std::string& prefix) const {
  value_proj.collect(ps, nn::join(prefix, "value_proj"));
  offsets.collect(ps, nn::join(prefix, "offsets"));
  weights.collect(ps, nn::join(prefix, "weights"));
  out.collect(ps, nn::join(prefix, "out"));
}

CrossAttention::CrossAttention(AttentionKind kind_, std::size_t dim, std::size_t heads, std::size_t levels,
                               std::size_t points, Rng& rng)
    : kind(kind_) {
  if (kind == AttentionKind::kStandard) {
    standard = MultiHeadAttention(dim, heads, rng);
  } else {
    deformable = DeformableAttention(dim, heads, levels, points, rng);
  }
}

Tensor CrossAttention::operator()(const Tensor& query, const std::vector<RefPoint>& refs,
                                  const KeyValueSet& kv) const {
  if (kind == AttentionKind::kStandard) return standard(query, kv.tokens);
  return deformable(query, refs, kv);
}

void CrossAttention::collect(nn::ParamSet& ps, const std::string& prefix) const {
  if (kind == AttentionKind::kStandard) {
    standard.collect(ps, prefix);
  } else {
    deformable.collect(ps, prefix);
  }
}

}  // namespace hapnet
