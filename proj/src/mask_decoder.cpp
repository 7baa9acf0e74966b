#include "hapnet/mask_decoder.hpp"

#include <cmath>

namespace hapnet {

PixelDecoder::PixelDecoder(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto c = static_cast<std::size_t>(cfg.decoder_dim);
  for (std::size_t i = 0; i < 4; ++i) {
    lateral[i] = nn::Linear(d, c, rng);
    smooth[i] = nn::Conv2d(c, c, 3, 1, 1, rng);
  }
  mask_norm = nn::LayerNorm(c);
  mask_proj = nn::Linear(c, c, rng);
}

PixelDecoderOutput PixelDecoder::operator()(const FusedPyramid& pyr) const {
  const std::array<const Tensor*, 4> levels{&pyr.f4, &pyr.f8, &pyr.f16, &pyr.f32};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& m = *levels[i];
    if (m.rank() != 3 || m.dim(2) != lateral[i].in()) {
      throw ag::ShapeError("pixel decoder: level " + std::to_string(i) + " has shape " + ag::shape_str(m.shape()));
    }
    if (i > 0 && (2 * m.dim(0) != levels[i - 1]->dim(0) || 2 * m.dim(1) != levels[i - 1]->dim(1))) {
      throw ag::ShapeError("pixel decoder: levels are not successive x2 scales");
    }
  }
  auto lat = [&](std::size_t i) {
    const auto& m = *levels[i];
    return nn::to_map(lateral[i](nn::to_tokens(m)), m.dim(0), m.dim(1));
  };
  PixelDecoderOutput out;
  Tensor y = lat(3);
  out.refined[2] = smooth[3](y);
  for (int i = 2; i >= 0; --i) {
    y = ag::add(lat(static_cast<std::size_t>(i)), ag::upsample_nearest2x(y));
    auto refined = smooth[static_cast<std::size_t>(i)](y);
    if (i > 0) {
      out.refined[static_cast<std::size_t>(i - 1)] = refined;
    } else {
      out.pixel_embedding =
          nn::to_map(mask_proj(mask_norm(nn::to_tokens(refined))), refined.dim(0), refined.dim(1));
    }
  }
  return out;
}

void PixelDecoder::collect(nn::ParamSet& ps, const std::string& prefix) const {
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string lvl = "s" + std::to_string(4 << i);
    lateral[i].collect(ps, nn::join(prefix, "lateral." + lvl));
    smooth[i].collect(ps, nn::join(prefix, "smooth." + lvl));
  }
  mask_norm.collect(ps, nn::join(prefix, "mask_norm"));
  mask_proj.collect(ps, nn::join(prefix, "mask_proj"));
}

DecoderLayer::DecoderLayer(std::size_t dim, std::size_t heads, Rng& rng)
    : cross_attn(dim, heads, rng),
      norm_cross(dim),
      self_attn(dim, heads, rng),
      norm_self(dim),
      ffn(dim, 4 * dim, rng),
      norm_ffn(dim) {}

Tensor DecoderLayer::operator()(const Tensor& queries, const Tensor& query_pos, const Tensor& keys,
                                const Tensor& values) const {
  auto q = norm_cross(ag::add(queries, cross_attn(ag::add(queries, query_pos), keys, values)));
  const auto qk = ag::add(q, query_pos);
  q = norm_self(ag::add(q, self_attn(qk, qk, q)));
  return norm_ffn(ag::add(q, ffn(q)));
}

void DecoderLayer::collect(nn::ParamSet& ps, const std::string& prefix) const {
  cross_attn.collect(ps, nn::join(prefix, "cross_attn"));
  norm_cross.collect(ps, nn::join(prefix, "norm_cross"));
  self_attn.collect(ps, nn::join(prefix, "self_attn"));
  norm_self.collect(ps, nn::join(prefix, "norm_self"));
  ffn.collect(ps, nn::join(prefix, "ffn"));
  norm_ffn.collect(ps, nn::join(prefix, "norm_ffn"));
}

TransformerDecoder::TransformerDecoder(const ModelConfig& cfg, Rng& rng) {
  const auto c = static_cast<std::size_t>(cfg.decoder_dim);
  const auto q = static_cast<std::size_t>(cfg.num_queries);
  query_feat = nn::param_normal({q, c}, 1.0, rng);
  query_pos = nn::param_normal({q, c}, 1.0, rng);
  level_embed = nn::param_normal({3, c}, 0.02, rng);
  for (int l = 0; l < cfg.decoder_layers; ++l) layers.emplace_back(c, static_cast<std::size_t>(cfg.decoder_heads), rng);
  class_head = nn::Linear(c, static_cast<std::size_t>(cfg.num_classes), rng);
  for (auto& fc : mask_mlp) fc = nn::Linear(c, c, rng);
}

QueryOutputs TransformerDecoder::heads(const Tensor& queries) const {
  QueryOutputs out;
  out.class_logits = class_head(queries);
  out.mask_embed = mask_mlp[2](ag::relu(mask_mlp[1](ag::relu(mask_mlp[0](queries)))));
  return out;
}

QueryOutputs TransformerDecoder::operator()(const std::array<Tensor, 3>& refined) const {
  const std::size_t c = query_feat.dim(1);
  for (const auto& m : refined) {
    if (m.rank() != 3 || m.dim(2) != c) {
      throw ag::ShapeError("transformer decoder: refined level " + ag::shape_str(m.shape()) + " is not at C channels");
    }
  }
  Tensor q = query_feat;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t level = 2 - l % 3;
    auto values = nn::to_tokens(refined[level]);
    auto keys = ag::add_row_vector(values, ag::slice_rows(level_embed, level, level + 1));
    q = layers[l](q, query_pos, keys, values);
  }
  return heads(q);
}

void TransformerDecoder::collect(nn::ParamSet& ps, const std::string& prefix) const {
  ps.add(nn::join(prefix, "query_feat"), query_feat);
  ps.add(nn::join(prefix, "query_pos"), query_pos);
  ps.add(nn::join(prefix, "level_embed"), level_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(ps, nn::join(prefix, "layer" + std::to_string(l)));
  class_head.collect(ps, nn::join(prefix, "class_head"));
  for (std::size_t i = 0; i < 3; ++i) mask_mlp[i].collect(ps, nn::join(prefix, "mask_mlp" + std::to_string(i)));
}

AuxHead::AuxHead(const ModelConfig& cfg, Rng& rng)
    : conv1(static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.embed_dim), 3, 1, 1, rng),
      conv2(static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.real_classes()), 1, 1, 0, rng) {}

Tensor AuxHead::operator()(const Tensor& f4) const {
  if (f4.rank() != 3 || f4.dim(2) != conv1.weight.dim(2)) {
    throw ag::ShapeError("aux head: input " + ag::shape_str(f4.shape()) + " does not have D channels");
  }
  return conv2(ag::gelu(conv1(f4)));
}

void AuxHead::collect(nn::ParamSet& ps, const std::string& prefix) const {
  conv1.collect(ps, nn::join(prefix, "conv1"));
  conv2.collect(ps, nn::join(prefix, "conv2"));
}

Tensor predict_masks(const Tensor& mask_embed, const Tensor& pixel_embedding) {
  if (pixel_embedding.rank() != 3 || mask_embed.rank() != 2 || mask_embed.dim(1) != pixel_embedding.dim(2)) {
    throw ag::ShapeError("predict_masks: E^M " + ag::shape_str(mask_embed.shape()) + " vs E^P " +
                         ag::shape_str(pixel_embedding.shape()));
  }
  return ag::matmul_nt(mask_embed, nn::to_tokens(pixel_embedding));
}

Tensor semantic_scores(const Tensor& class_logits, const Tensor& mask_logits, std::size_t rows, std::size_t cols) {
  const std::size_t q = class_logits.dim(0), n = class_logits.dim(1);
  if (mask_logits.rank() != 2 || mask_logits.dim(0) != q || mask_logits.dim(1) != rows * cols || n < 2) {
    throw ag::ShapeError("semantic_scores: class logits " + ag::shape_str(class_logits.shape()) + " vs masks " +
                         ag::shape_str(mask_logits.shape()));
  }
  ag::NoGradGuard no_grad;
  auto probs = ag::softmax(class_logits.detach());
  auto masks = ag::sigmoid(mask_logits.detach());
  const std::size_t k = n - 1;
  std::vector<double> scores(rows * cols * k, 0.0);
  const auto p = probs.data();
  const auto m = masks.data();
  for (std::size_t qi = 0; qi < q; ++qi) {
    for (std::size_t px = 0; px < rows * cols; ++px) {
      const double mv = m[qi * rows * cols + px];
      for (std::size_t c = 0; c < k; ++c) scores[px * k + c] += p[qi * n + c] * mv;
    }
  }
  return Tensor::from({rows, cols, k}, std::move(scores));
}

SemanticMap assemble_semantic(const Tensor& class_logits, const Tensor& mask_logits, std::size_t mask_rows,
                              std::size_t mask_cols, std::size_t out_rows, std::size_t out_cols) {
  ag::NoGradGuard no_grad;
  auto scores = semantic_scores(class_logits, mask_logits, mask_rows, mask_cols);
  if (mask_rows != out_rows || mask_cols != out_cols) scores = ag::resize_bilinear(scores, out_rows, out_cols);
  const std::size_t k = scores.dim(2);
  SemanticMap out{out_rows, out_cols, std::vector<std::uint8_t>(out_rows * out_cols, 0)};
  const auto s = scores.data();
  for (std::size_t px = 0; px < out_rows * out_cols; ++px) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (s[px * k + c] > s[px * k + best]) best = c;
    }
    out.labels[px] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace hapnet
