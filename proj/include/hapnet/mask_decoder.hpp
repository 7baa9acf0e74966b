#pragma once

// Mask-classification decoding: top-down pixel decoder, query decoder,
// mask assembly into a semantic map, and the training-only auxiliary head.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hapnet/attention.hpp"
#include "hapnet/phfi.hpp"

namespace hapnet {

struct PixelDecoderOutput {
  std::array<Tensor, 3> refined;  // strides 8, 16, 32; HWC with C channels
  Tensor pixel_embedding;         // E^P, [H/4, W/4, C]
};

struct QueryOutputs {
  Tensor mask_embed;    // E^M, [Q, C]
  Tensor class_logits;  // E^C, [Q, N]; last column is "no object"
};

struct SemanticMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> labels;  // row-major, values in [0, N-2]
};

class PixelDecoder {
 public:
  PixelDecoder() = default;
  PixelDecoder(const ModelConfig& cfg, Rng& rng);

  PixelDecoderOutput operator()(const FusedPyramid& pyr) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

  // Index 0..3 = strides 4, 8, 16, 32.
  std::array<nn::Linear, 4> lateral;
  std::array<nn::Conv2d, 4> smooth;
  // Normalizes the summed top-down features so mask logits start near unit scale.
  nn::LayerNorm mask_norm;
  nn::Linear mask_proj;
};

// Post-norm layer: cross-attention to one refined level, self-attention, FFN.
// query_pos is re-added to the attention queries (and self-attention keys) of
// every layer so queries keep distinct identities.
struct DecoderLayer {
  MultiHeadAttention cross_attn;
  nn::LayerNorm norm_cross;
  MultiHeadAttention self_attn;
  nn::LayerNorm norm_self;
  nn::Mlp ffn;
  nn::LayerNorm norm_ffn;

  DecoderLayer() = default;
  DecoderLayer(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& queries, const Tensor& query_pos, const Tensor& keys, const Tensor& values) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(const ModelConfig& cfg, Rng& rng);

  // Layer l reads refined[2 - l % 3]: strides 32, 16, 8, 32, ...
  QueryOutputs operator()(const std::array<Tensor, 3>& refined) const;
  QueryOutputs heads(const Tensor& queries) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

  Tensor query_feat;   // [Q, C] initial query content
  Tensor query_pos;    // [Q, C] learned query positions
  Tensor level_embed;  // [3, C], added to keys of each level (index = stride 8/16/32)
  std::vector<DecoderLayer> layers;
  nn::Linear class_head;
  std::array<nn::Linear, 3> mask_mlp;
};

struct AuxHead {
  nn::Conv2d conv1;  // 3x3, D -> D
  nn::Conv2d conv2;  // 1x1, D -> N-1

  AuxHead() = default;
  AuxHead(const ModelConfig& cfg, Rng& rng);
  // Returns [H/4, W/4, N-1] logits.
  Tensor operator()(const Tensor& f4) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

// mask_logits[q, y*w + x] = <E^M[q], E^P[y, x]>; result [Q, H/4 * W/4].
Tensor predict_masks(const Tensor& mask_embed, const Tensor& pixel_embedding);

// Per-pixel class scores at mask resolution, [h, w, N-1]:
//   score_c = sum_q softmax(E^C[q])[c] * sigmoid(M^M[q]).
Tensor semantic_scores(const Tensor& class_logits, const Tensor& mask_logits, std::size_t rows, std::size_t cols);

// Scores resized to out_rows x out_cols, argmax over real classes with ties
// broken toward the lowest index.
SemanticMap assemble_semantic(const Tensor& class_logits, const Tensor& mask_logits, std::size_t mask_rows,
                              std::size_t mask_cols, std::size_t out_rows, std::size_t out_cols);

}  // namespace hapnet
