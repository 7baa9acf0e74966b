#pragma once

#include <array>
#include <string>
#include <vector>

#include "hapnet/archive.hpp"
#include "hapnet/attention.hpp"
#include "hapnet/config.hpp"
#include "hapnet/nn.hpp"

namespace hapnet {

// Stride-16 token grid carried through the trunk.
struct TokenSequence {
  Tensor tokens;  // [rows * cols, D]
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)).
struct TransformerBlock {
  nn::LayerNorm norm1;
  MultiHeadAttention attn;
  nn::LayerNorm norm2;
  nn::Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

using TrunkStage = std::vector<TransformerBlock>;

class VitTrunk {
 public:
  VitTrunk() = default;
  VitTrunk(const ModelConfig& cfg, Rng& rng);

  // Linear projection of 16x16 patches, before the positional table.
  Tensor project_patches(const Tensor& image) const;
  TokenSequence patch_embed(const Tensor& image) const;
  // Positional table is added once, after summing projections for RGB+T.
  TokenSequence route_vfm_input(const Tensor& rgb, const Tensor& thermal, Modality modality) const;
  // stage in [0, 4)
  TokenSequence run_stage(std::size_t stage, const TokenSequence& x) const;

  void collect(nn::ParamSet& ps, const std::string& prefix) const;

  nn::Conv2d patch_proj;  // 16x16, stride 16, 3 -> D
  Tensor pos_embed;       // [vit_tokens, D]
  std::array<TrunkStage, 4> stages;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
};

TokenSequence run_stage(const TrunkStage& stage, const TokenSequence& x);

// Copies every trunk parameter found in `arrays` (keys are names relative to
// the trunk, e.g. "stage1.block0.attn.q.weight") into the trunk. Shape
// mismatches are hard errors; returns the number of arrays loaded.
std::size_t load_trunk_weights(VitTrunk& trunk, const NamedArrays& arrays);

}  // namespace hapnet
