#pragma once

// Cross-modal spatial prior descriptor: a weight-shared convolutional branch
// run on each routed modality, summed per scale, projected to D channels and
// flattened into one token sequence.

#include <array>
#include <string>
#include <vector>

#include "hapnet/config.hpp"
#include "hapnet/nn.hpp"

namespace hapnet {

using ag::Tensor;

// Maps at strides 8/16/32, HWC with channels C2/C3/C4 (or D after projection).
struct FeaturePyramid {
  std::array<Tensor, 3> maps;
};

// Flattened prior: rows ordered stride 8, 16, 32, row-major inside a scale.
struct SpatialPrior {
  Tensor tokens;  // [prior_total, D]
  TokenLayout layout;
};

// Depthwise 7x7 -> LN -> 1x1 expand x4 -> GELU -> 1x1 project, residual.
struct ConvNextBlock {
  nn::DepthwiseConv2d dwconv;
  nn::LayerNorm norm;
  nn::Linear pw_expand;
  nn::Linear pw_project;

  ConvNextBlock() = default;
  ConvNextBlock(std::size_t channels, Rng& rng);
  Tensor operator()(const Tensor& map) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

// LN followed by a 2x2 stride-2 convolution.
struct Downsample {
  nn::LayerNorm norm;
  nn::Conv2d conv;

  Downsample() = default;
  Downsample(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& map) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

class SpatialPriorDescriptor {
 public:
  SpatialPriorDescriptor() = default;
  SpatialPriorDescriptor(const ModelConfig& cfg, Rng& rng);

  // Runs the shared branch on one HxWx3 image.
  FeaturePyramid extract_pyramid(const Tensor& image) const;
  // 1x1 projection of each level to D channels, flattened and concatenated.
  SpatialPrior project_and_flatten(const FeaturePyramid& fused, const TokenLayout& layout) const;
  // Routes modalities per `modality`: both -> extract twice and sum.
  SpatialPrior build_prior(const Tensor& rgb, const Tensor& thermal, Modality modality) const;

  void collect(nn::ParamSet& ps, const std::string& prefix) const;

  nn::Conv2d stem;  // 4x4 patchify, stride 4
  nn::LayerNorm stem_norm;
  std::array<Downsample, 3> downsample;
  std::array<std::vector<ConvNextBlock>, 3> stages;
  std::array<nn::Linear, 3> projection;

 private:
  int height_ = 0;
  int width_ = 0;
};

FeaturePyramid fuse_pyramids(const FeaturePyramid& rgb, const FeaturePyramid& thermal);

}  // namespace hapnet
