#pragma once

// Progressive fusion between the trunk token stream and the spatial prior,
// and the hybrid encoder that drives it through four stages.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hapnet/attention.hpp"
#include "hapnet/cspd.hpp"
#include "hapnet/vit_trunk.hpp"

namespace hapnet {

// Global-local context aggregator: fv + kappa * MHA(LN(fv), LN(fp)).
struct GlcaParams {
  std::optional<nn::LayerNorm> norm_query;  // absent = identity
  std::optional<nn::LayerNorm> norm_prior;
  CrossAttention attn;
  Tensor kappa;  // one learnable scalar per stage

  GlcaParams() = default;
  GlcaParams(const ModelConfig& cfg, Rng& rng);
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

// Complementary context generator:
//   fp' = fp + MHA(LN(fp), LN(fv_next)); fp'' = fp' + FFN(LN(fp')).
struct CcgParams {
  std::optional<nn::LayerNorm> norm_prior;
  std::optional<nn::LayerNorm> norm_trunk;
  CrossAttention attn;
  std::optional<nn::LayerNorm> norm_ffn;
  nn::Mlp ffn;

  CcgParams() = default;
  CcgParams(const ModelConfig& cfg, Rng& rng);
  void collect(nn::ParamSet& ps, const std::string& prefix) const;
};

// Encoder output at strides 4/8/16/32, HWC with D channels.
struct FusedPyramid {
  Tensor f4, f8, f16, f32;
};

KeyValueSet prior_key_values(const SpatialPrior& fp);
KeyValueSet trunk_key_values(const TokenSequence& fv);
// Reference point of every prior token, at its own scale.
std::vector<RefPoint> prior_reference_points(const TokenLayout& layout);

TokenSequence glca(const TokenSequence& fv, const SpatialPrior& fp, const GlcaParams& params);
SpatialPrior ccg(const SpatialPrior& fp, const TokenSequence& fv_next, const CcgParams& params);
FusedPyramid recover_pyramid(const SpatialPrior& fp5, const nn::ConvTranspose2x2& upconv);

// Intermediate streams recorded by encode(): trunk[i] is F^V_{i+1} and
// prior[i] is F^P_{i+1} (five entries each).
struct EncoderTrace {
  std::vector<Tensor> trunk;
  std::vector<Tensor> prior;
};

class HybridEncoder {
 public:
  HybridEncoder() = default;
  HybridEncoder(const ModelConfig& cfg, Rng& rng);

  FusedPyramid encode(const Tensor& rgb, const Tensor& thermal, EncoderTrace* trace = nullptr) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

  const ModelConfig& config() const { return cfg_; }

  SpatialPriorDescriptor cspd;
  VitTrunk trunk;
  std::array<std::optional<GlcaParams>, 4> glca_stages;
  std::array<std::optional<CcgParams>, 4> ccg_stages;
  nn::ConvTranspose2x2 upconv;

 private:
  ModelConfig cfg_;
};

}  // namespace hapnet
