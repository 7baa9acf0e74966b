#pragma once

// End-to-end network: hybrid encoder, mask-classification decoder and the
// auxiliary head used during training.

#include <string>

#include "hapnet/mask_decoder.hpp"
#include "hapnet/phfi.hpp"

namespace hapnet {

struct ModelOutputs {
  FusedPyramid pyramid;
  Tensor pixel_embedding;  // E^P
  QueryOutputs queries;    // E^M, E^C
  Tensor mask_logits;      // M^M, [Q, h * w]
  Tensor aux_logits;       // [h, w, N-1]; undefined unless requested
  std::size_t mask_rows = 0;
  std::size_t mask_cols = 0;
};

class HapNet {
 public:
  // Parameters are drawn from the parameter stream of seed_all(cfg.seed).
  explicit HapNet(const ModelConfig& cfg);

  ModelOutputs forward(const Tensor& rgb, const Tensor& thermal, bool with_aux = false,
                       EncoderTrace* trace = nullptr) const;
  // Inference path: semantic map at H x W. Never touches the auxiliary head.
  SemanticMap predict(const Tensor& rgb, const Tensor& thermal) const;

  // Inference parameters first, then (optionally) the auxiliary head under "aux".
  nn::ParamSet parameters(bool include_aux = true) const;

  const ModelConfig& config() const { return cfg_; }

  HybridEncoder encoder;
  PixelDecoder pixel_decoder;
  TransformerDecoder decoder;
  AuxHead aux;

 private:
  ModelConfig cfg_;
};

}  // namespace hapnet
