#include "hapnet/model.hpp"

namespace hapnet {

HapNet::HapNet(const ModelConfig& cfg) : cfg_(validate_config(cfg)) {
  Rng rng = seed_all(cfg_.seed).params();
  encoder = HybridEncoder(cfg_, rng);
  pixel_decoder = PixelDecoder(cfg_, rng);
  decoder = TransformerDecoder(cfg_, rng);
  aux = AuxHead(cfg_, rng);
}

ModelOutputs HapNet::forward(const Tensor& rgb, const Tensor& thermal, bool with_aux, EncoderTrace* trace) const {
  ModelOutputs out;
  out.pyramid = encoder.encode(rgb, thermal, trace);
  auto pix = pixel_decoder(out.pyramid);
  out.pixel_embedding = pix.pixel_embedding;
  out.queries = decoder(pix.refined);
  out.mask_logits = predict_masks(out.queries.mask_embed, out.pixel_embedding);
  out.mask_rows = out.pixel_embedding.dim(0);
  out.mask_cols = out.pixel_embedding.dim(1);
  if (with_aux) out.aux_logits = aux(out.pyramid.f4);
  return out;
}

SemanticMap HapNet::predict(const Tensor& rgb, const Tensor& thermal) const {
  ag::NoGradGuard no_grad;
  const auto out = forward(rgb, thermal, false);
  return assemble_semantic(out.queries.class_logits, out.mask_logits, out.mask_rows, out.mask_cols,
                           static_cast<std::size_t>(cfg_.height), static_cast<std::size_t>(cfg_.width));
}

nn::ParamSet HapNet::parameters(bool include_aux) const {
  nn::ParamSet ps;
  encoder.collect(ps, "");
  pixel_decoder.collect(ps, "pixel_decoder");
  decoder.collect(ps, "decoder");
  if (include_aux) aux.collect(ps, "aux");
  return ps;
}

}  // namespace hapnet
