#include "hapnet/vit_trunk.hpp"

#include <algorithm>

namespace hapnet {

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t heads, Rng& rng)
    : norm1(dim), attn(dim, heads, rng), norm2(dim), mlp(dim, 4 * dim, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x) const {
  auto h = norm1(x);
  auto y = ag::add(x, attn(h, h));
  return ag::add(y, mlp(norm2(y)));
}

void TransformerBlock::collect(nn::ParamSet& ps, const std::string& prefix) const {
  norm1.collect(ps, nn::join(prefix, "norm1"));
  attn.collect(ps, nn::join(prefix, "attn"));
  norm2.collect(ps, nn::join(prefix, "norm2"));
  mlp.collect(ps, nn::join(prefix, "mlp"));
}

VitTrunk::VitTrunk(const ModelConfig& cfg, Rng& rng) {
  const auto layout = token_layout(cfg);
  rows_ = layout.vit_grid[0];
  cols_ = layout.vit_grid[1];
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  patch_proj = nn::Conv2d(3, d, kPatchSize, kPatchSize, 0, rng);
  pos_embed = nn::param_normal({layout.vit_tokens, d}, 0.02, rng);
  for (std::size_t s = 0; s < 4; ++s) {
    for (int b = 0; b < cfg.trunk_depth[s]; ++b) {
      stages[s].emplace_back(d, static_cast<std::size_t>(cfg.trunk_heads), rng);
    }
  }
}

Tensor VitTrunk::project_patches(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) % kPatchSize != 0 || image.dim(1) % kPatchSize != 0) {
    throw ag::ShapeError("patch_embed: image " + ag::shape_str(image.shape()) +
                         " must be HxWx3 with H, W divisible by 16");
  }
  if (image.dim(0) / kPatchSize != rows_ || image.dim(1) / kPatchSize != cols_) {
    throw ag::ShapeError("patch_embed: image " + ag::shape_str(image.shape()) + " does not match the configured grid");
  }
  return nn::to_tokens(patch_proj(image));
}

TokenSequence VitTrunk::patch_embed(const Tensor& image) const {
  return TokenSequence{ag::add(project_patches(image), pos_embed), rows_, cols_};
}

TokenSequence VitTrunk::route_vfm_input(const Tensor& rgb, const Tensor& thermal, Modality modality) const {
  switch (modality) {
    case Modality::kRgb:
      return patch_embed(rgb);
    case Modality::kThermal:
      return patch_embed(thermal);
    case Modality::kRgbThermal:
    default:
      return TokenSequence{ag::add(ag::add(project_patches(rgb), project_patches(thermal)), pos_embed), rows_, cols_};
  }
}

TokenSequence run_stage(const TrunkStage& stage, const TokenSequence& x) {
  TokenSequence y = x;
  for (const auto& block : stage) y.tokens = block(y.tokens);
  return y;
}

TokenSequence VitTrunk::run_stage(std::size_t stage, const TokenSequence& x) const {
  if (x.tokens.rank() != 2 || x.tokens.dim(0) != rows_ * cols_) {
    throw ag::ShapeError("run_stage: expected " + std::to_string(rows_ * cols_) + " tokens, got " +
                         ag::shape_str(x.tokens.shape()));
  }
  return hapnet::run_stage(stages.at(stage), x);
}

void VitTrunk::collect(nn::ParamSet& ps, const std::string& prefix) const {
  patch_proj.collect(ps, nn::join(prefix, "patch_embed"));
  ps.add(nn::join(prefix, "pos_embed"), pos_embed);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect(ps, nn::join(prefix, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b)));
    }
  }
}

std::size_t load_trunk_weights(VitTrunk& trunk, const NamedArrays& arrays) {
  nn::ParamSet ps;
  trunk.collect(ps, "");
  std::size_t loaded = 0;
  for (const auto& [name, t] : ps.items()) {
    auto it = arrays.find(name);
    if (it == arrays.end()) continue;
    if (it->second.shape != t.shape()) {
      throw CheckpointError("trunk weight '" + name + "' has shape " + ag::shape_str(it->second.shape) +
                            ", expected " + ag::shape_str(t.shape()));
    }
    Tensor target = t;
    std::copy(it->second.data.begin(), it->second.data.end(), target.mutable_data().begin());
    ++loaded;
  }
  return loaded;
}

}  // namespace hapnet
