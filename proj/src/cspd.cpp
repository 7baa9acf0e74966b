#include "hapnet/cspd.hpp"

namespace hapnet {

ConvNextBlock::ConvNextBlock(std::size_t channels, Rng& rng)
    : dwconv(channels, 7, rng),
      norm(channels),
      pw_expand(channels, 4 * channels, rng),
      pw_project(4 * channels, channels, rng) {}

Tensor ConvNextBlock::operator()(const Tensor& map) const {
  const std::size_t rows = map.dim(0), cols = map.dim(1);
  auto tokens = nn::to_tokens(dwconv(map));
  tokens = pw_project(ag::gelu(pw_expand(norm(tokens))));
  return ag::add(map, nn::to_map(tokens, rows, cols));
}

void ConvNextBlock::collect(nn::ParamSet& ps, const std::string& prefix) const {
  dwconv.collect(ps, nn::join(prefix, "dwconv"));
  norm.collect(ps, nn::join(prefix, "norm"));
  pw_expand.collect(ps, nn::join(prefix, "pw_expand"));
  pw_project.collect(ps, nn::join(prefix, "pw_project"));
}

Downsample::Downsample(std::size_t in, std::size_t out, Rng& rng) : norm(in), conv(in, out, 2, 2, 0, rng) {}

Tensor Downsample::operator()(const Tensor& map) const {
  const std::size_t rows = map.dim(0), cols = map.dim(1);
  return conv(nn::to_map(norm(nn::to_tokens(map)), rows, cols));
}

void Downsample::collect(nn::ParamSet& ps, const std::string& prefix) const {
  norm.collect(ps, nn::join(prefix, "norm"));
  conv.collect(ps, nn::join(prefix, "conv"));
}

SpatialPriorDescriptor::SpatialPriorDescriptor(const ModelConfig& cfg, Rng& rng)
    : height_(cfg.height), width_(cfg.width) {
  const auto c = cfg.cspd_channels;
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  stem = nn::Conv2d(3, static_cast<std::size_t>(c[0]), 4, 4, 0, rng);
  stem_norm = nn::LayerNorm(static_cast<std::size_t>(c[0]));
  const std::array<std::size_t, 3> in{static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[0]),
                                      static_cast<std::size_t>(c[1])};
  for (std::size_t s = 0; s < 3; ++s) {
    const auto ch = static_cast<std::size_t>(c[s]);
    downsample[s] = Downsample(in[s], ch, rng);
    for (int b = 0; b < cfg.cspd_depth[s]; ++b) stages[s].emplace_back(ch, rng);
    projection[s] = nn::Linear(ch, d, rng);
  }
}

FeaturePyramid SpatialPriorDescriptor::extract_pyramid(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(height_) ||
      image.dim(1) != static_cast<std::size_t>(width_) || image.dim(2) != 3) {
    throw ag::ShapeError("CSPD input " + ag::shape_str(image.shape()) + " does not match configured " +
                         std::to_string(height_) + "x" + std::to_string(width_) + "x3");
  }
  auto x = stem(image);
  x = nn::to_map(stem_norm(nn::to_tokens(x)), x.dim(0), x.dim(1));
  FeaturePyramid pyr;
  for (std::size_t s = 0; s < 3; ++s) {
    x = downsample[s](x);
    for (const auto& block : stages[s]) x = block(x);
    pyr.maps[s] = x;
  }
  return pyr;
}

SpatialPrior SpatialPriorDescriptor::project_and_flatten(const FeaturePyramid& fused,
                                                         const TokenLayout& layout) const {
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& m = fused.maps[s];
    if (m.rank() != 3 || m.dim(0) != layout.prior_grid[s][0] || m.dim(1) != layout.prior_grid[s][1] ||
        m.dim(2) != projection[s].in()) {
      throw ag::ShapeError("project_and_flatten: level " + std::to_string(s) + " has shape " +
                           ag::shape_str(m.shape()) + ", layout/channels disagree");
    }
    parts.push_back(projection[s](nn::to_tokens(m)));
  }
  return SpatialPrior{ag::concat_rows(parts), layout};
}

SpatialPrior SpatialPriorDescriptor::build_prior(const Tensor& rgb, const Tensor& thermal, Modality modality) const {
  FeaturePyramid features;
  switch (modality) {
    case Modality::kRgbThermal:
      features = fuse_pyramids(extract_pyramid(rgb), extract_pyramid(thermal));
      break;
    case Modality::kRgb:
      features = extract_pyramid(rgb);
      break;
    case Modality::kThermal:
      features = extract_pyramid(thermal);
      break;
  }
  ModelConfig shape_cfg;
  shape_cfg.height = height_;
  shape_cfg.width = width_;
  return project_and_flatten(features, token_layout(shape_cfg));
}

void SpatialPriorDescriptor::collect(nn::ParamSet& ps, const std::string& prefix) const {
  stem.collect(ps, nn::join(prefix, "stem"));
  stem_norm.collect(ps, nn::join(prefix, "stem_norm"));
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string stage = nn::join(prefix, "stage" + std::to_string(s + 2));
    downsample[s].collect(ps, nn::join(stage, "downsample"));
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect(ps, nn::join(stage, "block" + std::to_string(b)));
    }
    projection[s].collect(ps, nn::join(prefix, "proj" + std::to_string(s + 2)));
  }
}

FeaturePyramid fuse_pyramids(const FeaturePyramid& rgb, const FeaturePyramid& thermal) {
  FeaturePyramid out;
  for (std::size_t s = 0; s < 3; ++s) out.maps[s] = ag::add(rgb.maps[s], thermal.maps[s]);
  return out;
}

}  // namespace hapnet
