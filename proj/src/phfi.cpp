#include "hapnet/phfi.hpp"

namespace hapnet {

GlcaParams::GlcaParams(const ModelConfig& cfg, Rng& rng)
    : norm_query(nn::LayerNorm(static_cast<std::size_t>(cfg.embed_dim))),
      norm_prior(nn::LayerNorm(static_cast<std::size_t>(cfg.embed_dim))),
      attn(cfg.attention_kind, static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.trunk_heads), 3,
           static_cast<std::size_t>(cfg.deform_points), rng),
      kappa(nn::param_full({1}, cfg.kappa_init)) {}

void GlcaParams::collect(nn::ParamSet& ps, const std::string& prefix) const {
  if (norm_query) norm_query->collect(ps, nn::join(prefix, "norm_query"));
  if (norm_prior) norm_prior->collect(ps, nn::join(prefix, "norm_prior"));
  attn.collect(ps, nn::join(prefix, "attn"));
  ps.add(nn::join(prefix, "kappa"), kappa);
}

CcgParams::CcgParams(const ModelConfig& cfg, Rng& rng)
    : norm_prior(nn::LayerNorm(static_cast<std::size_t>(cfg.embed_dim))),
      norm_trunk(nn::LayerNorm(static_cast<std::size_t>(cfg.embed_dim))),
      attn(cfg.attention_kind, static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.trunk_heads), 1,
           static_cast<std::size_t>(cfg.deform_points), rng),
      norm_ffn(nn::LayerNorm(static_cast<std::size_t>(cfg.embed_dim))),
      ffn(static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.embed_dim * cfg.ccg_ffn_ratio), rng) {}

void CcgParams::collect(nn::ParamSet& ps, const std::string& prefix) const {
  if (norm_prior) norm_prior->collect(ps, nn::join(prefix, "norm_prior"));
  if (norm_trunk) norm_trunk->collect(ps, nn::join(prefix, "norm_trunk"));
  attn.collect(ps, nn::join(prefix, "attn"));
  if (norm_ffn) norm_ffn->collect(ps, nn::join(prefix, "norm_ffn"));
  ffn.collect(ps, nn::join(prefix, "ffn"));
}

KeyValueSet prior_key_values(const SpatialPrior& fp) {
  KeyValueSet kv{fp.tokens, {}};
  for (std::size_t s = 0; s < 3; ++s) {
    kv.levels.push_back({fp.layout.prior_grid[s][0], fp.layout.prior_grid[s][1], fp.layout.scale_offsets[s]});
  }
  return kv;
}

KeyValueSet trunk_key_values(const TokenSequence& fv) { return KeyValueSet{fv.tokens, {{fv.rows, fv.cols, 0}}}; }

std::vector<RefPoint> prior_reference_points(const TokenLayout& layout) {
  std::vector<RefPoint> refs;
  refs.reserve(layout.prior_total);
  for (std::size_t s = 0; s < 3; ++s) {
    auto level = grid_centers(layout.prior_grid[s][0], layout.prior_grid[s][1]);
    refs.insert(refs.end(), level.begin(), level.end());
  }
  return refs;
}

namespace {

Tensor maybe_norm(const std::optional<nn::LayerNorm>& norm, const Tensor& x) { return norm ? (*norm)(x) : x; }

void check_tokens(const Tensor& t, std::size_t rows, const char* what) {
  if (t.rank() != 2 || t.dim(0) != rows) {
    throw ag::ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " tokens, got " +
                         ag::shape_str(t.shape()));
  }
}

}  // namespace

TokenSequence glca(const TokenSequence& fv, const SpatialPrior& fp, const GlcaParams& params) {
  check_tokens(fv.tokens, fv.rows * fv.cols, "glca trunk stream");
  check_tokens(fp.tokens, fp.layout.prior_total, "glca prior");
  if (fv.tokens.dim(1) != fp.tokens.dim(1)) throw ag::ShapeError("glca: channel mismatch between trunk and prior");
  auto kv = prior_key_values(fp);
  kv.tokens = maybe_norm(params.norm_prior, fp.tokens);
  auto attended = params.attn(maybe_norm(params.norm_query, fv.tokens), grid_centers(fv.rows, fv.cols), kv);
  return TokenSequence{ag::add(fv.tokens, ag::scale_by(attended, params.kappa)), fv.rows, fv.cols};
}

SpatialPrior ccg(const SpatialPrior& fp, const TokenSequence& fv_next, const CcgParams& params) {
  check_tokens(fp.tokens, fp.layout.prior_total, "ccg prior");
  check_tokens(fv_next.tokens, fv_next.rows * fv_next.cols, "ccg trunk stream");
  if (fv_next.tokens.dim(1) != fp.tokens.dim(1)) throw ag::ShapeError("ccg: channel mismatch between trunk and prior");
  auto kv = trunk_key_values(fv_next);
  kv.tokens = maybe_norm(params.norm_trunk, fv_next.tokens);
  auto attended = params.attn(maybe_norm(params.norm_prior, fp.tokens), prior_reference_points(fp.layout), kv);
  auto fused = ag::add(fp.tokens, attended);
  return SpatialPrior{ag::add(fused, params.ffn(maybe_norm(params.norm_ffn, fused))), fp.layout};
}

FusedPyramid recover_pyramid(const SpatialPrior& fp5, const nn::ConvTranspose2x2& upconv) {
  const auto& layout = fp5.layout;
  check_tokens(fp5.tokens, layout.prior_total, "recover_pyramid");
  std::array<Tensor, 3> maps;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t begin = layout.scale_offsets[s];
    maps[s] = nn::to_map(ag::slice_rows(fp5.tokens, begin, begin + layout.prior_tokens_per_scale[s]),
                         layout.prior_grid[s][0], layout.prior_grid[s][1]);
  }
  return FusedPyramid{upconv(maps[0]), maps[0], maps[1], maps[2]};
}

HybridEncoder::HybridEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(validate_config(cfg)) {
  cspd = SpatialPriorDescriptor(cfg_, rng);
  trunk = VitTrunk(cfg_, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    if (cfg_.glca_enabled) glca_stages[i].emplace(cfg_, rng);
    if (cfg_.ccg_enabled) ccg_stages[i].emplace(cfg_, rng);
  }
  const auto d = static_cast<std::size_t>(cfg_.embed_dim);
  upconv = nn::ConvTranspose2x2(d, d, rng);
}

FusedPyramid HybridEncoder::encode(const Tensor& rgb, const Tensor& thermal, EncoderTrace* trace) const {
  SpatialPrior fp = cspd.build_prior(rgb, thermal, prior_modality(cfg_.input_routing));
  TokenSequence fv = trunk.route_vfm_input(rgb, thermal, trunk_modality(cfg_.input_routing));
  if (trace) {
    trace->trunk = {fv.tokens};
    trace->prior = {fp.tokens};
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const TokenSequence fv_hat = glca_stages[i] ? glca(fv, fp, *glca_stages[i]) : fv;
    fv = trunk.run_stage(i, fv_hat);
    if (ccg_stages[i]) fp = ccg(fp, fv, *ccg_stages[i]);
    if (trace) {
      trace->trunk.push_back(fv.tokens);
      trace->prior.push_back(fp.tokens);
    }
  }
  if (cfg_.glca_enabled || cfg_.ccg_enabled) return recover_pyramid(fp, upconv);

  // Summation baseline: resize the trunk output to every prior scale and add.
  const auto& layout = fp.layout;
  const auto trunk_map = nn::to_map(fv.tokens, fv.rows, fv.cols);
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t begin = layout.scale_offsets[s];
    const auto rows = layout.prior_grid[s][0], cols = layout.prior_grid[s][1];
    auto level = nn::to_map(ag::slice_rows(fp.tokens, begin, begin + layout.prior_tokens_per_scale[s]), rows, cols);
    parts.push_back(nn::to_tokens(ag::add(level, ag::resize_bilinear(trunk_map, rows, cols))));
  }
  return recover_pyramid(SpatialPrior{ag::concat_rows(parts), layout}, upconv);
}

void HybridEncoder::collect(nn::ParamSet& ps, const std::string& prefix) const {
  cspd.collect(ps, nn::join(prefix, "cspd"));
  trunk.collect(ps, nn::join(prefix, "trunk"));
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string stage = "stage" + std::to_string(i + 1);
    if (glca_stages[i]) glca_stages[i]->collect(ps, nn::join(prefix, "phfi.glca." + stage));
    if (ccg_stages[i]) ccg_stages[i]->collect(ps, nn::join(prefix, "phfi.ccg." + stage));
  }
  upconv.collect(ps, nn::join(prefix, "upconv"));
}

}  // namespace hapnet
