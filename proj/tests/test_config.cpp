#include <gtest/gtest.h>

#include "hapnet/config.hpp"
#include "hapnet/model.hpp"
#include "test_util.hpp"

namespace hapnet {
namespace {

ModelConfig sized(int h, int w) {
  ModelConfig c;
  c.height = h;
  c.width = w;
  return c;
}

TEST(ValidateConfig, AcceptsCameraResolution) { EXPECT_NO_THROW(validate_config(sized(480, 640))); }

TEST(ValidateConfig, AcceptsDeskResolution) { EXPECT_EQ(validate_config(sized(64, 64)), sized(64, 64)); }

TEST(ValidateConfig, RejectsHeightNotMultipleOf32) {
  try {
    validate_config(sized(50, 64));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "H not divisible by 32");
  }
}

TEST(ValidateConfig, NamesNonPositiveField) {
  ModelConfig c;
  c.embed_dim = 0;
  try {
    validate_config(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("D"), std::string::npos);
  }
  c = ModelConfig{};
  c.num_queries = -3;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = ModelConfig{};
  c.num_classes = 1;
  EXPECT_THROW(validate_config(c), ConfigError);
}

TEST(ValidateConfig, Idempotent) {
  const auto once = validate_config(sized(96, 128));
  EXPECT_EQ(validate_config(once), once);
}

TEST(TokenLayout, CameraResolution) {
  const auto l = token_layout(sized(480, 640));
  EXPECT_EQ(l.vit_tokens, 1200u);
  EXPECT_EQ(l.prior_tokens_per_scale, (std::array<std::size_t, 3>{4800, 1200, 300}));
  EXPECT_EQ(l.prior_total, 6300u);
  EXPECT_EQ(l.scale_offsets, (std::array<std::size_t, 3>{0, 4800, 6000}));
}

TEST(TokenLayout, DeskResolutions) {
  auto l = token_layout(sized(64, 64));
  EXPECT_EQ(l.vit_tokens, 16u);
  EXPECT_EQ(l.prior_tokens_per_scale, (std::array<std::size_t, 3>{64, 16, 4}));
  EXPECT_EQ(l.prior_total, 84u);
  l = token_layout(sized(32, 32));
  EXPECT_EQ(l.vit_tokens, 4u);
  EXPECT_EQ(l.prior_tokens_per_scale, (std::array<std::size_t, 3>{16, 4, 1}));
  EXPECT_EQ(l.prior_total, 21u);
}

TEST(TokenLayout, Invariants) {
  for (int h = 32; h <= 256; h += 32) {
    for (int w = 32; w <= 256; w += 32) {
      const auto l = token_layout(sized(h, w));
      const auto hw = static_cast<std::size_t>(h * w);
      EXPECT_EQ(l.vit_tokens, l.prior_tokens_per_scale[1]);
      EXPECT_EQ(l.prior_total, hw / 64 + hw / 256 + hw / 1024);
      EXPECT_LT(l.scale_offsets[0], l.scale_offsets[1]);
      EXPECT_LT(l.scale_offsets[1], l.scale_offsets[2]);
      EXPECT_EQ(l.scale_offsets[2] + l.prior_tokens_per_scale[2], l.prior_total);
      if (h <= 128) {
        const auto d = token_layout(sized(2 * h, w));
        EXPECT_EQ(d.vit_tokens, 2 * l.vit_tokens);
        EXPECT_EQ(d.prior_total, 2 * l.prior_total);
        for (int s = 0; s < 3; ++s) EXPECT_EQ(d.prior_tokens_per_scale[s], 2 * l.prior_tokens_per_scale[s]);
      }
    }
  }
}

TEST(Routing, GridMatchesStrategyRows) {
  EXPECT_EQ(trunk_modality(InputRouting::A), Modality::kRgbThermal);
  EXPECT_EQ(prior_modality(InputRouting::A), Modality::kRgbThermal);
  EXPECT_EQ(trunk_modality(InputRouting::D), Modality::kRgb);
  EXPECT_EQ(prior_modality(InputRouting::D), Modality::kRgbThermal);
  EXPECT_EQ(trunk_modality(InputRouting::E), Modality::kRgb);
  EXPECT_EQ(prior_modality(InputRouting::E), Modality::kRgb);
  EXPECT_EQ(trunk_modality(InputRouting::I), Modality::kThermal);
  EXPECT_EQ(prior_modality(InputRouting::I), Modality::kThermal);
  EXPECT_EQ(parse_routing("F"), InputRouting::F);
  EXPECT_THROW(parse_routing("J"), ConfigError);
}

TEST(ConfigJson, RoundTripsEveryField) {
  ModelConfig c;
  c.height = 96;
  c.width = 128;
  c.embed_dim = 32;
  c.trunk_depth = {1, 0, 2, 3};
  c.trunk_heads = 2;
  c.cspd_channels = {8, 16, 24};
  c.cspd_depth = {2, 1, 0};
  c.num_queries = 7;
  c.decoder_dim = 24;
  c.decoder_layers = 5;
  c.decoder_heads = 3;
  c.num_classes = 4;
  c.attention_kind = AttentionKind::kDeformable;
  c.deform_points = 2;
  c.ccg_ffn_ratio = 3;
  c.kappa_init = 0.25;
  c.input_routing = InputRouting::H;
  c.glca_enabled = false;
  c.ccg_enabled = true;
  c.seed = 123456789012345ull;
  EXPECT_EQ(model_config_from_json(nlohmann::json::parse(to_json(c).dump())), c);
}

TEST(ConfigJson, RejectsBadValues) {
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"height", "tall"}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"fallback_fusion", "concat"}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(SeedAll, SameSeedSameParameters) {
  const auto cfg = testing::small_config();
  const HapNet a(cfg), b(cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) testing::expect_bitwise(pa.items()[i].second, pb.items()[i].second);
}

TEST(SeedAll, DifferentSeedDifferentParameters) {
  auto cfg = testing::small_config();
  const HapNet a(cfg);
  cfg.seed = 1;
  const HapNet b(cfg);
  bool differ = false;
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size() && !differ; ++i) {
    const auto x = pa.items()[i].second.data(), y = pb.items()[i].second.data();
    differ = !std::equal(x.begin(), x.end(), y.begin());
  }
  EXPECT_TRUE(differ);
}

TEST(SeedAll, StreamsAreIndependentAndRepeatable) {
  const auto s = seed_all(42);
  auto a = s.data(3), b = s.data(3), c = s.data(4);
  const auto x = a.next();
  EXPECT_EQ(x, b.next());
  EXPECT_NE(x, c.next());
  Rng r(5);
  r.normal();
  const auto st = r.state();
  const double u = r.uniform();
  r.restore(st);
  EXPECT_EQ(r.uniform(), u);
}

}  // namespace
}  // namespace hapnet
