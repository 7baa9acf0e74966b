#include <gtest/gtest.h>

#include "hapnet/cspd.hpp"
#include "test_util.hpp"

namespace hapnet {
namespace {

using testing::rand_t;

ModelConfig cspd_config(int h, int w) {
  ModelConfig cfg;
  cfg.height = h;
  cfg.width = w;
  cfg.cspd_channels = {32, 64, 128};
  return validate_config(cfg);
}

FeaturePyramid random_pyramid(const ModelConfig& cfg, Rng& rng) {
  FeaturePyramid p;
  for (int i = 0; i < 3; ++i) {
    p.maps[i] = rand_t({static_cast<std::size_t>(cfg.height / kPriorStrides[i]),
                        static_cast<std::size_t>(cfg.width / kPriorStrides[i]),
                        static_cast<std::size_t>(cfg.cspd_channels[i])},
                       rng);
  }
  return p;
}

TEST(Cspd, PyramidShapesFollowStrides) {
  Rng rng(1);
  const auto cfg = cspd_config(64, 64);
  SpatialPriorDescriptor cspd(cfg, rng);
  const auto p = cspd.extract_pyramid(rand_t({64, 64, 3}, rng));
  EXPECT_EQ(p.maps[0].shape(), (ag::Shape{8, 8, 32}));
  EXPECT_EQ(p.maps[1].shape(), (ag::Shape{4, 4, 64}));
  EXPECT_EQ(p.maps[2].shape(), (ag::Shape{2, 2, 128}));
}

TEST(Cspd, RejectsWrongImageSize) {
  Rng rng(2);
  SpatialPriorDescriptor cspd(cspd_config(64, 64), rng);
  EXPECT_THROW(cspd.extract_pyramid(Tensor::zeros({32, 64, 3})), ag::ShapeError);
}

TEST(Cspd, ZeroInputWithoutBiasGivesZeroMaps) {
  Rng rng(3);
  SpatialPriorDescriptor cspd(cspd_config(64, 64), rng);
  nn::ParamSet ps;
  cspd.collect(ps, "");
  testing::zero_biases(ps);
  const auto p = cspd.extract_pyramid(Tensor::zeros({64, 64, 3}));
  for (const auto& m : p.maps) {
    for (double v : m.data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(Cspd, BothModalitiesShareOneParameterSet) {
  Rng rng(4);
  const auto cfg = cspd_config(64, 64);
  SpatialPriorDescriptor cspd(cfg, rng);
  const auto img = rand_t({64, 64, 3}, rng);
  // RGB-only and thermal-only routing run the same branch on the same image.
  const auto a = cspd.build_prior(img, rand_t({64, 64, 3}, rng), Modality::kRgb);
  const auto b = cspd.build_prior(rand_t({64, 64, 3}, rng), img, Modality::kThermal);
  testing::expect_bitwise(a.tokens, b.tokens);
  // The parameter registry has a single copy of the branch.
  nn::ParamSet ps;
  cspd.collect(ps, "");
  for (const auto& [name, t] : ps.items()) {
    EXPECT_EQ(name.find("rgb"), std::string::npos) << name;
    EXPECT_EQ(name.find("thermal"), std::string::npos) << name;
  }
}

TEST(Cspd, FusionIsElementwiseSum) {
  Rng rng(5);
  const auto cfg = cspd_config(64, 64);
  FeaturePyramid ones, twos, zero;
  for (int i = 0; i < 3; ++i) {
    const ag::Shape s{static_cast<std::size_t>(64 / kPriorStrides[i]), static_cast<std::size_t>(64 / kPriorStrides[i]),
                      static_cast<std::size_t>(cfg.cspd_channels[i])};
    ones.maps[i] = Tensor::full(s, 1.0);
    twos.maps[i] = Tensor::full(s, 2.0);
    zero.maps[i] = Tensor::zeros(s);
  }
  const auto threes = fuse_pyramids(ones, twos);
  for (const auto& m : threes.maps) {
    for (double v : m.data()) ASSERT_EQ(v, 3.0);
  }
  const auto x = random_pyramid(cfg, rng), y = random_pyramid(cfg, rng);
  const auto xz = fuse_pyramids(x, zero), xy = fuse_pyramids(x, y), yx = fuse_pyramids(y, x);
  for (int i = 0; i < 3; ++i) {
    testing::expect_bitwise(xz.maps[i], x.maps[i]);
    testing::expect_bitwise(xy.maps[i], yx.maps[i]);
    for (std::size_t k = 0; k < x.maps[i].numel(); ++k) {
      ASSERT_EQ(xy.maps[i].data()[k], x.maps[i].data()[k] + y.maps[i].data()[k]);
    }
  }
  FeaturePyramid bad = x;
  bad.maps[1] = Tensor::zeros({1, 1, 1});
  EXPECT_THROW(fuse_pyramids(x, bad), ag::ShapeError);
}

TEST(Cspd, ProjectionFlattensInScaleOrder) {
  Rng rng(6);
  const auto cfg = cspd_config(64, 64);
  SpatialPriorDescriptor cspd(cfg, rng);
  const auto layout = token_layout(cfg);
  const auto pyr = random_pyramid(cfg, rng);
  const auto prior = cspd.project_and_flatten(pyr, layout);
  ASSERT_EQ(prior.tokens.shape(), (ag::Shape{84, 64}));
  // Row scale_offsets[1] + k is the projected 1/16 map pixel at row-major index k.
  const auto& m = pyr.maps[1];
  const auto& lin = cspd.projection[1];
  const std::size_t cin = m.dim(2), d = 64;
  for (std::size_t k = 0; k < layout.prior_tokens_per_scale[1]; ++k) {
    for (std::size_t o = 0; o < d; ++o) {
      double s = lin.bias.data()[o];
      for (std::size_t c = 0; c < cin; ++c) s += m.data()[k * cin + c] * lin.weight.data()[c * d + o];
      ASSERT_NEAR(prior.tokens.data()[(layout.scale_offsets[1] + k) * d + o], s, 1e-12);
    }
  }
}

TEST(Cspd, IdentityProjectionIsPureReshape) {
  Rng rng(7);
  auto cfg = cspd_config(64, 64);
  cfg.embed_dim = 16;
  cfg.cspd_channels = {16, 16, 16};
  SpatialPriorDescriptor cspd(cfg, rng);
  for (auto& p : cspd.projection) testing::set_identity(p);
  const auto pyr = random_pyramid(cfg, rng);
  const auto prior = cspd.project_and_flatten(pyr, token_layout(cfg));
  std::vector<double> expected;
  for (const auto& m : pyr.maps) expected.insert(expected.end(), m.data().begin(), m.data().end());
  testing::expect_near(prior.tokens, expected, 0.0);
}

TEST(Cspd, RoutingSelectsModalities) {
  Rng rng(8);
  const auto cfg = cspd_config(64, 64);
  SpatialPriorDescriptor cspd(cfg, rng);
  const auto rgb = rand_t({64, 64, 3}, rng), th = rand_t({64, 64, 3}, rng), other = rand_t({64, 64, 3}, rng);
  testing::expect_bitwise(cspd.build_prior(rgb, th, Modality::kRgb).tokens,
                          cspd.build_prior(rgb, other, Modality::kRgb).tokens);
  testing::expect_bitwise(cspd.build_prior(rgb, th, Modality::kThermal).tokens,
                          cspd.build_prior(other, th, Modality::kThermal).tokens);
  // Identical images: the fused pre-projection features are twice one branch.
  const auto single = cspd.extract_pyramid(rgb);
  FeaturePyramid doubled;
  for (int i = 0; i < 3; ++i) doubled.maps[i] = ag::scale(single.maps[i], 2.0);
  testing::expect_near(cspd.build_prior(rgb, rgb, Modality::kRgbThermal).tokens,
                       cspd.project_and_flatten(doubled, token_layout(cfg)).tokens, 1e-12);
}

TEST(Cspd, TokenCountMatchesLayoutForManySizes) {
  for (auto [h, w] : std::vector<std::pair<int, int>>{{32, 32}, {32, 64}, {64, 96}, {96, 32}}) {
    Rng rng(9);
    auto cfg = cspd_config(h, w);
    cfg.cspd_channels = {8, 8, 8};
    cfg.embed_dim = 8;
    SpatialPriorDescriptor cspd(cfg, rng);
    const auto prior = cspd.build_prior(rand_t({ag::Shape::value_type(h), ag::Shape::value_type(w), 3}, rng),
                                        rand_t({ag::Shape::value_type(h), ag::Shape::value_type(w), 3}, rng),
                                        Modality::kRgbThermal);
    EXPECT_EQ(prior.tokens.dim(0), token_layout(cfg).prior_total) << h << "x" << w;
    EXPECT_EQ(prior.tokens.dim(1), 8u);
  }
}

TEST(CspdGradients, FullPathOn32) {
  Rng rng(10);
  auto cfg = testing::small_config();
  SpatialPriorDescriptor cspd(cfg, rng);
  nn::ParamSet ps;
  cspd.collect(ps, "");
  const auto rgb = rand_t({32, 32, 3}, rng), th = rand_t({32, 32, 3}, rng);
  const auto pr = testing::unit_projection({token_layout(cfg).prior_total, 16}, rng);
  testing::expect_gradients(
      [&] { return ag::sum(ag::mul(cspd.build_prior(rgb, th, Modality::kRgbThermal).tokens, pr)); },
      testing::tensors(ps), rng, 40);
}

}  // namespace
}  // namespace hapnet
