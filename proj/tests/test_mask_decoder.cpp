#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hapnet/mask_decoder.hpp"
#include "hapnet/model.hpp"
#include "test_util.hpp"

namespace hapnet {
namespace {

using testing::rand_t;

FusedPyramid random_pyramid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
  return FusedPyramid{rand_t({h / 4, w / 4, d}, rng), rand_t({h / 8, w / 8, d}, rng), rand_t({h / 16, w / 16, d}, rng),
                      rand_t({h / 32, w / 32, d}, rng)};
}

// 3x3 kernel whose center tap is the identity.
void identity_conv(nn::Conv2d& conv) {
  testing::fill(conv.weight, 0.0);
  const std::size_t c = conv.weight.dim(2);
  for (std::size_t i = 0; i < c; ++i) conv.weight.mutable_data()[((1 * 3 + 1) * c + i) * c + i] = 1.0;
  testing::fill(conv.bias, 0.0);
}

TEST(PixelDecoder, Shapes) {
  Rng rng(1);
  ModelConfig cfg;
  PixelDecoder pd(cfg, rng);
  const auto out = pd(random_pyramid(64, 64, 64, rng));
  EXPECT_EQ(out.pixel_embedding.shape(), (ag::Shape{16, 16, 64}));
  EXPECT_EQ(out.refined[0].shape(), (ag::Shape{8, 8, 64}));
  EXPECT_EQ(out.refined[1].shape(), (ag::Shape{4, 4, 64}));
  EXPECT_EQ(out.refined[2].shape(), (ag::Shape{2, 2, 64}));
}

TEST(PixelDecoder, ZeroPyramidWithoutBiasIsZero) {
  Rng rng(2);
  const auto cfg = testing::small_config();
  PixelDecoder pd(cfg, rng);
  nn::ParamSet ps;
  pd.collect(ps, "");
  testing::zero_biases(ps);
  const auto out = pd(FusedPyramid{Tensor::zeros({8, 8, 16}), Tensor::zeros({4, 4, 16}), Tensor::zeros({2, 2, 16}),
                                   Tensor::zeros({1, 1, 16})});
  for (const auto* t : {&out.pixel_embedding, &out.refined[0], &out.refined[1], &out.refined[2]}) {
    for (double v : t->data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(PixelDecoder, TopDownCarriesCoarsestLevel) {
  Rng rng(3);
  const auto cfg = testing::small_config();
  PixelDecoder pd(cfg, rng);
  for (auto& l : pd.lateral) testing::set_identity(l);
  for (auto& s : pd.smooth) identity_conv(s);
  testing::set_identity(pd.mask_proj);
  const auto f32 = rand_t({1, 1, 16}, rng);
  const auto out = pd(FusedPyramid{Tensor::zeros({8, 8, 16}), Tensor::zeros({4, 4, 16}), Tensor::zeros({2, 2, 16}), f32});
  // Every finer level is a constant copy of the single coarse pixel.
  for (const auto* t : {&out.refined[2], &out.refined[1], &out.refined[0]}) {
    for (std::size_t px = 0; px < t->dim(0) * t->dim(1); ++px) {
      for (std::size_t c = 0; c < 16; ++c) ASSERT_EQ(t->at(px * 16 + c), f32.at(c));
    }
  }
  // The embedding is that pixel standardized over channels.
  double mean = 0.0, var = 0.0;
  for (std::size_t c = 0; c < 16; ++c) mean += f32.at(c) / 16.0;
  for (std::size_t c = 0; c < 16; ++c) var += (f32.at(c) - mean) * (f32.at(c) - mean) / 16.0;
  const auto& e = out.pixel_embedding;
  for (std::size_t px = 0; px < e.dim(0) * e.dim(1); ++px) {
    for (std::size_t c = 0; c < 16; ++c) {
      ASSERT_NEAR(e.at(px * 16 + c), (f32.at(c) - mean) / std::sqrt(var + 1e-6), 1e-12);
    }
  }
}

TEST(PixelDecoder, RejectsMisalignedLevels) {
  Rng rng(4);
  PixelDecoder pd(testing::small_config(), rng);
  EXPECT_THROW(pd(FusedPyramid{Tensor::zeros({8, 8, 16}), Tensor::zeros({4, 4, 16}), Tensor::zeros({3, 3, 16}),
                               Tensor::zeros({1, 1, 16})}),
               ag::ShapeError);
  EXPECT_THROW(pd(FusedPyramid{Tensor::zeros({8, 8, 15}), Tensor::zeros({4, 4, 16}), Tensor::zeros({2, 2, 16}),
                               Tensor::zeros({1, 1, 16})}),
               ag::ShapeError);
}

TEST(TransformerDecoder, ZeroDepthAppliesHeadsToInitialQueries) {
  Rng rng(5);
  auto cfg = testing::small_config();
  cfg.decoder_layers = 0;
  TransformerDecoder dec(cfg, rng);
  const std::array<Tensor, 3> refined{rand_t({4, 4, 16}, rng), rand_t({2, 2, 16}, rng), rand_t({1, 1, 16}, rng)};
  const auto out = dec(refined);
  const auto expected = dec.heads(dec.query_feat);
  testing::expect_bitwise(out.class_logits, expected.class_logits);
  testing::expect_bitwise(out.mask_embed, expected.mask_embed);
}

TEST(TransformerDecoder, OutputShapes) {
  Rng rng(6);
  ModelConfig cfg;
  TransformerDecoder dec(cfg, rng);
  const std::array<Tensor, 3> refined{rand_t({8, 8, 64}, rng), rand_t({4, 4, 64}, rng), rand_t({2, 2, 64}, rng)};
  const auto out = dec(refined);
  EXPECT_EQ(out.class_logits.shape(), (ag::Shape{16, 10}));
  EXPECT_EQ(out.mask_embed.shape(), (ag::Shape{16, 64}));
}

// One query and one token per level: each softmax is over a single key, so
// every attention reduces to its value path.
TEST(TransformerDecoder, SingleKeyHandTrace) {
  Rng rng(7);
  auto cfg = testing::small_config();
  cfg.num_queries = 1;
  cfg.decoder_layers = 1;
  TransformerDecoder dec(cfg, rng);
  const std::array<Tensor, 3> refined{rand_t({1, 1, 16}, rng), rand_t({1, 1, 16}, rng), rand_t({1, 1, 16}, rng)};
  const auto& layer = dec.layers[0];
  const auto value = nn::to_tokens(refined[2]);
  auto t = layer.norm_cross(ag::add(dec.query_feat, layer.cross_attn.out(layer.cross_attn.v(value))));
  auto u = layer.norm_self(ag::add(t, layer.self_attn.out(layer.self_attn.v(t))));
  auto q = layer.norm_ffn(ag::add(u, layer.ffn(u)));
  const auto expected = dec.heads(q);
  const auto out = dec(refined);
  testing::expect_near(out.class_logits, expected.class_logits, 1e-12);
  testing::expect_near(out.mask_embed, expected.mask_embed, 1e-12);
}

TEST(TransformerDecoder, LayersCycleCoarseToFine) {
  Rng rng(8);
  auto cfg = testing::small_config();
  cfg.decoder_layers = 1;
  TransformerDecoder dec(cfg, rng);
  std::array<Tensor, 3> refined{rand_t({4, 4, 16}, rng), rand_t({2, 2, 16}, rng), rand_t({1, 1, 16}, rng)};
  const auto base = dec(refined);
  // The first layer reads stride 32 only.
  refined[0] = rand_t({4, 4, 16}, rng);
  refined[1] = rand_t({2, 2, 16}, rng);
  testing::expect_bitwise(dec(refined).class_logits, base.class_logits);
}

TEST(PredictMasks, OneHotZeroAndLoopOracle) {
  Rng rng(9);
  const auto ep = rand_t({3, 4, 5}, rng);
  std::vector<double> onehot(2 * 5, 0.0);
  onehot[0 * 5 + 2] = 1.0;
  onehot[1 * 5 + 4] = 1.0;
  const auto m = predict_masks(Tensor::from({2, 5}, onehot), ep);
  for (std::size_t px = 0; px < 12; ++px) {
    EXPECT_EQ(m.at(px), ep.at(px * 5 + 2));
    EXPECT_EQ(m.at(12 + px), ep.at(px * 5 + 4));
  }
  const auto zero = predict_masks(Tensor::zeros({2, 5}), ep);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);

  const auto em = rand_t({3, 5}, rng);
  const auto r = predict_masks(em, ep);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += em.at(q * 5 + c) * ep.at((y * 4 + x) * 5 + c);
        EXPECT_NEAR(r.at(q * 12 + y * 4 + x), s, 1e-13);
      }
    }
  }
  EXPECT_THROW(predict_masks(Tensor::zeros({2, 4}), ep), ag::ShapeError);
}

TEST(PredictMasks, BilinearInEachArgument) {
  Rng rng(10);
  const auto ep = rand_t({2, 2, 4}, rng), a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
  const auto lhs = predict_masks(ag::add(ag::scale(a, 2.0), b), ep);
  const auto rhs = ag::add(ag::scale(predict_masks(a, ep), 2.0), predict_masks(b, ep));
  testing::expect_near(lhs, rhs, 1e-12);
  const auto e2 = rand_t({2, 2, 4}, rng);
  testing::expect_near(predict_masks(a, ag::add(ep, e2)), ag::add(predict_masks(a, ep), predict_masks(a, e2)), 1e-12);
}

TEST(AssembleSemantic, ConfidentSingleQuery) {
  // N = 3: classes 0, 1 and the no-object column.
  const auto logits = Tensor::from({1, 3}, {50.0, -50.0, -50.0});
  const auto masks = Tensor::full({1, 4}, 30.0);
  const auto sem = assemble_semantic(logits, masks, 2, 2, 8, 8);
  EXPECT_EQ(sem.labels, std::vector<std::uint8_t>(64, 0));
}

TEST(AssembleSemantic, TwoDisjointRegions) {
  // Query 0 covers the left column with class 2, query 1 the right with class 1.
  const auto logits = Tensor::from({2, 4}, {-20.0, -20.0, 20.0, -20.0, -20.0, 20.0, -20.0, -20.0});
  const auto masks = Tensor::from({2, 4}, {30.0, -30.0, 30.0, -30.0, -30.0, 30.0, -30.0, 30.0});
  const auto sem = assemble_semantic(logits, masks, 2, 2, 2, 2);
  EXPECT_EQ(sem.labels, (std::vector<std::uint8_t>{2, 1, 2, 1}));
}

TEST(AssembleSemantic, TiesBreakToLowestClass) {
  const auto sem = assemble_semantic(Tensor::zeros({3, 5}), Tensor::zeros({3, 16}), 4, 4, 16, 16);
  EXPECT_EQ(sem.labels, std::vector<std::uint8_t>(256, 0));
}

TEST(AssembleSemantic, NeverEmitsNoObject) {
  // All mass on the no-object column still yields a real class.
  const auto logits = Tensor::from({1, 3}, {0.0, 1.0, 40.0});
  const auto sem = assemble_semantic(logits, Tensor::full({1, 4}, 5.0), 2, 2, 2, 2);
  for (auto v : sem.labels) EXPECT_LT(v, 2);
  EXPECT_EQ(sem.labels[0], 1);
}

TEST(AssembleSemantic, ScoresIgnoreClassLogitShift) {
  Rng rng(11);
  const auto logits = rand_t({4, 5}, rng), masks = rand_t({4, 9}, rng);
  std::vector<double> shifted(logits.data().begin(), logits.data().end());
  for (std::size_t q = 0; q < 4; ++q) {
    const double c = rng.uniform(-10.0, 10.0);
    for (std::size_t k = 0; k < 5; ++k) shifted[q * 5 + k] += c;
  }
  testing::expect_near(semantic_scores(Tensor::from({4, 5}, shifted), masks, 3, 3),
                       semantic_scores(logits, masks, 3, 3), 1e-12);
}

TEST(AuxHead, ChannelAndSpatialContract) {
  Rng rng(12);
  ModelConfig cfg;
  ASSERT_EQ(cfg.num_classes, 10);
  AuxHead head(cfg, rng);
  EXPECT_EQ(head(rand_t({16, 16, 64}, rng)).shape(), (ag::Shape{16, 16, 9}));
  nn::ParamSet ps;
  head.collect(ps, "");
  testing::zero_biases(ps);
  const auto zero = head(Tensor::zeros({16, 16, 64}));
  for (double v : zero.data()) ASSERT_EQ(v, 0.0);
}

TEST(AuxHead, InferencePathDoesNotUseIt) {
  const auto cfg = testing::small_config();
  HapNet model(cfg);
  Rng rng(13);
  const auto rgb = rand_t({32, 32, 3}, rng), th = rand_t({32, 32, 3}, rng);
  const auto before = model.predict(rgb, th);
  nn::ParamSet aux;
  model.aux.collect(aux, "");
  for (const auto& t : testing::tensors(aux)) testing::fill(t, std::numeric_limits<double>::quiet_NaN());
  EXPECT_EQ(model.predict(rgb, th).labels, before.labels);
  const auto params = model.parameters(false);
  for (const auto& [name, t] : params.items()) EXPECT_NE(name.rfind("aux", 0), 0u) << name;
}

TEST(MaskDecoderGradients, Components) {
  Rng rng(14);
  const auto cfg = testing::small_config();
  {
    const auto em = rand_t({3, 6}, rng), ep = rand_t({2, 3, 6}, rng), pr = testing::unit_projection({3, 6}, rng);
    testing::expect_gradients([&] { return ag::sum(ag::mul(predict_masks(em, ep), pr)); }, {em, ep}, rng);
  }
  {
    AuxHead head(cfg, rng);
    nn::ParamSet ps;
    head.collect(ps, "");
    const auto f4 = rand_t({6, 6, 16}, rng), pr = testing::unit_projection({6, 6, 4}, rng);
    testing::expect_gradients([&] { return ag::sum(ag::mul(head(f4), pr)); }, testing::tensors(ps), rng);
  }
  {
    DecoderLayer layer(16, 2, rng);
    nn::ParamSet ps;
    layer.collect(ps, "");
    const auto q = rand_t({4, 16}, rng), pos = rand_t({4, 16}, rng), kv = rand_t({6, 16}, rng);
    const auto pr = testing::unit_projection({4, 16}, rng);
    testing::expect_gradients([&] { return ag::sum(ag::mul(layer(q, pos, kv, kv), pr)); }, testing::tensors(ps), rng,
                              40);
  }
  {
    PixelDecoder pd(cfg, rng);
    TransformerDecoder dec(cfg, rng);
    nn::ParamSet ps;
    pd.collect(ps, "pixel");
    dec.collect(ps, "decoder");
    const auto pyr = random_pyramid(32, 32, 16, rng);
    const auto pr = testing::unit_projection({4, 64}, rng), pc = testing::unit_projection({4, 5}, rng);
    testing::expect_gradients(
        [&] {
          const auto p = pd(pyr);
          const auto qo = dec(p.refined);
          return ag::add(ag::sum(ag::mul(predict_masks(qo.mask_embed, p.pixel_embedding), pr)),
                         ag::sum(ag::mul(qo.class_logits, pc)));
        },
        testing::tensors(ps), rng, 60);
  }
}

}  // namespace
}  // namespace hapnet
