#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hapnet/losses.hpp"
#include "test_util.hpp"

namespace hapnet {
namespace {

using testing::rand_t;

// Independent exhaustive search: returns the optimal total and the
// lexicographically smallest optimal map.
std::pair<double, std::vector<std::size_t>> exhaustive(const std::vector<double>& c, std::size_t q, std::size_t g) {
  std::vector<std::size_t> perm(q);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> arg;
  do {
    double s = 0.0;
    for (std::size_t j = 0; j < g; ++j) s += c[perm[j] * g + j];
    std::vector<std::size_t> head(perm.begin(), perm.begin() + static_cast<long>(g));
    if (s < best || (s == best && head < arg)) {
      best = s;
      arg = head;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best, arg};
}

TEST(Hungarian, TwoByTwo) {
  const std::vector<double> c{1, 2, 3, 1};
  const auto a = hungarian(c, 2, 2);
  EXPECT_EQ(a.gt_to_query, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, AllZeroTiesToIdentity) {
  const auto a = hungarian(std::vector<double>(9, 0.0), 3, 3);
  EXPECT_EQ(a.gt_to_query, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Hungarian, RandomSixByFourMatchesExhaustive) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> c(24);
    for (auto& v : c) v = rng.uniform(-3.0, 3.0);
    const auto a = hungarian(c, 6, 4);
    const auto [best, arg] = exhaustive(c, 6, 4);
    EXPECT_NEAR(a.total_cost, best, 1e-12);
    EXPECT_EQ(a.gt_to_query, arg);
  }
}

TEST(Hungarian, IntegerTiesPickLexicographicallySmallest) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t q = 1 + rng.below(6), g = 1 + rng.below(q);
    std::vector<double> c(q * g);
    for (auto& v : c) v = static_cast<double>(rng.below(3));
    const auto a = hungarian(c, q, g);
    const auto [best, arg] = exhaustive(c, q, g);
    EXPECT_EQ(a.total_cost, best);
    EXPECT_EQ(a.gt_to_query, arg);
  }
}

TEST(Hungarian, NeverWorseThanAnyEnumeratedMap) {
  Rng rng(3);
  const std::size_t q = 7, g = 3;
  std::vector<double> c(q * g);
  for (auto& v : c) v = rng.normal();
  const double total = hungarian(c, q, g).total_cost;
  for (std::size_t a = 0; a < q; ++a) {
    for (std::size_t b = 0; b < q; ++b) {
      for (std::size_t d = 0; d < q; ++d) {
        if (a == b || a == d || b == d) continue;
        EXPECT_LE(total, c[a * g] + c[b * g + 1] + c[d * g + 2] + 1e-12);
      }
    }
  }
}

TEST(Hungarian, RejectsMoreSegmentsThanQueries) {
  EXPECT_THROW(hungarian(std::vector<double>(6, 0.0), 2, 3), std::invalid_argument);
  EXPECT_TRUE(hungarian({}, 3, 0).gt_to_query.empty());
}

TEST(Dice, FormulaCases) {
  EXPECT_NEAR(dice_value(std::vector<double>(4, 1.0), std::vector<double>(4, 1.0)), 0.0, 1e-15);
  EXPECT_NEAR(dice_value(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 1.0 - 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(dice_value(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0}), 1.0 - 2.0 / 3.0, 1e-15);
  const auto t = ag::dice_loss(Tensor::from({2}, {0.5, 0.5}), std::vector<double>{1, 0});
  EXPECT_NEAR(t.item(), 1.0 - 2.0 / 3.0, 1e-15);
}

TEST(Dice, RangeAndPermutationSymmetry) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(10), g(10);
    for (std::size_t i = 0; i < 10; ++i) {
      p[i] = rng.uniform();
      g[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    }
    const double d = dice_value(p, g);
    EXPECT_GE(d, 0.0);
    EXPECT_LT(d, 1.0);
    std::vector<std::size_t> idx(10);
    std::iota(idx.begin(), idx.end(), 0);
    std::reverse(idx.begin(), idx.end());
    std::vector<double> pp(10), gp(10);
    for (std::size_t i = 0; i < 10; ++i) {
      pp[i] = p[idx[i]];
      gp[i] = g[idx[i]];
    }
    EXPECT_NEAR(dice_value(pp, gp), d, 1e-15);
  }
}

TEST(Bce, ZeroLogitsGiveLog2) {
  const auto v = bce_mask_loss(Tensor::zeros({6}), std::vector<double>{1, 0, 1, 0, 0, 1});
  EXPECT_NEAR(v.item(), std::log(2.0), 1e-15);
}

TEST(Bce, SaturatedLogitsStayFinite) {
  const std::vector<double> g{1, 0, 1, 0};
  const auto v = bce_mask_loss(Tensor::from({4}, {50, -50, 50, -50}), g);
  EXPECT_TRUE(std::isfinite(v.item()));
  EXPECT_LT(v.item(), 1e-20);
  for (double z : {1e4, -1e4}) {
    EXPECT_TRUE(std::isfinite(bce_mask_loss(Tensor::full({4}, z), g).item()));
  }
}

TEST(Bce, MatchesDirectEvaluation) {
  Rng rng(5);
  const auto z = rand_t({9}, rng, 2.0);
  std::vector<double> g(9);
  for (auto& v : g) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  long double ref = 0.0L;
  for (std::size_t i = 0; i < 9; ++i) {
    const long double s = 1.0L / (1.0L + std::exp(-static_cast<long double>(z.at(i))));
    ref -= g[i] * std::log(s) + (1.0L - g[i]) * std::log(1.0L - s);
  }
  EXPECT_NEAR(bce_mask_loss(z, g).item(), static_cast<double>(ref / 9.0L), 1e-10);
  EXPECT_NEAR(bce_value(z.data(), g), static_cast<double>(ref / 9.0L), 1e-10);
}

GroundTruthSegments one_segment(int cls, std::vector<double> mask, std::size_t rows, std::size_t cols) {
  return GroundTruthSegments{rows, cols, {Segment{cls, std::move(mask)}}};
}

TEST(MatchCost, PerfectQueryApproachesClassTerm) {
  const LossWeights w;
  const auto logits = Tensor::from({1, 3}, {60.0, 0.0, 0.0});
  const auto masks = Tensor::from({1, 4}, {40.0, -40.0, 40.0, -40.0});
  const Segment seg{0, {1, 0, 1, 0}};
  EXPECT_NEAR(match_cost(logits, masks, 0, seg, w), -2.0, 1e-12);
}

TEST(MatchCost, UniformPlugIn) {
  const LossWeights w;
  const std::size_t n = 4;
  const auto logits = Tensor::zeros({1, n});
  const auto masks = Tensor::zeros({1, 4});
  const Segment seg{1, {1, 1, 0, 0}};
  // sigmoid(0) = 0.5: dice = 1 - (2*1 + 1) / (2 + 2 + 1).
  const double expected = -2.0 / n + 5.0 * std::log(2.0) + 5.0 * (1.0 - 3.0 / 5.0);
  EXPECT_NEAR(match_cost(logits, masks, 0, seg, w), expected, 1e-12);
}

TEST(MatchCost, LinearInWeightsAndShiftInvariant) {
  Rng rng(6);
  const auto logits = rand_t({2, 5}, rng), masks = rand_t({2, 6}, rng);
  const Segment seg{2, {1, 0, 0, 1, 1, 0}};
  LossWeights w, w2;
  w2.bce *= 2;
  w2.dice *= 2;
  w2.cls *= 2;
  const double c = match_cost(logits, masks, 1, seg, w);
  EXPECT_NEAR(match_cost(logits, masks, 1, seg, w2), 2.0 * c, 1e-12);
  std::vector<double> shifted(logits.data().begin(), logits.data().end());
  for (auto& v : shifted) v += 3.5;
  EXPECT_NEAR(match_cost(Tensor::from({2, 5}, shifted), masks, 1, seg, w), c, 1e-12);
}

TEST(ClsLoss, PerfectMatchedIsZero) {
  const LossWeights w;
  const auto logits = Tensor::from({2, 3}, {80.0, 0.0, 0.0, 0.0, 80.0, 0.0});
  const GroundTruthSegments gt{1, 1, {Segment{0, {1}}, Segment{1, {1}}}};
  const auto v = cls_loss(logits, Assignment{{0, 1}, 0.0}, gt, w);
  EXPECT_NEAR(v.item(), 0.0, 1e-12);
}

TEST(ClsLoss, WeightedMeanWithUnmatchedQuery) {
  const LossWeights w;
  const auto logits = Tensor::from({2, 3}, {80.0, 0.0, 0.0, 0.0, 0.0, 0.0});
  const auto gt = one_segment(0, {1}, 1, 1);
  const auto v = cls_loss(logits, Assignment{{0}, 0.0}, gt, w);
  EXPECT_NEAR(v.item(), (0.0 + 0.1 * std::log(3.0)) / 1.1, 1e-12);

  // Doubling the no-object weight only rescales the unmatched term.
  LossWeights w2 = w;
  w2.no_object = 0.2;
  EXPECT_NEAR(cls_loss(logits, Assignment{{0}, 0.0}, gt, w2).item(), 0.2 * std::log(3.0) / 1.2, 1e-12);
}

TEST(ClsLoss, RejectsInvalidClass) {
  const auto logits = Tensor::zeros({2, 3});
  EXPECT_THROW(cls_loss(logits, Assignment{{0}, 0.0}, one_segment(2, {1}, 1, 1), LossWeights{}), std::out_of_range);
}

TEST(AuxCe, PerfectUniformAndIgnored) {
  std::vector<double> perfect(4 * 3, -60.0);
  const std::vector<std::uint8_t> labels{0, 1, 2, 1};
  for (std::size_t p = 0; p < 4; ++p) perfect[p * 3 + labels[p]] = 60.0;
  EXPECT_NEAR(aux_ce_loss(Tensor::from({2, 2, 3}, perfect), labels).value.item(), 0.0, 1e-12);

  const auto uniform = aux_ce_loss(Tensor::zeros({2, 2, 9}), std::vector<std::uint8_t>{0, 8, 255, 4});
  EXPECT_NEAR(uniform.value.item(), std::log(9.0), 1e-12);
  EXPECT_FALSE(uniform.all_ignored);

  const auto ignored = aux_ce_loss(Tensor::zeros({2, 2, 9}), std::vector<std::uint8_t>(4, kIgnoreLabel));
  EXPECT_EQ(ignored.value.item(), 0.0);
  EXPECT_TRUE(ignored.all_ignored);

  EXPECT_THROW(aux_ce_loss(Tensor::zeros({2, 2, 9}), std::vector<std::uint8_t>{0, 9, 0, 0}), std::out_of_range);
}

TEST(TotalLoss, Arithmetic) {
  const LossWeights w;
  EXPECT_EQ(total_loss(0.1, 0.1, 0.1, 0.1, w), 1.24);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0, 0.0, w), 0.0);
  LossWeights no_aux = w;
  no_aux.ce = 0.0;
  EXPECT_EQ(total_loss(0.3, 0.2, 0.7, 5.0, no_aux), total_loss(0.3, 0.2, 0.7, 0.0, w));
  const LossParts parts{Tensor::scalar(0.1), Tensor::scalar(0.1), Tensor::scalar(0.1), Tensor::scalar(0.1)};
  EXPECT_EQ(total_loss(parts, w).item(), 1.24);
}

TEST(TotalLoss, RejectsNonFiniteParts) {
  const LossParts parts{Tensor::scalar(std::nan("")), Tensor::scalar(0.1), Tensor::scalar(0.1), {}};
  EXPECT_THROW(total_loss(parts, LossWeights{}), NonFiniteLoss);
}

TEST(Segments, DownsampleAndSplit) {
  // 4x4 labels, factor 2 keeps the top-left pixel of each 2x2 cell.
  const std::vector<std::uint8_t> labels{0, 9, 1, 9, 9, 9, 9, 9, 2, 9, 255, 9, 9, 9, 9, 9};
  const auto small = downsample_labels(labels, 4, 4, 2);
  EXPECT_EQ(small, (std::vector<std::uint8_t>{0, 1, 2, 255}));
  const auto gt = segments_from_labels(small, 2, 2, 3);
  ASSERT_EQ(gt.segments.size(), 3u);
  EXPECT_EQ(gt.segments[0].mask, (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(gt.segments[2].class_id, 2);
  EXPECT_EQ(gt.segments[2].mask, (std::vector<double>{0, 0, 1, 0}));
  EXPECT_THROW(segments_from_labels(std::vector<std::uint8_t>{3}, 1, 1, 3), std::out_of_range);
}

TEST(MatchedLosses, MasksAveragedOverMatches) {
  const LossWeights w;
  const auto logits = Tensor::from({3, 3}, {9.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 9.0});
  const auto masks = Tensor::from({3, 2}, {5.0, -5.0, -5.0, 5.0, 0.0, 0.0});
  const GroundTruthSegments gt{1, 2, {Segment{0, {1, 0}}, Segment{1, {0, 1}}}};
  Assignment m;
  const auto parts = matched_losses(logits, masks, gt, w, &m);
  EXPECT_EQ(m.gt_to_query, (std::vector<std::size_t>{0, 1}));
  const double expected_bce = (bce_value(std::vector<double>{5, -5}, gt.segments[0].mask) +
                               bce_value(std::vector<double>{-5, 5}, gt.segments[1].mask)) /
                              2.0;
  EXPECT_NEAR(parts.bce.item(), expected_bce, 1e-14);

  const auto empty = matched_losses(logits, masks, GroundTruthSegments{1, 2, {}}, w);
  EXPECT_EQ(empty.bce.item(), 0.0);
  EXPECT_EQ(empty.dice.item(), 0.0);
}

TEST(LossGradients, AllTerms) {
  Rng rng(7);
  const LossWeights w;
  auto z = rand_t({12}, rng, 2.0), logits = rand_t({4, 5}, rng), aux = rand_t({2, 3, 4}, rng);
  for (auto* t : {&z, &logits, &aux}) t->set_requires_grad(true);
  std::vector<double> g(12);
  for (auto& v : g) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const GroundTruthSegments gt{3, 4, {Segment{1, g}, Segment{3, std::vector<double>(12, 1.0)}}};
  const Assignment match{{2, 0}, 0.0};
  const std::vector<std::uint8_t> lab{0, 1, 2, 3, 255, 1};
  testing::expect_gradients([&] { return bce_mask_loss(z, g); }, {z}, rng);
  testing::expect_gradients([&] { return dice_mask_loss(z, g); }, {z}, rng);
  testing::expect_gradients([&] { return cls_loss(logits, match, gt, w); }, {logits}, rng);
  testing::expect_gradients([&] { return aux_ce_loss(aux, lab).value; }, {aux}, rng);
}

}  // namespace
}  // namespace hapnet
