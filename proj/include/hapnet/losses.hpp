#pragma once

// Query/segment matching and the compound training objective.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "hapnet/autograd.hpp"

namespace hapnet {

using ag::Tensor;

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LossWeights {
  double bce = 5.0;
  double dice = 5.0;
  double cls = 2.0;
  double ce = 0.4;
  double no_object = 0.1;
};

struct Segment {
  int class_id = 0;
  std::vector<double> mask;  // {0,1}, row-major at mask resolution
};

struct GroundTruthSegments {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Segment> segments;  // one per class present, ascending class id
};

// Nearest downsample by an integer factor: out[y][x] = labels[f*y][f*x].
std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::size_t rows, std::size_t cols,
                                            std::size_t factor);

// Per-class union masks of a label map already at mask resolution. Ignored
// pixels are 0 in every mask. Throws on labels >= real_classes (other than 255).
GroundTruthSegments segments_from_labels(std::span<const std::uint8_t> labels, std::size_t rows, std::size_t cols,
                                         int real_classes);

// Plain-double forms used by matching (no graph is recorded).
double bce_value(std::span<const double> logits, std::span<const double> target);
double dice_value(std::span<const double> prob, std::span<const double> target, double eps = 1.0);

// Cost of assigning query q to a segment. class_logits [Q,N], mask_logits [Q,P].
double match_cost(const Tensor& class_logits, const Tensor& mask_logits, std::size_t q, const Segment& gt,
                  const LossWeights& w);

// Row-major [Q, G] cost matrix.
std::vector<double> cost_matrix(const Tensor& class_logits, const Tensor& mask_logits, const GroundTruthSegments& gt,
                                const LossWeights& w);

struct Assignment {
  std::vector<std::size_t> gt_to_query;
  double total_cost = 0.0;  // summed in gt order
};

// Minimum-cost injective gt -> query map over a row-major [Q, G] matrix
// (rows are queries). Among optimal maps the lexicographically smallest
// gt_to_query is returned. Throws std::invalid_argument when G > Q.
Assignment hungarian(std::span<const double> costs, std::size_t queries, std::size_t gts);

Tensor bce_mask_loss(const Tensor& logits, std::span<const double> target);
Tensor dice_mask_loss(const Tensor& logits, std::span<const double> target, double eps = 1.0);

// Cross-entropy over all Q queries: matched queries target their segment
// class with weight 1, the rest target the last ("no object") column with
// weight w.no_object. Weighted mean.
Tensor cls_loss(const Tensor& class_logits, const Assignment& match, const GroundTruthSegments& gt,
                const LossWeights& w);

struct AuxLoss {
  Tensor value;
  bool all_ignored = false;
};

// aux_logits [h, w, K]; labels at the same resolution, 255 skipped.
AuxLoss aux_ce_loss(const Tensor& aux_logits, std::span<const std::uint8_t> labels);

struct LossParts {
  Tensor bce;
  Tensor dice;
  Tensor cls;
  Tensor ce;  // undefined when the auxiliary term is off
};

// Matched mask terms averaged over matched pairs (zero when there are none)
// plus the class term.
LossParts matched_losses(const Tensor& class_logits, const Tensor& mask_logits, const GroundTruthSegments& gt,
                         const LossWeights& w, Assignment* match_out = nullptr);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Tensor total_loss(const LossParts& parts, const LossWeights& w);
double total_loss(double bce, double dice, double cls, double ce, const LossWeights& w);

}  // namespace hapnet
