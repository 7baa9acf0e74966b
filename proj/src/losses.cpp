#include "hapnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hapnet {

namespace {

void check_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ag::ShapeError(std::string(what) + ": size " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

// Dense O(n^3) assignment with potentials over an n x m matrix, n <= m.
// Returns row -> column. Entries equal to +inf are forbidden.
std::vector<std::size_t> solve_assignment(const std::vector<double>& a, std::size_t n, std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      if (j1 == 0) throw std::invalid_argument("hungarian: no feasible assignment");
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

double assignment_cost(std::span<const double> costs, std::size_t gts, const std::vector<std::size_t>& g2q) {
  double total = 0.0;
  for (std::size_t g = 0; g < g2q.size(); ++g) total += costs[g2q[g] * gts + g];
  return total;
}

}  // namespace

std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::size_t rows, std::size_t cols,
                                            std::size_t factor) {
  check_same_size(labels.size(), rows * cols, "downsample_labels");
  if (factor == 0 || rows % factor != 0 || cols % factor != 0) {
    throw ag::ShapeError("downsample_labels: factor does not divide the label map");
  }
  const std::size_t h = rows / factor, w = cols / factor;
  std::vector<std::uint8_t> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = labels[(y * factor) * cols + x * factor];
  }
  return out;
}

GroundTruthSegments segments_from_labels(std::span<const std::uint8_t> labels, std::size_t rows, std::size_t cols,
                                         int real_classes) {
  check_same_size(labels.size(), rows * cols, "segments_from_labels");
  std::vector<std::vector<double>> masks(static_cast<std::size_t>(real_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l == kIgnoreLabel) continue;
    if (l >= real_classes) {
      throw std::out_of_range("segments_from_labels: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(real_classes - 1) + "]");
    }
    auto& m = masks[l];
    if (m.empty()) m.assign(labels.size(), 0.0);
    m[i] = 1.0;
  }
  GroundTruthSegments gt{rows, cols, {}};
  for (int c = 0; c < real_classes; ++c) {
    auto& m = masks[static_cast<std::size_t>(c)];
    if (!m.empty()) gt.segments.push_back({c, std::move(m)});
  }
  return gt;
}

double bce_value(std::span<const double> logits, std::span<const double> target) {
  check_same_size(logits.size(), target.size(), "bce");
  if (logits.empty()) throw ag::ShapeError("bce: empty mask");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    s += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<double>(logits.size());
}

double dice_value(std::span<const double> prob, std::span<const double> target, double eps) {
  check_same_size(prob.size(), target.size(), "dice");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * target[i];
    sp += prob[i];
    sg += target[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

double match_cost(const Tensor& class_logits, const Tensor& mask_logits, std::size_t q, const Segment& gt,
                  const LossWeights& w) {
  const std::size_t n = class_logits.dim(1);
  const std::size_t p = mask_logits.dim(1);
  if (q >= class_logits.dim(0) || q >= mask_logits.dim(0)) throw ag::ShapeError("match_cost: query out of range");
  check_same_size(gt.mask.size(), p, "match_cost mask");
  if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= n) {
    throw std::out_of_range("match_cost: class " + std::to_string(gt.class_id));
  }
  const auto row = class_logits.data().subspan(q * n, n);
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double prob = std::exp(row[static_cast<std::size_t>(gt.class_id)] - mx) / z;

  const auto logits = mask_logits.data().subspan(q * p, p);
  std::vector<double> sig(p);
  for (std::size_t i = 0; i < p; ++i) sig[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  return w.cls * -prob + w.bce * bce_value(logits, gt.mask) + w.dice * dice_value(sig, gt.mask);
}

std::vector<double> cost_matrix(const Tensor& class_logits, const Tensor& mask_logits, const GroundTruthSegments& gt,
                                const LossWeights& w) {
  const std::size_t q = class_logits.dim(0), g = gt.segments.size();
  std::vector<double> c(q * g);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < g; ++j) c[i * g + j] = match_cost(class_logits, mask_logits, i, gt.segments[j], w);
  }
  return c;
}

Assignment hungarian(std::span<const double> costs, std::size_t queries, std::size_t gts) {
  if (gts > queries) {
    throw std::invalid_argument("hungarian: " + std::to_string(gts) + " segments but only " +
                                std::to_string(queries) + " queries");
  }
  check_same_size(costs.size(), queries * gts, "hungarian");
  Assignment out;
  if (gts == 0) return out;
  for (double c : costs) {
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
  }

  // Transposed problem: gts are rows.
  std::vector<double> a(gts * queries);
  for (std::size_t q = 0; q < queries; ++q) {
    for (std::size_t g = 0; g < gts; ++g) a[g * queries + q] = costs[q * gts + g];
  }
  auto best = solve_assignment(a, gts, queries);
  const double optimum = assignment_cost(costs, gts, best);
  double scale = 0.0;
  for (double c : costs) scale = std::max(scale, std::abs(c));
  const double tol = 1e-12 * std::max(1.0, scale) * static_cast<double>(gts);

  // Lexicographic refinement: fix each gt to the smallest query that still
  // admits an optimal completion.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> fixed;
  std::vector<char> taken(queries, 0);
  double fixed_cost = 0.0;
  for (std::size_t g = 0; g < gts; ++g) {
    bool chosen = false;
    for (std::size_t q = 0; q < queries && !chosen; ++q) {
      if (taken[q]) continue;
      const double head = fixed_cost + costs[q * gts + g];
      double tail = 0.0;
      std::vector<std::size_t> rest;
      const std::size_t remaining = gts - g - 1;
      if (remaining > 0) {
        std::vector<double> sub(remaining * queries);
        for (std::size_t r = 0; r < remaining; ++r) {
          for (std::size_t qq = 0; qq < queries; ++qq) {
            sub[r * queries + qq] = (taken[qq] || qq == q) ? inf : a[(g + 1 + r) * queries + qq];
          }
        }
        // Forbidden entries are replaced by a large finite penalty so the
        // potentials stay finite.
        double big = 1.0;
        for (double c : a) big += std::abs(c);
        big *= 4.0;
        for (auto& s : sub) {
          if (std::isinf(s)) s = big;
        }
        rest = solve_assignment(sub, remaining, queries);
        for (std::size_t r = 0; r < remaining; ++r) tail += sub[r * queries + rest[r]];
      }
      if (head + tail <= optimum + tol) {
        fixed.push_back(q);
        taken[q] = 1;
        fixed_cost = head;
        chosen = true;
      }
    }
    if (!chosen) {
      // Rounding pushed every candidate past the tolerance; keep the solver's map.
      out.gt_to_query = best;
      out.total_cost = optimum;
      return out;
    }
  }
  out.gt_to_query = fixed;
  out.total_cost = assignment_cost(costs, gts, fixed);
  return out;
}

Tensor bce_mask_loss(const Tensor& logits, std::span<const double> target) {
  check_same_size(logits.numel(), target.size(), "bce_mask_loss");
  return ag::sigmoid_bce_mean(logits, target);
}

Tensor dice_mask_loss(const Tensor& logits, std::span<const double> target, double eps) {
  check_same_size(logits.numel(), target.size(), "dice_mask_loss");
  return ag::dice_loss(ag::sigmoid(logits), target, eps);
}

Tensor cls_loss(const Tensor& class_logits, const Assignment& match, const GroundTruthSegments& gt,
                const LossWeights& w) {
  const std::size_t q = class_logits.dim(0);
  const int no_object = static_cast<int>(class_logits.dim(1)) - 1;
  std::vector<int> target(q, no_object);
  std::vector<double> weight(q, w.no_object);
  check_same_size(match.gt_to_query.size(), gt.segments.size(), "cls_loss assignment");
  for (std::size_t g = 0; g < match.gt_to_query.size(); ++g) {
    const std::size_t qi = match.gt_to_query[g];
    if (qi >= q) throw std::out_of_range("cls_loss: matched query " + std::to_string(qi));
    const int c = gt.segments[g].class_id;
    if (c < 0 || c >= no_object) throw std::out_of_range("cls_loss: invalid class index " + std::to_string(c));
    target[qi] = c;
    weight[qi] = 1.0;
  }
  return ag::weighted_cross_entropy(class_logits, target, weight);
}

AuxLoss aux_ce_loss(const Tensor& aux_logits, std::span<const std::uint8_t> labels) {
  if (aux_logits.rank() != 3) throw ag::ShapeError("aux_ce_loss: logits must be [h, w, K]");
  const std::size_t px = aux_logits.dim(0) * aux_logits.dim(1);
  const std::size_t k = aux_logits.dim(2);
  check_same_size(labels.size(), px, "aux_ce_loss labels");
  std::vector<int> target(px);
  std::vector<double> weight(px, 1.0);
  bool any = false;
  for (std::size_t i = 0; i < px; ++i) {
    const auto l = labels[i];
    if (l == kIgnoreLabel) {
      target[i] = -1;
      continue;
    }
    if (l >= k) throw std::out_of_range("aux_ce_loss: label " + std::to_string(l) + " with " + std::to_string(k) +
                                        " classes");
    target[i] = l;
    any = true;
  }
  AuxLoss out;
  out.all_ignored = !any;
  out.value = ag::weighted_cross_entropy(ag::reshape(aux_logits, {px, k}), target, weight);
  return out;
}

LossParts matched_losses(const Tensor& class_logits, const Tensor& mask_logits, const GroundTruthSegments& gt,
                         const LossWeights& w, Assignment* match_out) {
  const std::size_t q = class_logits.dim(0), g = gt.segments.size();
  if (mask_logits.dim(0) != q || mask_logits.dim(1) != gt.rows * gt.cols) {
    throw ag::ShapeError("matched_losses: masks " + ag::shape_str(mask_logits.shape()) + " vs ground truth " +
                         std::to_string(gt.rows) + "x" + std::to_string(gt.cols));
  }
  Assignment match;
  {
    ag::NoGradGuard no_grad;
    const auto costs = cost_matrix(class_logits, mask_logits, gt, w);
    for (double c : costs) {
      if (!std::isfinite(c)) throw NonFiniteLoss("matching cost is not finite");
    }
    match = hungarian(costs, q, g);
  }
  LossParts parts;
  if (g == 0) {
    parts.bce = Tensor::scalar(0.0);
    parts.dice = Tensor::scalar(0.0);
  } else {
    const std::size_t p = mask_logits.dim(1);
    std::vector<Tensor> bce, dice;
    for (std::size_t j = 0; j < g; ++j) {
      const std::size_t qi = match.gt_to_query[j];
      auto row = ag::slice_rows(mask_logits, qi, qi + 1);
      row = ag::reshape(row, {p});
      bce.push_back(bce_mask_loss(row, gt.segments[j].mask));
      dice.push_back(dice_mask_loss(row, gt.segments[j].mask));
    }
    const double inv = 1.0 / static_cast<double>(g);
    auto acc_b = bce[0], acc_d = dice[0];
    for (std::size_t j = 1; j < g; ++j) {
      acc_b = ag::add(acc_b, bce[j]);
      acc_d = ag::add(acc_d, dice[j]);
    }
    parts.bce = ag::scale(acc_b, inv);
    parts.dice = ag::scale(acc_d, inv);
  }
  parts.cls = cls_loss(class_logits, match, gt, w);
  if (match_out != nullptr) *match_out = std::move(match);
  return parts;
}

Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  auto check = [](const Tensor& t, const char* name) {
    if (!t.defined()) return;
    if (!std::isfinite(t.item())) throw NonFiniteLoss(std::string("loss part ") + name + " is not finite");
  };
  check(parts.bce, "bce");
  check(parts.dice, "dice");
  check(parts.cls, "cls");
  check(parts.ce, "ce");
  auto total = ag::add(ag::scale(parts.bce, w.bce), ag::scale(parts.dice, w.dice));
  total = ag::add(total, ag::scale(parts.cls, w.cls));
  if (parts.ce.defined()) total = ag::add(total, ag::scale(parts.ce, w.ce));
  return total;
}

double total_loss(double bce, double dice, double cls, double ce, const LossWeights& w) {
  for (double v : {bce, dice, cls, ce}) {
    if (!std::isfinite(v)) throw NonFiniteLoss("loss part is not finite");
  }
  return w.bce * bce + w.dice * dice + w.cls * cls + w.ce * ce;
}

}  // namespace hapnet
