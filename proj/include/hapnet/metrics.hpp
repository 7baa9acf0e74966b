#pragma once

// Confusion-matrix based segmentation metrics (per-class recall and IoU).

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hapnet {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * k_ + pred); }
  std::uint64_t total() const;
  std::span<const std::uint64_t> counts() const { return counts_; }

  // Ignore pixels (255) in gt are skipped; a prediction outside [0, K) throws.
  void accumulate(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;  // rows = ground truth
};

// acc[c] is NaN when class c has no ground-truth pixels; present[c] is false
// when it has neither ground truth nor predictions. Means skip both cases.
struct ClassMetrics {
  std::vector<double> acc;
  std::vector<double> iou;
  std::vector<bool> present;
};

struct MeanMetrics {
  double macc = 0.0;
  double miou = 0.0;
};

ClassMetrics per_class(const ConfusionMatrix& cm);
// Throws std::domain_error when no class is present.
MeanMetrics reduce(const ClassMetrics& m);

// "class,acc,iou" header, one row per class (absent classes print "nan"),
// then a "mean" row. Class names are used when given.
std::string metrics_csv(const ClassMetrics& m, const std::vector<std::string>& names = {});

}  // namespace hapnet
