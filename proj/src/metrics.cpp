#include "hapnet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace hapnet {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred) {
  if (gt.size() != pred.size()) {
    throw std::invalid_argument("accumulate: gt has " + std::to_string(gt.size()) + " pixels, prediction " +
                                std::to_string(pred.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 255) continue;
    if (pred[i] >= k_) throw std::out_of_range("accumulate: prediction " + std::to_string(pred[i]) + " out of range");
    if (gt[i] >= k_) throw std::out_of_range("accumulate: ground truth " + std::to_string(gt[i]) + " out of range");
    ++counts_[gt[i] * k_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw std::invalid_argument("merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ClassMetrics per_class(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  ClassMetrics m{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0), std::vector<bool>(k, false)};
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = row + col - tp;
    // Absent: nothing labeled and nothing predicted as c. A class that is
    // only predicted has an IoU of 0 but no defined accuracy.
    m.acc[c] = row == 0 ? std::nan("") : static_cast<double>(tp) / static_cast<double>(row);
    if (uni == 0) continue;
    m.present[c] = true;
    m.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return m;
}

MeanMetrics reduce(const ClassMetrics& m) {
  MeanMetrics out;
  std::size_t n = 0, n_acc = 0;
  for (std::size_t c = 0; c < m.present.size(); ++c) {
    if (!m.present[c]) continue;
    out.miou += m.iou[c];
    ++n;
    if (!std::isnan(m.acc[c])) {
      out.macc += m.acc[c];
      ++n_acc;
    }
  }
  if (n == 0) throw std::domain_error("reduce: no class is present");
  out.macc = n_acc == 0 ? std::nan("") : out.macc / static_cast<double>(n_acc);
  out.miou /= static_cast<double>(n);
  return out;
}

std::string metrics_csv(const ClassMetrics& m, const std::vector<std::string>& names) {
  auto fmt = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::string out = "class,acc,iou\n";
  for (std::size_t c = 0; c < m.present.size(); ++c) {
    out += c < names.size() ? names[c] : std::to_string(c);
    out += m.present[c] ? "," + fmt(m.acc[c]) + "," + fmt(m.iou[c]) + "\n" : ",nan,nan\n";
  }
  const auto mean = reduce(m);
  out += "mean," + fmt(mean.macc) + "," + fmt(mean.miou) + "\n";
  return out;
}

}  // namespace hapnet
