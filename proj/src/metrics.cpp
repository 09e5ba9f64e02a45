#include "softguard/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "softguard/numerics.hpp"

namespace softguard {

ConfusionMatrix::ConfusionMatrix(int classes) {
  if (classes < 2) {
    throw std::invalid_argument("ConfusionMatrix: need at least 2 classes");
  }
  counts_ = Counts::Zero(classes, classes);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt,
                                 std::uint8_t ignore_label) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    throw std::invalid_argument("accumulate_confusion: shape mismatch");
  }
  const int k = classes();
  const auto p = flat_labels(pred);
  const auto g = flat_labels(gt);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] >= k) {
      throw std::invalid_argument("accumulate_confusion: prediction label " +
                                  std::to_string(p[i]) + " out of range");
    }
    if (g[i] == ignore_label) continue;
    if (g[i] >= k) {
      throw std::invalid_argument("accumulate_confusion: ground-truth label " +
                                  std::to_string(g[i]) + " out of range");
    }
    ++counts_(g[i], p[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes() != classes()) {
    throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
  }
  counts_ += other.counts_;
}

ConfusionMatrix accumulate_confusion(const LabelMap& pred, const LabelMap& gt,
                                     int classes, std::uint8_t ignore_label) {
  ConfusionMatrix cm(classes);
  cm.accumulate(pred, gt, ignore_label);
  return cm;
}

std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  const auto& c = cm.counts();
  std::vector<std::optional<double>> out;
  for (int k = 0; k < cm.classes(); ++k) {
    const std::int64_t tp = c(k, k);
    const std::int64_t fn = c.row(k).sum() - tp;
    const std::int64_t fp = c.col(k).sum() - tp;
    const std::int64_t denom = tp + fp + fn;
    if (denom == 0) {
      out.emplace_back();
    } else {
      out.emplace_back(static_cast<double>(tp) / static_cast<double>(denom));
    }
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int defined = 0;
  for (const auto& iou : iou_per_class(cm)) {
    if (iou) {
      sum += *iou;
      ++defined;
    }
  }
  if (defined == 0) {
    throw std::invalid_argument("miou: no class has a defined IoU");
  }
  return 100.0 * sum / defined;
}

double ood_bg_iou(const LabelMap& pred) {
  if (pred.size() == 0) {
    throw std::invalid_argument("ood_bg_iou: empty prediction");
  }
  const auto background = (flat_labels(pred) == kBackgroundClass).count();
  // Same rounding as 100 * iou_per_class()[0] against an all-background truth.
  return 100.0 * (static_cast<double>(background) / static_cast<double>(pred.size()));
}

ReliabilityBins::ReliabilityBins(int bins) {
  if (bins < 1) {
    throw std::invalid_argument("ReliabilityBins: bin count must be >= 1");
  }
  bins_.resize(static_cast<std::size_t>(bins));
}

int ReliabilityBins::bin_index(double confidence, int bins) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw std::invalid_argument("ReliabilityBins: confidence outside [0, 1]");
  }
  int m = static_cast<int>(std::ceil(confidence * bins)) - 1;
  m = std::clamp(m, 0, bins - 1);
  // The product above can land one bin off near a boundary; settle against
  // the boundaries as they are computed everywhere else.
  while (m > 0 && confidence <= static_cast<double>(m) / bins) --m;
  while (m < bins - 1 && confidence > static_cast<double>(m + 1) / bins) ++m;
  return m;
}

void ReliabilityBins::add(double confidence, bool correct) {
  Bin& b = bins_[static_cast<std::size_t>(bin_index(confidence, size()))];
  ++b.count;
  b.confidence_sum += confidence;
  if (correct) ++b.correct_count;
}

void ReliabilityBins::merge(const ReliabilityBins& other) {
  if (other.size() != size()) {
    throw std::invalid_argument("ReliabilityBins::merge: bin count mismatch");
  }
  for (std::size_t m = 0; m < bins_.size(); ++m) {
    bins_[m].count += other.bins_[m].count;
    bins_[m].confidence_sum += other.bins_[m].confidence_sum;
    bins_[m].correct_count += other.bins_[m].correct_count;
  }
}

std::int64_t ReliabilityBins::total() const {
  std::int64_t n = 0;
  for (const auto& b : bins_) n += b.count;
  return n;
}

double ece(const ReliabilityBins& bins) {
  const std::int64_t n = bins.total();
  if (n == 0) return 0.0;
  double gap = 0.0;
  for (int m = 0; m < bins.size(); ++m) {
    const auto& b = bins.bin(m);
    if (b.count == 0) continue;
    gap += std::abs(static_cast<double>(b.correct_count) - b.confidence_sum);
  }
  return 100.0 * gap / static_cast<double>(n);
}

double ece(std::span<const double> confidences, const std::vector<bool>& correct,
           int bins) {
  if (confidences.size() != correct.size()) {
    throw std::invalid_argument("ece: confidences and correctness differ in length");
  }
  if (confidences.empty()) {
    throw std::invalid_argument("ece: no samples");
  }
  ReliabilityBins acc(bins);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    acc.add(confidences[i], correct[i]);
  }
  return ece(acc);
}

std::vector<ReliabilityRow> reliability_table(const ReliabilityBins& bins) {
  std::vector<ReliabilityRow> rows;
  const int m_total = bins.size();
  for (int m = 0; m < m_total; ++m) {
    const auto& b = bins.bin(m);
    if (b.count == 0) continue;
    const double n = static_cast<double>(b.count);
    rows.push_back({static_cast<double>(m) / m_total,
                    static_cast<double>(m + 1) / m_total, b.count,
                    b.confidence_sum / n,
                    static_cast<double>(b.correct_count) / n});
  }
  return rows;
}

std::string reliability_csv(const std::vector<ReliabilityRow>& rows,
                            const std::string& provenance_comment) {
  std::ostringstream out;
  out << std::setprecision(17);
  if (!provenance_comment.empty()) out << "# " << provenance_comment << "\n";
  out << "bin_lower,bin_upper,count,mean_confidence,accuracy\n";
  for (const auto& r : rows) {
    out << r.lower << "," << r.upper << "," << r.count << ","
        << r.mean_confidence << "," << r.accuracy << "\n";
  }
  return out.str();
}

void MetricsReport::validate() const {
  auto check = [](double v, const std::string& what) {
    if (!(v >= 0.0 && v <= 100.0)) {
      throw std::logic_error("report: " + what + " = " + std::to_string(v) +
                             " outside [0, 100]");
    }
  };
  for (const auto& d : datasets) {
    if (d.miou) check(*d.miou, d.dataset_id + ".miou");
    if (d.bg_iou) check(*d.bg_iou, d.dataset_id + ".bg_iou");
    check(d.ece, d.dataset_id + ".ece");
    check(d.expected_nd, d.dataset_id + ".expected_nd");
  }
}

const DatasetMetrics& MetricsReport::dataset(const std::string& id) const {
  for (const auto& d : datasets) {
    if (d.dataset_id == id) return d;
  }
  throw std::out_of_range("report has no dataset '" + id + "'");
}

}  // namespace softguard
