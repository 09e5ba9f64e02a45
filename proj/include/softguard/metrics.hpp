#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "softguard/tensor_field.hpp"

namespace softguard {

/// counts(g, p): pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(int classes);

  int classes() const { return static_cast<int>(counts_.rows()); }
  const Counts& counts() const { return counts_; }
  std::int64_t total() const { return counts_.sum(); }

  /// Adds every pixel whose ground truth is not ignore_label.
  void accumulate(const LabelMap& pred, const LabelMap& gt,
                  std::uint8_t ignore_label = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    return a.counts_ == b.counts_;
  }

 private:
  Counts counts_;
};

ConfusionMatrix accumulate_confusion(const LabelMap& pred, const LabelMap& gt,
                                     int classes,
                                     std::uint8_t ignore_label = kIgnoreLabel);

/// TP / (TP + FP + FN) per class; nullopt when the denominator is zero.
std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm);

/// 100 x mean of the defined per-class IoUs.
double miou(const ConfusionMatrix& cm);

/// 100 x IoU of the background class against all-background ground truth,
/// which reduces to the fraction of pixels predicted background.
double ood_bg_iou(const LabelMap& pred);

/// Equal-width confidence bins over (0, 1]; bin m is (m/M, (m+1)/M], with a
/// confidence of exactly 0 assigned to bin 0.
class ReliabilityBins {
 public:
  struct Bin {
    std::int64_t count = 0;
    double confidence_sum = 0.0;
    std::int64_t correct_count = 0;
  };

  explicit ReliabilityBins(int bins = 15);

  static int bin_index(double confidence, int bins);

  void add(double confidence, bool correct);
  void merge(const ReliabilityBins& other);

  int size() const { return static_cast<int>(bins_.size()); }
  const Bin& bin(int m) const { return bins_[static_cast<std::size_t>(m)]; }
  std::int64_t total() const;

 private:
  std::vector<Bin> bins_;
};

/// 100 x sum_m (|B_m|/n) |acc(B_m) - conf(B_m)|. Zero for empty bins.
double ece(const ReliabilityBins& bins);

double ece(std::span<const double> confidences, const std::vector<bool>& correct,
           int bins = 15);

struct ReliabilityRow {
  double lower = 0.0;
  double upper = 0.0;
  std::int64_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

/// One row per non-empty bin.
std::vector<ReliabilityRow> reliability_table(const ReliabilityBins& bins);

std::string reliability_csv(const std::vector<ReliabilityRow>& rows,
                            const std::string& provenance_comment);

/// Metrics for one evaluated dataset. Percentages are in [0, 100].
struct DatasetMetrics {
  std::string dataset_id;
  std::string kind;  // "in-distribution", "noise" or "texture"
  std::int64_t scored_pixels = 0;
  std::vector<std::optional<double>> per_class_iou;
  std::optional<double> miou;
  std::optional<double> bg_iou;
  double ece = 0.0;
  double expected_nd = 0.0;
  std::vector<ReliabilityRow> reliability;
};

struct MetricsReport {
  std::string tool_version;
  std::string config_hash;
  std::string head_kind;
  std::uint64_t seed = 0;
  int ece_bins = 15;
  std::string id_softmax;
  std::string checkpoint_sha256;
  std::vector<DatasetMetrics> datasets;

  /// Throws std::logic_error when any percentage is outside [0, 100].
  void validate() const;
  const DatasetMetrics& dataset(const std::string& id) const;
};

}  // namespace softguard
