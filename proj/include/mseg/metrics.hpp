#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mseg/tensor.hpp"

namespace mseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct ScalarMetrics {
  double dice = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
  double f2 = 0;
  double accuracy = 0;
};

/// 1 where prob >= threshold, else 0. Threshold must lie in [0, 1].
template <typename S>
Tensor4<S> binarize(const Tensor4<S>& prob, double threshold);

/// Pixel counts of a binary prediction against a binary ground truth.
template <typename S>
ConfusionCounts confusion(const Tensor4<S>& pred, const Tensor4<S>& gt);

/// Dice 2tp/(2tp+fp+fn), IoU tp/(tp+fp+fn), precision tp/(tp+fp), recall tp/(tp+fn),
/// F2 5pr/(4p+r), accuracy (tp+tn)/total. A ratio whose denominator is zero is 1
/// when tp = fp = fn = 0 and 0 otherwise.
ScalarMetrics scalar_metrics(const ConfusionCounts& c);

/// Mean absolute error between a probability map and a binary mask.
template <typename S>
double mae(const Tensor4<S>& prob, const Tensor4<S>& gt);

struct ImageMetrics {
  std::string id;
  ConfusionCounts counts;
  ScalarMetrics metrics;
  double mae = 0;
};

struct MetricReport {
  double threshold = 0.5;
  std::vector<ImageMetrics> images;
  /// Arithmetic means over images (not pooled counts).
  ScalarMetrics mean;
  double mean_mae = 0;
};

struct EvalPair {
  std::string id;
  Tensor4f prob;
  Tensor4f gt;
};

/// Per-image metrics plus their means. A prediction whose size differs from its
/// ground truth is resized bilinearly before thresholding.
MetricReport evaluate_pairs(std::vector<EvalPair> pairs, double threshold);

/// Pairs prediction and ground-truth masks by id; throws listing unmatched ids.
MetricReport evaluate_dataset(const std::vector<std::pair<std::string, Tensor4f>>& preds,
                              const std::vector<std::pair<std::string, Tensor4f>>& gts, double threshold);

/// Keys: threshold, mdice, miou, precision, recall, f2, accuracy, mae, images[].
nlohmann::ordered_json to_json(const MetricReport& report);
std::string format_table(const MetricReport& report);

}  // namespace mseg
