#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mseg/decoder.hpp"
#include "mseg/metrics.hpp"

namespace mseg {

/// Rotated ellipse; pixel (x, y) is inside when its center (x + 0.5, y + 0.5)
/// satisfies q < 1 for the normalized radius q.
struct Blob {
  double cx = 0;
  double cy = 0;
  double rx = 1;
  double ry = 1;
  double angle = 0;
  std::array<float, 3> color{};

  /// Squared normalized radius of point (px, py).
  double q(double px, double py) const;
  bool contains(double px, double py) const { return q(px, py) < 1.0; }
};

struct BlobSample {
  /// 1x3xSxS, normalized with the default image statistics.
  Tensor4f image;
  /// 1x1xSxS, exactly the union of the blobs' strict interiors.
  Tensor4f mask;
  std::vector<Blob> blobs;
};

struct BlobDataset {
  std::uint64_t seed = 0;
  Index size = 64;
  std::vector<BlobSample> samples;

  /// FNV-1a over all image and mask bytes.
  std::uint64_t hash() const;
};

/// Soft-edged elliptical blobs (1 to 3) on a textured background. Sample i
/// depends only on (seed, i); mask area is 2% to 30% of the image.
BlobDataset gen_blobs(std::uint64_t seed, Index n, Index size);
BlobSample gen_blob_sample(std::uint64_t seed, Index index, Index size);

enum class TrainPolicy {
  /// SGD, lr 1e-2, random horizontal and vertical flips.
  Sgd,
  /// Adam, lr 1e-4, no augmentation.
  Adam,
};

std::string_view to_string(TrainPolicy p);
TrainPolicy parse_policy(std::string_view s);

struct TrainCfg {
  TrainPolicy policy = TrainPolicy::Adam;
  std::string scale = "tiny";
  Index epochs = 30;
  Index batch_size = 4;
  std::uint64_t seed = 0;
  /// Overrides the policy's learning rate when set (>= 0).
  double learning_rate = -1;
  double momentum = 0;
  /// Each gradient element is clamped to [-grad_clip, grad_clip]; 0 disables.
  double grad_clip = 0.5;
  double threshold = 0.5;
  /// Fraction of samples (by index, from the front) used for training.
  double train_fraction = 0.8;
  /// Cap on optimizer steps, 0 for none.
  Index max_steps = 0;

  double resolved_lr() const;
};

struct EpochLog {
  Index epoch = 0;
  double train_loss = 0;
  double seconds = 0;
};

struct TrainResult {
  ModelCfg model;
  WeightStore weights;
  std::vector<EpochLog> epochs;
  Index steps = 0;
  Index train_count = 0;
  /// Metrics on the held-out samples (on the training samples when none are held out).
  MetricReport held_out;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains the named preset on `data`. Batch norm uses frozen statistics.
/// Throws NumericError naming the epoch when the loss becomes non-finite.
TrainResult train_toy(const TrainCfg& cfg, const BlobDataset& data, const EpochCallback& on_epoch = {});

/// Thresholded metrics of `weights` on the given samples.
MetricReport evaluate_samples(const Graph& graph, const TensorMap<float>& weights,
                              std::span<const BlobSample> samples, double threshold);

}  // namespace mseg
