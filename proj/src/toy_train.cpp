#include "mseg/toy_train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "mseg/image_io.hpp"

namespace mseg {

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, Index index) {
  const auto i = static_cast<std::uint64_t>(index);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32), 0x6d736567u};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

}  // namespace

double Blob::q(double px, double py) const {
  const double dx = px - cx;
  const double dy = py - cy;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double u = (dx * c + dy * s) / rx;
  const double v = (-dx * s + dy * c) / ry;
  return u * u + v * v;
}

std::uint64_t BlobDataset::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& s : samples) {
    fnv1a(h, s.image.data(), static_cast<std::size_t>(s.image.size()) * sizeof(float));
    fnv1a(h, s.mask.data(), static_cast<std::size_t>(s.mask.size()) * sizeof(float));
  }
  return h;
}

BlobSample gen_blob_sample(std::uint64_t seed, Index index, Index size) {
  if (size < 64) throw ConfigError("gen_blobs: image size must be at least 64");
  auto rng = sample_rng(seed, index);
  const double S = static_cast<double>(size);
  const Index pixels = size * size;

  BlobSample out;
  out.mask = Tensor4f(1, 1, size, size);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 10000) throw Error("gen_blobs: could not place blobs within the area bounds");
    out.blobs.clear();
    const int count = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int b = 0; b < count; ++b) {
      Blob blob;
      blob.rx = uniform(rng, 0.07, 0.22) * S;
      blob.ry = uniform(rng, 0.07, 0.22) * S;
      blob.cx = uniform(rng, 0.15, 0.85) * S;
      blob.cy = uniform(rng, 0.15, 0.85) * S;
      blob.angle = uniform(rng, 0.0, std::numbers::pi);
      blob.color = {static_cast<float>(uniform(rng, 0.80, 0.98)), static_cast<float>(uniform(rng, 0.55, 0.80)),
                    static_cast<float>(uniform(rng, 0.30, 0.55))};
      out.blobs.push_back(blob);
    }
    Index area = 0;
    std::vector<Index> own(out.blobs.size(), 0);
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) + 0.5;
        const double py = static_cast<double>(y) + 0.5;
        bool inside = false;
        for (std::size_t b = 0; b < out.blobs.size(); ++b) {
          if (out.blobs[b].contains(px, py)) {
            inside = true;
            ++own[b];
          }
        }
        out.mask(0, 0, y, x) = inside ? 1.0f : 0.0f;
        area += inside ? 1 : 0;
      }
    }
    const double frac = static_cast<double>(area) / static_cast<double>(pixels);
    const bool every_blob_visible = std::all_of(own.begin(), own.end(), [](Index n) { return n > 0; });
    if (frac >= 0.02 && frac <= 0.30 && every_blob_visible) break;
  }

  // Background: reddish base, a few low-frequency waves and pixel noise.
  std::array<double, 3> base{uniform(rng, 0.45, 0.65), uniform(rng, 0.20, 0.35), uniform(rng, 0.18, 0.30)};
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    waves.push_back({uniform(rng, -6.0, 6.0) / S, uniform(rng, -6.0, 6.0) / S, uniform(rng, 0.0, 2 * std::numbers::pi),
                     uniform(rng, 0.02, 0.06)});
  }
  std::normal_distribution<double> noise(0.0, 0.03);
  ImageBuffer img{size, size, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(pixels * 3))};
  Tensor4f raw(1, 3, size, size);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(2 * std::numbers::pi * (w.fx * px + w.fy * py) + w.phase);
      std::array<double, 3> v{};
      for (int c = 0; c < 3; ++c) v[c] = base[c] + tex + noise(rng);
      for (const auto& blob : out.blobs) {
        const double r = std::sqrt(blob.q(px, py));
        // Soft edge about one pixel wide, centered on the boundary.
        const double dist = (1.0 - r) * std::min(blob.rx, blob.ry);
        const double alpha = 1.0 / (1.0 + std::exp(-dist / 0.6));
        const double shade = 1.0 - 0.15 * std::min(r, 1.0);
        for (int c = 0; c < 3; ++c) v[c] = (1.0 - alpha) * v[c] + alpha * blob.color[c] * shade;
      }
      for (int c = 0; c < 3; ++c) {
        const double q = std::clamp(v[c], 0.0, 1.0);
        img.samples[static_cast<std::size_t>((y * size + x) * 3 + c)] = static_cast<std::uint8_t>(std::lround(q * 255.0));
      }
    }
  }
  out.image = preprocess(img, size, size);
  return out;
}

BlobDataset gen_blobs(std::uint64_t seed, Index n, Index size) {
  if (n < 1) throw ConfigError("gen_blobs: need at least one sample");
  BlobDataset d;
  d.seed = seed;
  d.size = size;
  d.samples.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d.samples.push_back(gen_blob_sample(seed, i, size));
  return d;
}

std::string_view to_string(TrainPolicy p) { return p == TrainPolicy::Sgd ? "sgd" : "adam"; }

TrainPolicy parse_policy(std::string_view s) {
  if (s == "sgd" || s == "sgd-policy") return TrainPolicy::Sgd;
  if (s == "adam" || s == "adam-policy") return TrainPolicy::Adam;
  throw ConfigError("unknown training policy '" + std::string(s) + "' (expected sgd or adam)");
}

double TrainCfg::resolved_lr() const {
  if (learning_rate >= 0) return learning_rate;
  return policy == TrainPolicy::Sgd ? 1e-2 : 1e-4;
}

MetricReport evaluate_samples(const Graph& graph, const TensorMap<float>& weights, std::span<const BlobSample> samples,
                              double threshold) {
  std::vector<EvalPair> pairs;
  pairs.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Tensor4f prob = forward_mseg(graph, weights, samples[i].image);
    char id[32];
    std::snprintf(id, sizeof id, "sample%05zu", i);
    pairs.push_back({id, std::move(prob), samples[i].mask});
  }
  return evaluate_pairs(std::move(pairs), threshold);
}

TrainResult train_toy(const TrainCfg& cfg, const BlobDataset& data, const EpochCallback& on_epoch) {
  if (cfg.epochs < 0) throw ConfigError("train_toy: epochs must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("train_toy: batch size must be positive");
  if (cfg.grad_clip < 0) throw ConfigError("train_toy: gradient clip must be non-negative");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0)) {
    throw ConfigError("train_toy: train fraction must lie in (0, 1]");
  }
  if (data.samples.empty()) throw ConfigError("train_toy: empty dataset");

  TrainResult result;
  result.model = preset(cfg.scale);
  const Model model = build_mseg(result.model);
  const Graph& graph = model.graph;
  TensorMap<float> params = to_tensor_map<float>(init_weights(graph, cfg.seed));

  const auto n = static_cast<Index>(data.samples.size());
  const Index n_train =
      std::clamp<Index>(static_cast<Index>(std::llround(cfg.train_fraction * static_cast<double>(n))), 1, n);
  result.train_count = n_train;
  const std::span<const BlobSample> all(data.samples);
  const auto train = all.first(static_cast<std::size_t>(n_train));
  const auto held = all.subspan(static_cast<std::size_t>(n_train));

  // Batch norm statistics come from a fixed calibration batch and stay frozen.
  {
    const Index count = std::min<Index>(n_train, 32);
    Tensor4f batch(count, 3, data.size, data.size);
    for (Index b = 0; b < count; ++b) {
      const Tensor4f& img = train[static_cast<std::size_t>(b)].image;
      std::copy(img.data(), img.data() + img.size(), batch.data() + b * img.size());
    }
    calibrate_batchnorm(graph, params, std::span<const Tensor4f>(&batch, 1));
  }

  const auto lr = static_cast<float>(cfg.resolved_lr());
  const auto clip = static_cast<float>(cfg.grad_clip);
  OptimState<float> opt = cfg.policy == TrainPolicy::Sgd ? OptimState<float>::sgd(lr, static_cast<float>(cfg.momentum))
                                                         : OptimState<float>::adam(lr);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  const Index size = data.size;
  const NodeId logits_node = graph.output("logits");

  bool stop = false;
  for (Index epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index batches = 0;
    for (Index begin = 0; begin < n_train; begin += cfg.batch_size) {
      const Index count = std::min(cfg.batch_size, n_train - begin);
      Tensor4f images(count, 3, size, size);
      Tensor4f masks(count, 1, size, size);
      for (Index b = 0; b < count; ++b) {
        const BlobSample& s = train[static_cast<std::size_t>(order[static_cast<std::size_t>(begin + b)])];
        Tensor4f img = s.image;
        Tensor4f msk = s.mask;
        if (cfg.policy == TrainPolicy::Sgd) {
          if (rng() & 1u) {
            img = flip(img, true);
            msk = flip(msk, true);
          }
          if (rng() & 1u) {
            img = flip(img, false);
            msk = flip(msk, false);
          }
        }
        std::copy(img.data(), img.data() + img.size(), images.data() + b * img.size());
        std::copy(msk.data(), msk.data() + msk.size(), masks.data() + b * msk.size());
      }

      float loss_value = 0.0f;
      TensorMap<float> grads;
      try {
        Tape<float> tape;
        const ParamBinding binding = bind_weights(tape, graph, params);
        const ValueId x = tape.constant(std::move(images));
        const auto ids = record_graph(tape, graph, binding, std::span<const ValueId>(&x, 1));
        const ValueId loss = tape.loss_seg(ids[logits_node], masks);
        loss_value = tape.value(loss)[0];
        if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
        const Gradients<float> g = tape.backward(loss);
        for (const auto& name : binding.trainable) {
          Tensor4f t = g.of(binding.ids.at(name));
          if (clip > 0) t.array() = t.array().max(-clip).min(clip);
          grads.emplace(name, std::move(t));
        }
      } catch (const NumericError& e) {
        throw NumericError("train_toy: diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }

      TensorMap<float> trainable;
      for (auto& [name, _] : grads) trainable.emplace(name, std::move(params.at(name)));
      optimizer_step(opt, trainable, grads);
      for (auto& [name, t] : trainable) params.at(name) = std::move(t);

      loss_sum += loss_value;
      ++batches;
      ++result.steps;
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(std::max<Index>(batches, 1));
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }

  result.held_out = evaluate_samples(graph, params, held.empty() ? train : held, cfg.threshold);
  result.weights = to_weight_store(graph, params);
  return result;
}

}  // namespace mseg
