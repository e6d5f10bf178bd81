#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mseg/autodiff.hpp"
#include "mseg/graph.hpp"

namespace mseg {

struct WeightEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

/// Ordered named-tensor container, serialized as MSEG-W1.
///
/// Layout (little-endian):
///   bytes 0..7   magic "MSEGW1\0\0"
///   bytes 8..15  header length L (uint64)
///   L bytes      UTF-8 JSON: {"entries":[{"name","shape","dtype":"f32","offset"}...]}
///   payload      float32 data; entry offsets are relative to the payload start
class WeightStore {
 public:
  void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data);

  const std::vector<WeightEntry>& entries() const { return entries_; }
  const WeightEntry* find(std::string_view name) const;
  std::int64_t element_count() const;
  std::size_t size() const { return entries_.size(); }

  /// Bitwise comparison of names, shapes and payloads.
  friend bool operator==(const WeightStore& a, const WeightStore& b);

 private:
  std::vector<WeightEntry> entries_;
};

inline constexpr char kWeightMagic[8] = {'M', 'S', 'E', 'G', 'W', '1', '\0', '\0'};

std::vector<std::uint8_t> write_weights(const WeightStore& store);
WeightStore read_weights(std::span<const std::uint8_t> bytes);

void save_weights(const WeightStore& store, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path);

/// Converts entries to 4-D tensors (trailing extents padded with 1).
template <typename S>
TensorMap<S> to_tensor_map(const WeightStore& store);

/// Packs tensors in the order of the graph's weight specs, using the spec shapes.
WeightStore to_weight_store(const Graph& graph, const TensorMap<float>& tensors);

/// He-normal conv weights, zero biases, identity batch-norm statistics.
WeightStore init_weights(const Graph& graph, std::uint64_t seed);

/// Lists spec/store disagreements (missing, extra, wrong shape); empty when they match.
std::vector<std::string> diff_against_graph(const Graph& graph, const WeightStore& store);

}  // namespace mseg
