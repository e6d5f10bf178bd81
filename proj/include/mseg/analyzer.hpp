#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mseg/decoder.hpp"

namespace mseg {

/// Cost of one graph node. Traffic counts each tensor once at 4 bytes/element.
struct LayerStat {
  NodeId id = 0;
  std::string name;
  std::string op;
  Shape4 output;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t input_bytes = 0;
  std::int64_t output_bytes = 0;
  std::int64_t weight_bytes = 0;

  std::int64_t traffic_bytes() const { return input_bytes + output_bytes + weight_bytes; }
};

struct Summary {
  Shape4 input;
  std::vector<LayerStat> layers;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t total_traffic = 0;
};

/// Per-node params, MACs and traffic for a graph with a single input.
/// Conv MACs are out_elems * (in_ch / groups) * kh * kw; batch norm costs one
/// MAC per output element; every other op costs none.
Summary summarize(const Graph& graph, const Shape4& input_shape);

/// Bytes moved by the channel concatenations of a summary.
std::int64_t concat_traffic(const Summary& summary);

nlohmann::ordered_json to_json(const Summary& summary);
std::string format_table(const Summary& summary);

struct BenchReport {
  Shape4 input;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
  std::uint64_t seed = 0;
  std::vector<double> latencies_ms;
  double mean_ms = 0;
  double median_ms = 0;
  double p95_ms = 0;
  /// 1 / mean latency, batch 1.
  double fps = 0;
  std::string platform;
};

/// Times forward_mseg on a fixed random input (image decode and mask encode are
/// excluded). Requires warmup >= 1 and iters >= 10.
BenchReport bench(const InferenceModel& model, Index size, int warmup, int iters, int threads, std::uint64_t seed = 0);

/// CPU model, core count, OS and compiler of the running process.
std::string platform_string();

nlohmann::ordered_json to_json(const BenchReport& report);
std::string format_table(const BenchReport& report);

}  // namespace mseg
