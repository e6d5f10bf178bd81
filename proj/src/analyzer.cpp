#include "mseg/analyzer.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace mseg {

namespace {

constexpr std::int64_t kBytes = 4;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

Summary summarize(const Graph& graph, const Shape4& input_shape) {
  if (graph.inputs().size() != 1) {
    throw ConfigError("summarize: graph has " + std::to_string(graph.inputs().size()) + " inputs, expected 1");
  }
  const std::vector<Shape4> shapes = graph.infer_shapes({input_shape});
  Summary s;
  s.input = input_shape;
  for (NodeId id = 0; id < graph.size(); ++id) {
    const GraphNode& node = graph.node(id);
    LayerStat st;
    st.id = id;
    st.name = node.name;
    st.op = std::string(op_name(node.op));
    st.output = shapes[id];
    const std::int64_t out_elems = shapes[id].numel();
    for (const auto& w : node.weights) st.params += w.numel();
    st.weight_bytes = st.params * kBytes;
    st.output_bytes = out_elems * kBytes;
    // An upsample reads only its first input; the second supplies a size.
    const std::size_t data_inputs = std::holds_alternative<UpsampleOp>(node.op) ? 1 : node.inputs.size();
    for (std::size_t i = 0; i < data_inputs; ++i) st.input_bytes += shapes[node.inputs[i]].numel() * kBytes;
    std::visit(Overloaded{
                   [&](const ConvOp& op) {
                     st.macs = out_elems * (op.spec.in_ch / op.spec.groups) * op.spec.kernel.y * op.spec.kernel.x;
                   },
                   [&](const BatchNormOp&) { st.macs = out_elems; },
                   [&](const InputOp&) { st.output_bytes = 0; },
                   [](const auto&) {},
               },
               node.op);
    s.total_params += st.params;
    s.total_macs += st.macs;
    s.total_traffic += st.traffic_bytes();
    s.layers.push_back(std::move(st));
  }
  return s;
}

std::int64_t concat_traffic(const Summary& summary) {
  std::int64_t total = 0;
  for (const auto& l : summary.layers) {
    if (l.op == "concat") total += l.traffic_bytes();
  }
  return total;
}

nlohmann::ordered_json to_json(const Summary& s) {
  nlohmann::ordered_json j;
  j["input"] = {s.input.n, s.input.c, s.input.h, s.input.w};
  j["total_params"] = s.total_params;
  j["total_macs"] = s.total_macs;
  j["total_traffic_bytes"] = s.total_traffic;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : s.layers) {
    nlohmann::ordered_json e;
    e["id"] = l.id;
    e["name"] = l.name;
    e["op"] = l.op;
    e["output"] = {l.output.n, l.output.c, l.output.h, l.output.w};
    e["params"] = l.params;
    e["macs"] = l.macs;
    e["traffic_bytes"] = l.traffic_bytes();
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

std::string format_table(const Summary& s) {
  std::ostringstream os;
  char buf[320];
  std::snprintf(buf, sizeof buf, "%5s  %-36s %-10s %-18s %12s %14s %14s\n", "id", "node", "op", "output", "params",
                "macs", "traffic(B)");
  os << buf;
  for (const auto& l : s.layers) {
    std::snprintf(buf, sizeof buf, "%5zu  %-36s %-10s %-18s %12lld %14lld %14lld\n", l.id, l.name.substr(0, 36).c_str(),
                  l.op.c_str(), to_string(l.output).c_str(), static_cast<long long>(l.params),
                  static_cast<long long>(l.macs), static_cast<long long>(l.traffic_bytes()));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%5s  %-36s %-10s %-18s %12lld %14lld %14lld\n", "", "total", "", "",
                static_cast<long long>(s.total_params), static_cast<long long>(s.total_macs),
                static_cast<long long>(s.total_traffic));
  os << buf;
  std::snprintf(buf, sizeof buf, "input %s, %.3f M params, %.3f GMACs, %.1f MB traffic\n", to_string(s.input).c_str(),
                static_cast<double>(s.total_params) * 1e-6, static_cast<double>(s.total_macs) * 1e-9,
                static_cast<double>(s.total_traffic) / (1024.0 * 1024.0));
  os << buf;
  return os.str();
}

std::string platform_string() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  std::string os = "unknown os";
  utsname u{};
  if (uname(&u) == 0) os = std::string(u.sysname) + " " + u.release + " " + u.machine;
  std::ostringstream s;
  s << cpu << "; " << std::thread::hardware_concurrency() << " hw threads; " << os << "; ";
#if defined(__clang__)
  s << "clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  s << "gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#else
  s << "unknown compiler";
#endif
  return s.str();
}

BenchReport bench(const InferenceModel& model, Index size, int warmup, int iters, int threads, std::uint64_t seed) {
  if (warmup < 1) throw ConfigError("bench: warmup must be at least 1");
  if (iters < 10) throw ConfigError("bench: at least 10 measured iterations are required");
  if (threads < 1) throw ConfigError("bench: thread count must be positive");

  BenchReport r;
  r.input = Shape4{1, 3, size, size};
  r.warmup = warmup;
  r.iters = iters;
  r.threads = threads;
  r.seed = seed;
  r.platform = platform_string();

  Tensor4f x(r.input);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (Index i = 0; i < x.size(); ++i) x[i] = dist(rng);

  const int prev_threads = num_threads();
  set_num_threads(threads);
  using Clock = std::chrono::steady_clock;
  try {
    for (int i = 0; i < warmup; ++i) (void)forward_mseg(model.graph, model.weights, x);
    for (int i = 0; i < iters; ++i) {
      const auto t0 = Clock::now();
      (void)forward_mseg(model.graph, model.weights, x);
      const auto t1 = Clock::now();
      r.latencies_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  } catch (...) {
    set_num_threads(prev_threads);
    throw;
  }
  set_num_threads(prev_threads);

  std::vector<double> sorted = r.latencies_ms;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  r.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
  r.median_ms = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  r.p95_ms = sorted[std::max<std::size_t>(rank, 1) - 1];
  r.fps = 1000.0 / r.mean_ms;
  return r;
}

nlohmann::ordered_json to_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["input"] = {r.input.n, r.input.c, r.input.h, r.input.w};
  j["warmup"] = r.warmup;
  j["iters"] = r.iters;
  j["threads"] = r.threads;
  j["seed"] = r.seed;
  j["mean_ms"] = r.mean_ms;
  j["median_ms"] = r.median_ms;
  j["p95_ms"] = r.p95_ms;
  j["fps"] = r.fps;
  j["platform"] = r.platform;
  j["scope"] = "forward pass only; image decode, preprocessing and mask encode excluded";
  j["latencies_ms"] = r.latencies_ms;
  return j;
}

std::string format_table(const BenchReport& r) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "input      %s\n", to_string(r.input).c_str());
  os << buf;
  std::snprintf(buf, sizeof buf, "iterations %d measured, %d warmup, %d thread(s)\n", r.iters, r.warmup, r.threads);
  os << buf;
  std::snprintf(buf, sizeof buf, "latency    mean %.3f ms, median %.3f ms, p95 %.3f ms\n", r.mean_ms, r.median_ms,
                r.p95_ms);
  os << buf;
  std::snprintf(buf, sizeof buf, "fps        %.2f (1 / mean latency, batch 1, forward only)\n", r.fps);
  os << buf;
  os << "platform   " << r.platform << "\n";
  return os.str();
}

}  // namespace mseg
