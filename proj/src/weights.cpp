#include "mseg/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

namespace mseg {

static_assert(std::endian::native == std::endian::little, "MSEG-W1 I/O assumes a little-endian host");

std::int64_t WeightEntry::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

void WeightStore::add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data) {
  if (find(name) != nullptr) throw ConfigError("duplicate weight entry '" + name + "'");
  for (auto d : shape) {
    if (d < 0) throw ShapeError("weight '" + name + "': negative extent");
  }
  WeightEntry e{std::move(name), std::move(shape), std::move(data)};
  if (e.numel() != static_cast<std::int64_t>(e.data.size())) {
    throw ShapeError("weight '" + e.name + "': " + std::to_string(e.data.size()) + " values for " +
                     std::to_string(e.numel()) + " elements");
  }
  entries_.push_back(std::move(e));
}

const WeightEntry* WeightStore::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::int64_t WeightStore::element_count() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.numel();
  return total;
}

bool operator==(const WeightStore& a, const WeightStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.name != y.name || x.shape != y.shape || x.data.size() != y.data.size()) return false;
    if (!x.data.empty() && std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

std::vector<std::uint8_t> write_weights(const WeightStore& store) {
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& e : store.entries()) {
    nlohmann::ordered_json j;
    j["name"] = e.name;
    j["shape"] = e.shape;
    j["dtype"] = "f32";
    j["offset"] = offset;
    entries.push_back(std::move(j));
    offset += e.data.size() * sizeof(float);
  }
  nlohmann::ordered_json header;
  header["entries"] = std::move(entries);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(16 + text.size() + offset);
  std::memcpy(out.data(), kWeightMagic, 8);
  const std::uint64_t len = text.size();
  std::memcpy(out.data() + 8, &len, 8);
  std::memcpy(out.data() + 16, text.data(), text.size());
  std::uint8_t* payload = out.data() + 16 + text.size();
  for (const auto& e : store.entries()) {
    if (e.data.empty()) continue;
    std::memcpy(payload, e.data.data(), e.data.size() * sizeof(float));
    payload += e.data.size() * sizeof(float);
  }
  return out;
}

WeightStore read_weights(std::span<const std::uint8_t> bytes) {
  using Kind = FormatError::Kind;
  if (bytes.size() < 16) {
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kWeightMagic, 8) != 0) {
      throw FormatError(Kind::BadMagic, "MSEG-W1: bad magic");
    }
    throw FormatError(Kind::Truncated, "MSEG-W1: file shorter than the 16-byte preamble");
  }
  if (std::memcmp(bytes.data(), kWeightMagic, 8) != 0) throw FormatError(Kind::BadMagic, "MSEG-W1: bad magic");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (header_len > bytes.size() - 16) throw FormatError(Kind::Truncated, "MSEG-W1: header runs past end of file");

  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 16), header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Kind::BadHeader, std::string("MSEG-W1: header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("entries") || !header["entries"].is_array()) {
    throw FormatError(Kind::BadHeader, "MSEG-W1: header lacks an 'entries' array");
  }

  const std::span<const std::uint8_t> payload = bytes.subspan(16 + header_len);
  WeightStore store;
  std::uint64_t expected_end = 0;
  std::uint64_t total = 0;
  for (const auto& j : header["entries"]) {
    std::string name;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;
    try {
      name = j.at("name").get<std::string>();
      shape = j.at("shape").get<std::vector<std::int64_t>>();
      if (j.at("dtype").get<std::string>() != "f32") {
        throw FormatError(Kind::BadHeader, "MSEG-W1: entry '" + name + "' has unsupported dtype");
      }
      offset = j.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(Kind::BadHeader, std::string("MSEG-W1: malformed entry: ") + e.what());
    }
    std::uint64_t numel = 1;
    for (auto d : shape) {
      if (d < 0) throw FormatError(Kind::BadHeader, "MSEG-W1: entry '" + name + "' has a negative extent");
      numel *= static_cast<std::uint64_t>(d);
    }
    const std::uint64_t nbytes = numel * sizeof(float);
    if (offset % 4 != 0) throw FormatError(Kind::Misaligned, "MSEG-W1: entry '" + name + "' offset not 4-byte aligned");
    if (offset < expected_end) {
      throw FormatError(Kind::Overlap, "MSEG-W1: entry '" + name + "' overlaps the previous entry");
    }
    if (offset + nbytes > payload.size()) {
      throw FormatError(Kind::Truncated, "MSEG-W1: payload truncated inside entry '" + name + "'");
    }
    std::vector<float> data(numel);
    if (numel != 0) std::memcpy(data.data(), payload.data() + offset, nbytes);
    expected_end = offset + nbytes;
    total += nbytes;
    try {
      store.add(std::move(name), std::move(shape), std::move(data));
    } catch (const Error& e) {
      throw FormatError(Kind::BadHeader, std::string("MSEG-W1: ") + e.what());
    }
  }
  if (total != payload.size()) {
    throw FormatError(Kind::SizeMismatch, "MSEG-W1: payload is " + std::to_string(payload.size()) +
                                              " bytes but entries cover " + std::to_string(total));
  }
  return store;
}

void save_weights(const WeightStore& store, const std::filesystem::path& path) {
  const auto bytes = write_weights(store);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

WeightStore load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_weights(bytes);
}

template <typename S>
TensorMap<S> to_tensor_map(const WeightStore& store) {
  TensorMap<S> out;
  for (const auto& e : store.entries()) {
    if (e.shape.size() > 4) throw ShapeError("weight '" + e.name + "' has rank > 4");
    Index d[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < e.shape.size(); ++i) d[i] = static_cast<Index>(e.shape[i]);
    std::vector<S> data(e.data.begin(), e.data.end());
    out.emplace(e.name, Tensor4<S>(Shape4{d[0], d[1], d[2], d[3]}, std::move(data)));
  }
  return out;
}

template TensorMap<float> to_tensor_map<float>(const WeightStore&);
template TensorMap<double> to_tensor_map<double>(const WeightStore&);

WeightStore to_weight_store(const Graph& graph, const TensorMap<float>& tensors) {
  WeightStore store;
  for (const auto& spec : graph.weight_specs()) {
    const auto it = tensors.find(spec.name);
    if (it == tensors.end()) throw ConfigError("missing tensor for weight '" + spec.name + "'");
    if (it->second.size() != spec.numel()) throw ShapeError("tensor for weight '" + spec.name + "' has wrong size");
    store.add(spec.name, std::vector<std::int64_t>(spec.shape.begin(), spec.shape.end()), it->second.to_vector());
  }
  return store;
}

WeightStore init_weights(const Graph& graph, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightStore store;
  for (const auto& spec : graph.weight_specs()) {
    std::vector<float> data(static_cast<std::size_t>(spec.numel()), 0.0f);
    switch (spec.role) {
      case WeightRole::ConvWeight: {
        const Index fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : data) v = static_cast<float>(dist(rng));
        break;
      }
      case WeightRole::BnGamma:
      case WeightRole::BnVar:
        std::fill(data.begin(), data.end(), 1.0f);
        break;
      default:
        break;
    }
    store.add(spec.name, std::vector<std::int64_t>(spec.shape.begin(), spec.shape.end()), std::move(data));
  }
  return store;
}

std::vector<std::string> diff_against_graph(const Graph& graph, const WeightStore& store) {
  std::vector<std::string> diffs;
  std::set<std::string> expected;
  for (const auto& spec : graph.weight_specs()) {
    expected.insert(spec.name);
    const WeightEntry* e = store.find(spec.name);
    if (e == nullptr) {
      diffs.push_back("missing " + spec.name);
      continue;
    }
    if (e->shape != std::vector<std::int64_t>(spec.shape.begin(), spec.shape.end())) {
      diffs.push_back("shape " + spec.name);
    }
  }
  for (const auto& e : store.entries()) {
    if (expected.count(e.name) == 0) diffs.push_back("extra " + e.name);
  }
  return diffs;
}

}  // namespace mseg
