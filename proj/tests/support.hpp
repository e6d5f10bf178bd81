#pragma once

#include <cmath>
#include <bit>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>

#include "mseg/tensor.hpp"
#include "mseg/weights.hpp"

namespace mseg::testing {

template <typename S>
Tensor4<S> random_tensor(Shape4 shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor4<S> t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(d(rng));
  return t;
}

template <typename S>
Tensor4<S> random_binary(Shape4 shape, std::uint64_t seed, double p = 0.5) {
  Tensor4<S> t(shape);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution d(p);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng) ? S(1) : S(0);
  return t;
}

template <typename S>
double max_abs_diff(const Tensor4<S>& a, const Tensor4<S>& b) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Random names, ranks 0-4 (with zero extents) and arbitrary bit patterns.
inline WeightStore random_store(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_entries(0, 12), rank(0, 4), extent(0, 5);
  WeightStore store;
  const int n = n_entries(rng);
  for (int i = 0; i < n; ++i) {
    std::vector<std::int64_t> shape(static_cast<std::size_t>(rank(rng)));
    std::int64_t numel = 1;
    for (auto& d : shape) numel *= (d = extent(rng));
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
    store.add("layer" + std::to_string(i) + (i % 3 == 0 ? ".conv.weight" : ".bn.\xc2\xb5"), std::move(shape),
              std::move(data));
  }
  return store;
}

// Byte equality of two stores, NaN payloads included.
inline bool bit_equal(const WeightStore& a, const WeightStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i];
    const auto& y = b.entries()[i];
    if (x.name != y.name || x.shape != y.shape || x.data.size() != y.data.size()) return false;
    if (!x.data.empty() && std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace mseg::testing
