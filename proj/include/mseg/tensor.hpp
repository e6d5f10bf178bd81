#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mseg/error.hpp"

namespace mseg {

using Index = std::ptrdiff_t;

/// NCHW extents.
struct Shape4 {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

/// Dense NCHW tensor with a contiguous row-major buffer (w fastest).
template <typename Scalar>
class Tensor4 {
 public:
  using scalar_type = Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Array>;
  using ConstArrayMap = Eigen::Map<const Array>;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, Scalar fill = Scalar(0)) : shape_(shape) {
    check_extents(shape);
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor4(Shape4 shape, const std::vector<Scalar>& data) : shape_(shape), data_(data.begin(), data.end()) {
    check_extents(shape);
    if (static_cast<Index>(data_.size()) != shape.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape));
    }
  }

  Tensor4(Index n, Index c, Index h, Index w) : Tensor4(Shape4{n, c, h, w}) {}

  const Shape4& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return data_; }
  std::span<const Scalar> span() const { return data_; }
  std::vector<Scalar> to_vector() const { return {data_.begin(), data_.end()}; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar* plane(Index n, Index c) { return data_.data() + offset(n, c, 0, 0); }
  const Scalar* plane(Index n, Index c) const { return data_.data() + offset(n, c, 0, 0); }

  /// Flat coefficient-wise view.
  ArrayMap array() { return ArrayMap(data_.data(), size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), size()); }

  /// Batch item `n` viewed as a (channels x h*w) row-major matrix.
  MatrixMap item(Index n) { return MatrixMap(plane(n, 0), shape_.c, shape_.plane()); }
  ConstMatrixMap item(Index n) const { return ConstMatrixMap(plane(n, 0), shape_.c, shape_.plane()); }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](Scalar v) { return static_cast<Other>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_extents(const Shape4& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw ShapeError("negative tensor extent in shape " + to_string(s));
    }
  }

  Shape4 shape_;
  // Fixed base alignment keeps Eigen's vectorized reductions in the same order run to run.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

/// Throws NumericError when `t` holds a NaN or infinity.
template <typename Scalar>
void require_finite(const Tensor4<Scalar>& t, const std::string& context) {
  if (!t.all_finite()) {
    throw NumericError(context + ": non-finite value in tensor " + to_string(t.shape()));
  }
}

/// Largest |a - b| divided by the largest |reference| magnitude.
template <typename Scalar>
double max_rel_err(const Tensor4<Scalar>& a, const Tensor4<Scalar>& reference) {
  if (!(a.shape() == reference.shape())) {
    throw ShapeError("max_rel_err: shape " + to_string(a.shape()) + " vs " + to_string(reference.shape()));
  }
  double diff = 0.0;
  double scale = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(reference[i])));
    scale = std::max(scale, std::abs(static_cast<double>(reference[i])));
  }
  if (scale == 0.0) return diff;
  return diff / scale;
}

}  // namespace mseg
