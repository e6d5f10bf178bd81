#pragma once

#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "mseg/tensor.hpp"

namespace mseg {

struct Pair {
  Index y = 1;
  Index x = 1;
  friend bool operator==(const Pair&, const Pair&) = default;
};

/// 2-D convolution hyperparameters (cross-correlation, zero padding).
struct ConvSpec {
  Index in_ch = 1;
  Index out_ch = 1;
  Pair kernel{1, 1};
  Pair stride{1, 1};
  Pair padding{0, 0};
  Pair dilation{1, 1};
  Index groups = 1;
  bool has_bias = false;

  /// Square kernel, "same" padding for stride 1.
  static ConvSpec square(Index in_ch, Index out_ch, Index k, Index stride = 1, Index dilation = 1,
                         bool bias = false) {
    const Index pad = dilation * (k - 1) / 2;
    return ConvSpec{in_ch, out_ch, {k, k}, {stride, stride}, {pad, pad}, {dilation, dilation}, 1, bias};
  }

  Shape4 weight_shape() const { return {out_ch, in_ch / groups, kernel.y, kernel.x}; }
  Index out_h(Index h) const { return (h + 2 * padding.y - dilation.y * (kernel.y - 1) - 1) / stride.y + 1; }
  Index out_w(Index w) const { return (w + 2 * padding.x - dilation.x * (kernel.x - 1) - 1) / stride.x + 1; }

  /// Output shape for input `x`; throws when the spec does not apply to it.
  Shape4 output_shape(const Shape4& x) const;
  void validate() const;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct PoolSpec {
  Index kernel = 2;
  Index stride = 2;
  Index padding = 0;

  Shape4 output_shape(const Shape4& x) const;
  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

enum class ActKind { Relu, Relu6, Sigmoid };
enum class EwiseOp { Mul, Add };

std::string_view to_string(ActKind k);
ActKind parse_act_kind(std::string_view s);

/// Intra-op thread count used by conv2d. 1 keeps results bit-reproducible.
void set_num_threads(int n);
int num_threads();

// ---------------------------------------------------------------------------
// Forward kernels. All functions are pure and reject non-finite results.

/// im2col + matrix-multiply convolution. `bias` may be empty.
template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const Tensor4<S>& w, std::span<const S> bias, const ConvSpec& spec);

/// Direct seven-loop reference convolution; accumulates in double.
template <typename S>
Tensor4<S> conv2d_naive(const Tensor4<S>& x, const Tensor4<S>& w, std::span<const S> bias,
                        const ConvSpec& spec);

template <typename S>
Tensor4<S> batchnorm_infer(const Tensor4<S>& x, std::span<const S> gamma, std::span<const S> beta,
                           std::span<const S> mean, std::span<const S> var, S eps);

/// Folds an inference batch norm into the preceding convolution.
/// Returns the new weight and a bias vector (always present).
template <typename S>
std::pair<Tensor4<S>, std::vector<S>> batchnorm_fold(const Tensor4<S>& w, std::span<const S> b,
                                                     std::span<const S> gamma, std::span<const S> beta,
                                                     std::span<const S> mean, std::span<const S> var, S eps);

template <typename S>
Tensor4<S> activation(const Tensor4<S>& x, ActKind kind);

/// Max pooling; padded cells never win.
template <typename S>
Tensor4<S> maxpool2d(const Tensor4<S>& x, const PoolSpec& spec);

/// Bilinear resize. With align_corners == false source coordinates use half-pixel centers.
template <typename S>
Tensor4<S> upsample_bilinear(const Tensor4<S>& x, Index out_h, Index out_w, bool align_corners = false);

template <typename S>
Tensor4<S> ewise(const Tensor4<S>& a, const Tensor4<S>& b, EwiseOp op);

template <typename S>
Tensor4<S> concat_channels(std::span<const Tensor4<S>* const> xs);

template <typename S>
Tensor4<S> concat_channels(std::span<const Tensor4<S>> xs);

/// Channels [begin, begin + count) of `x`.
template <typename S>
Tensor4<S> slice_channels(const Tensor4<S>& x, Index begin, Index count);

/// Reverses the w axis (horizontal) or the h axis (vertical).
template <typename S>
Tensor4<S> flip(const Tensor4<S>& x, bool horizontal);

// ---------------------------------------------------------------------------
// Backward kernels (vector-Jacobian products).

template <typename S>
struct ConvGrads {
  Tensor4<S> dx;
  Tensor4<S> dw;
  std::vector<S> db;
};

template <typename S>
ConvGrads<S> conv2d_backward(const Tensor4<S>& x, const Tensor4<S>& w, const Tensor4<S>& dy,
                             const ConvSpec& spec, bool need_dx);

template <typename S>
struct BatchNormGrads {
  Tensor4<S> dx;
  std::vector<S> dgamma;
  std::vector<S> dbeta;
};

template <typename S>
BatchNormGrads<S> batchnorm_backward(const Tensor4<S>& x, const Tensor4<S>& dy, std::span<const S> gamma,
                                     std::span<const S> mean, std::span<const S> var, S eps);

/// `y` is the forward output (used by sigmoid), `x` the forward input.
template <typename S>
Tensor4<S> activation_backward(const Tensor4<S>& x, const Tensor4<S>& y, const Tensor4<S>& dy, ActKind kind);

template <typename S>
Tensor4<S> maxpool2d_backward(const Tensor4<S>& x, const Tensor4<S>& dy, const PoolSpec& spec);

template <typename S>
Tensor4<S> upsample_bilinear_backward(const Tensor4<S>& dy, const Shape4& x_shape, bool align_corners);

}  // namespace mseg
