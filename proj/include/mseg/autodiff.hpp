#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mseg/ops.hpp"

namespace mseg {

/// Handle to a value recorded on a Tape.
struct ValueId {
  std::size_t index = 0;
  friend bool operator==(const ValueId&, const ValueId&) = default;
};

template <typename S>
class Tape;

/// Leaf gradients produced by Tape::backward. Unreached leaves report zeros;
/// interior gradients are released during the sweep.
template <typename S>
class Gradients {
 public:
  Gradients(const Tape<S>* tape, std::vector<Tensor4<S>> grads) : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient with respect to `id` (zero tensor when not reached).
  Tensor4<S> of(ValueId id) const;
  bool reached(ValueId id) const { return !grads_.at(id.index).empty(); }

 private:
  const Tape<S>* tape_;
  std::vector<Tensor4<S>> grads_;
};

/// Records forward evaluations of tensor-core ops for reverse-mode differentiation.
/// Nodes are appended in execution order, so the record is topologically sorted.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf. `requires_grad` marks it as a differentiable parameter.
  ValueId leaf(Tensor4<S> value, bool requires_grad = true);
  ValueId constant(Tensor4<S> value) { return leaf(std::move(value), false); }

  ValueId conv2d(ValueId x, ValueId w, std::optional<ValueId> bias, const ConvSpec& spec);
  /// Inference-mode batch norm: mean and var are read but never differentiated.
  ValueId batchnorm(ValueId x, ValueId gamma, ValueId beta, ValueId mean, ValueId var, S eps);
  ValueId activation(ValueId x, ActKind kind);
  ValueId maxpool2d(ValueId x, const PoolSpec& spec);
  ValueId upsample(ValueId x, Index out_h, Index out_w, bool align_corners);
  ValueId ewise(ValueId a, ValueId b, EwiseOp op);
  ValueId concat(std::span<const ValueId> xs);
  /// Scalar (1x1x1x1) sum of all elements.
  ValueId sum(ValueId x);
  /// Sum of x * weights, a fixed projection to a scalar.
  ValueId dot(ValueId x, const Tensor4<S>& weights);
  /// Segmentation loss (see loss_seg), recorded as one fused node.
  ValueId loss_seg(ValueId logits, const Tensor4<S>& target);

  const Tensor4<S>& value(ValueId id) const { return nodes_.at(id.index).value; }
  bool requires_grad(ValueId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar `loss`. Fan-out gradients are summed.
  Gradients<S> backward(ValueId loss) const;

 private:
  struct Context;
  using BackwardFn = std::function<void(Context&)>;

  struct Node {
    Tensor4<S> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  ValueId push(Tensor4<S> value, std::vector<std::size_t> inputs, BackwardFn fn);

  std::vector<Node> nodes_;
};

/// Central finite differences of a scalar function, one coordinate at a time.
template <typename S>
std::vector<Tensor4<S>> finite_diff(const std::function<S(const std::vector<Tensor4<S>>&)>& f,
                                    std::vector<Tensor4<S>> params, S eps);

/// Binary cross-entropy with logits (mean over pixels) plus soft Dice,
/// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1), p = sigmoid(logit). Equal weights.
template <typename S>
S loss_seg(const Tensor4<S>& logits, const Tensor4<S>& target);

/// d loss_seg / d logits.
template <typename S>
Tensor4<S> loss_seg_grad(const Tensor4<S>& logits, const Tensor4<S>& target);

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimKind { Sgd, Adam };

template <typename S>
struct OptimState {
  OptimKind kind = OptimKind::Sgd;
  S learning_rate = S(1e-2);
  S momentum = S(0);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::int64_t step = 0;
  std::map<std::string, Tensor4<S>, std::less<>> m;
  std::map<std::string, Tensor4<S>, std::less<>> v;

  static OptimState sgd(S lr, S momentum = S(0)) {
    OptimState s;
    s.kind = OptimKind::Sgd;
    s.learning_rate = lr;
    s.momentum = momentum;
    return s;
  }
  static OptimState adam(S lr) {
    OptimState s;
    s.kind = OptimKind::Adam;
    s.learning_rate = lr;
    return s;
  }
};

template <typename S>
using TensorMap = std::map<std::string, Tensor4<S>, std::less<>>;

/// Updates every tensor in `params` in place; each must have a gradient in `grads`.
template <typename S>
void optimizer_step(OptimState<S>& state, TensorMap<S>& params, const TensorMap<S>& grads);

}  // namespace mseg
