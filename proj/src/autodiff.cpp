#include "mseg/autodiff.hpp"

#include <cmath>
#include <string>

namespace mseg {

template <typename S>
struct Tape<S>::Context {
  const Tape<S>& tape;
  const Node& node;
  const Tensor4<S>& grad_out;
  std::vector<Tensor4<S>>& grads;

  const Tensor4<S>& input(std::size_t k) const { return tape.nodes_[node.inputs[k]].value; }
  bool needs(std::size_t k) const { return tape.nodes_[node.inputs[k]].requires_grad; }

  void accumulate(std::size_t k, Tensor4<S>&& g) {
    Tensor4<S>& slot = grads[node.inputs[k]];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      slot.array() += g.array();
    }
  }
};

template <typename S>
Tensor4<S> Gradients<S>::of(ValueId id) const {
  const Tensor4<S>& g = grads_.at(id.index);
  if (!g.empty()) return g;
  return Tensor4<S>(tape_->value(id).shape());
}

template <typename S>
ValueId Tape<S>::push(Tensor4<S> value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (std::size_t i : inputs) node.requires_grad = node.requires_grad || nodes_[i].requires_grad;
  node.inputs = std::move(inputs);
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return ValueId{nodes_.size() - 1};
}

template <typename S>
ValueId Tape<S>::leaf(Tensor4<S> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return ValueId{nodes_.size() - 1};
}

template <typename S>
ValueId Tape<S>::conv2d(ValueId x, ValueId w, std::optional<ValueId> bias, const ConvSpec& spec) {
  std::span<const S> b;
  std::vector<std::size_t> inputs{x.index, w.index};
  if (bias) {
    b = value(*bias).span();
    inputs.push_back(bias->index);
  }
  Tensor4<S> y = mseg::conv2d(value(x), value(w), b, spec);
  return push(std::move(y), std::move(inputs), [spec](Context& ctx) {
    const bool need_dx = ctx.needs(0);
    ConvGrads<S> g = conv2d_backward(ctx.input(0), ctx.input(1), ctx.grad_out, spec, need_dx);
    if (need_dx) ctx.accumulate(0, std::move(g.dx));
    if (ctx.needs(1)) ctx.accumulate(1, std::move(g.dw));
    if (ctx.node.inputs.size() > 2 && ctx.needs(2)) {
      ctx.accumulate(2, Tensor4<S>(ctx.input(2).shape(), std::move(g.db)));
    }
  });
}

template <typename S>
ValueId Tape<S>::batchnorm(ValueId x, ValueId gamma, ValueId beta, ValueId mean, ValueId var, S eps) {
  Tensor4<S> y = batchnorm_infer(value(x), value(gamma).span(), value(beta).span(), value(mean).span(),
                                 value(var).span(), eps);
  return push(std::move(y), {x.index, gamma.index, beta.index, mean.index, var.index}, [eps](Context& ctx) {
    BatchNormGrads<S> g = batchnorm_backward(ctx.input(0), ctx.grad_out, ctx.input(1).span(), ctx.input(3).span(),
                                             ctx.input(4).span(), eps);
    if (ctx.needs(0)) ctx.accumulate(0, std::move(g.dx));
    if (ctx.needs(1)) ctx.accumulate(1, Tensor4<S>(ctx.input(1).shape(), std::move(g.dgamma)));
    if (ctx.needs(2)) ctx.accumulate(2, Tensor4<S>(ctx.input(2).shape(), std::move(g.dbeta)));
  });
}

template <typename S>
ValueId Tape<S>::activation(ValueId x, ActKind kind) {
  Tensor4<S> y = mseg::activation(value(x), kind);
  const std::size_t self = nodes_.size();
  return push(std::move(y), {x.index}, [kind, self](Context& ctx) {
    ctx.accumulate(0, activation_backward(ctx.input(0), ctx.tape.nodes_[self].value, ctx.grad_out, kind));
  });
}

template <typename S>
ValueId Tape<S>::maxpool2d(ValueId x, const PoolSpec& spec) {
  Tensor4<S> y = mseg::maxpool2d(value(x), spec);
  return push(std::move(y), {x.index},
              [spec](Context& ctx) { ctx.accumulate(0, maxpool2d_backward(ctx.input(0), ctx.grad_out, spec)); });
}

template <typename S>
ValueId Tape<S>::upsample(ValueId x, Index out_h, Index out_w, bool align_corners) {
  Tensor4<S> y = upsample_bilinear(value(x), out_h, out_w, align_corners);
  return push(std::move(y), {x.index}, [align_corners](Context& ctx) {
    ctx.accumulate(0, upsample_bilinear_backward(ctx.grad_out, ctx.input(0).shape(), align_corners));
  });
}

template <typename S>
ValueId Tape<S>::ewise(ValueId a, ValueId b, EwiseOp op) {
  Tensor4<S> y = mseg::ewise(value(a), value(b), op);
  return push(std::move(y), {a.index, b.index}, [op](Context& ctx) {
    if (op == EwiseOp::Add) {
      if (ctx.needs(0)) ctx.accumulate(0, Tensor4<S>(ctx.grad_out));
      if (ctx.needs(1)) ctx.accumulate(1, Tensor4<S>(ctx.grad_out));
      return;
    }
    if (ctx.needs(0)) {
      Tensor4<S> g(ctx.grad_out.shape());
      g.array() = ctx.grad_out.array() * ctx.input(1).array();
      ctx.accumulate(0, std::move(g));
    }
    if (ctx.needs(1)) {
      Tensor4<S> g(ctx.grad_out.shape());
      g.array() = ctx.grad_out.array() * ctx.input(0).array();
      ctx.accumulate(1, std::move(g));
    }
  });
}

template <typename S>
ValueId Tape<S>::concat(std::span<const ValueId> xs) {
  std::vector<const Tensor4<S>*> values;
  std::vector<std::size_t> inputs;
  for (ValueId id : xs) {
    values.push_back(&value(id));
    inputs.push_back(id.index);
  }
  Tensor4<S> y = concat_channels<S>(std::span<const Tensor4<S>* const>(values));
  return push(std::move(y), std::move(inputs), [](Context& ctx) {
    Index begin = 0;
    for (std::size_t k = 0; k < ctx.node.inputs.size(); ++k) {
      const Index c = ctx.input(k).c();
      if (ctx.needs(k)) ctx.accumulate(k, slice_channels(ctx.grad_out, begin, c));
      begin += c;
    }
  });
}

template <typename S>
ValueId Tape<S>::sum(ValueId x) {
  Tensor4<S> y(Shape4{1, 1, 1, 1});
  y[0] = value(x).array().sum();
  return push(std::move(y), {x.index}, [](Context& ctx) {
    ctx.accumulate(0, Tensor4<S>(ctx.input(0).shape(), ctx.grad_out[0]));
  });
}

template <typename S>
ValueId Tape<S>::dot(ValueId x, const Tensor4<S>& weights) {
  if (!(weights.shape() == value(x).shape())) {
    throw ShapeError("dot: weight shape " + to_string(weights.shape()) + " vs " + to_string(value(x).shape()));
  }
  Tensor4<S> y(Shape4{1, 1, 1, 1});
  y[0] = (value(x).array() * weights.array()).sum();
  return push(std::move(y), {x.index}, [weights](Context& ctx) {
    Tensor4<S> g(weights.shape());
    g.array() = weights.array() * ctx.grad_out[0];
    ctx.accumulate(0, std::move(g));
  });
}

template <typename S>
ValueId Tape<S>::loss_seg(ValueId logits, const Tensor4<S>& target) {
  Tensor4<S> y(Shape4{1, 1, 1, 1});
  y[0] = mseg::loss_seg(value(logits), target);
  return push(std::move(y), {logits.index}, [target](Context& ctx) {
    Tensor4<S> g = loss_seg_grad(ctx.input(0), target);
    g.array() *= ctx.grad_out[0];
    ctx.accumulate(0, std::move(g));
  });
}

template <typename S>
Gradients<S> Tape<S>::backward(ValueId loss) const {
  const Tensor4<S>& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(lv.shape()));
  std::vector<Tensor4<S>> grads(nodes_.size());
  grads[loss.index] = Tensor4<S>(lv.shape(), S(1));
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward || grads[i].empty()) continue;
    if (!node.requires_grad) {
      grads[i] = Tensor4<S>();
      continue;
    }
    Context ctx{*this, node, grads[i], grads};
    node.backward(ctx);
    grads[i] = Tensor4<S>();
  }
  return Gradients<S>(this, std::move(grads));
}

// ---------------------------------------------------------------------------

template <typename S>
std::vector<Tensor4<S>> finite_diff(const std::function<S(const std::vector<Tensor4<S>>&)>& f,
                                    std::vector<Tensor4<S>> params, S eps) {
  if (!(eps > S(0))) throw ConfigError("finite_diff: eps must be positive");
  std::vector<Tensor4<S>> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.emplace_back(p.shape());
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Index i = 0; i < params[t].size(); ++i) {
      const S saved = params[t][i];
      params[t][i] = saved + eps;
      const S plus = f(params);
      params[t][i] = saved - eps;
      const S minus = f(params);
      params[t][i] = saved;
      grads[t][i] = (plus - minus) / (S(2) * eps);
    }
  }
  return grads;
}

namespace {

constexpr double kDiceSmooth = 1.0;

template <typename S>
void check_target(const Tensor4<S>& logits, const Tensor4<S>& target) {
  if (!(logits.shape() == target.shape())) {
    throw ShapeError("loss_seg: logits " + to_string(logits.shape()) + " vs target " + to_string(target.shape()));
  }
  if (logits.c() != 1) throw ShapeError("loss_seg: expected a single channel, got " + std::to_string(logits.c()));
  for (Index i = 0; i < target.size(); ++i) {
    if (target[i] != S(0) && target[i] != S(1)) {
      throw Error("loss_seg: target value " + std::to_string(static_cast<double>(target[i])) + " not in {0,1}");
    }
  }
}

template <typename S>
S sigmoid(S z) {
  return z >= 0 ? S(1) / (S(1) + std::exp(-z)) : std::exp(z) / (S(1) + std::exp(z));
}

}  // namespace

template <typename S>
S loss_seg(const Tensor4<S>& logits, const Tensor4<S>& target) {
  check_target(logits, target);
  double bce = 0.0;
  double inter = 0.0;
  double psum = 0.0;
  double tsum = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double t = target[i];
    bce += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    const double p = sigmoid(z);
    inter += p * t;
    psum += p;
    tsum += t;
  }
  const double n = static_cast<double>(logits.size());
  const double dice = 1.0 - (2.0 * inter + kDiceSmooth) / (psum + tsum + kDiceSmooth);
  const double loss = bce / n + dice;
  if (!std::isfinite(loss)) throw NumericError("loss_seg: non-finite loss");
  return static_cast<S>(loss);
}

template <typename S>
Tensor4<S> loss_seg_grad(const Tensor4<S>& logits, const Tensor4<S>& target) {
  check_target(logits, target);
  double inter = 0.0;
  double psum = 0.0;
  double tsum = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = sigmoid<double>(logits[i]);
    inter += p * target[i];
    psum += p;
    tsum += target[i];
  }
  const double n = static_cast<double>(logits.size());
  const double denom = psum + tsum + kDiceSmooth;
  const double numer = 2.0 * inter + kDiceSmooth;
  Tensor4<S> g(logits.shape());
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = sigmoid<double>(logits[i]);
    const double t = target[i];
    const double d_dice_dp = -(2.0 * t * denom - numer) / (denom * denom);
    g[i] = static_cast<S>((p - t) / n + d_dice_dp * p * (1.0 - p));
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename S>
void optimizer_step(OptimState<S>& state, TensorMap<S>& params, const TensorMap<S>& grads) {
  for (const auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw Error("optimizer_step: missing gradient for parameter '" + name + "'");
    if (!(it->second.shape() == p.shape())) {
      throw ShapeError("optimizer_step: gradient shape " + to_string(it->second.shape()) + " for parameter '" +
                       name + "' of shape " + to_string(p.shape()));
    }
  }
  ++state.step;
  const S lr = state.learning_rate;
  if (state.kind == OptimKind::Sgd) {
    for (auto& [name, p] : params) {
      const Tensor4<S>& g = grads.find(name)->second;
      if (state.momentum == S(0)) {
        p.array() -= lr * g.array();
        continue;
      }
      auto [it, fresh] = state.m.try_emplace(name, p.shape());
      Tensor4<S>& buf = it->second;
      buf.array() = state.momentum * buf.array() + g.array();
      p.array() -= lr * buf.array();
    }
    return;
  }
  const S t = static_cast<S>(state.step);
  const S c1 = S(1) - std::pow(state.beta1, t);
  const S c2 = S(1) - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor4<S>& g = grads.find(name)->second;
    Tensor4<S>& m = state.m.try_emplace(name, p.shape()).first->second;
    Tensor4<S>& v = state.v.try_emplace(name, p.shape()).first->second;
    m.array() = state.beta1 * m.array() + (S(1) - state.beta1) * g.array();
    v.array() = state.beta2 * v.array() + (S(1) - state.beta2) * g.array().square();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;

#define MSEG_INSTANTIATE_AUTODIFF(S)                                                                            \
  template std::vector<Tensor4<S>> finite_diff<S>(const std::function<S(const std::vector<Tensor4<S>>&)>&,     \
                                                  std::vector<Tensor4<S>>, S);                                  \
  template S loss_seg<S>(const Tensor4<S>&, const Tensor4<S>&);                                                 \
  template Tensor4<S> loss_seg_grad<S>(const Tensor4<S>&, const Tensor4<S>&);                                   \
  template void optimizer_step<S>(OptimState<S>&, TensorMap<S>&, const TensorMap<S>&);

MSEG_INSTANTIATE_AUTODIFF(float)
MSEG_INSTANTIATE_AUTODIFF(double)

#undef MSEG_INSTANTIATE_AUTODIFF

}  // namespace mseg
