#include "mseg/executor.hpp"

#include <algorithm>
#include <optional>

namespace mseg {

namespace {

template <typename S>
const Tensor4<S>& lookup(const TensorMap<S>& weights, const GraphNode& node, std::size_t k) {
  const WeightSpec& spec = node.weights.at(k);
  const auto it = weights.find(spec.name);
  if (it == weights.end()) throw ConfigError("node '" + node.name + "': missing weight '" + spec.name + "'");
  if (!(it->second.shape() == spec.shape4())) {
    throw ShapeError("node '" + node.name + "': weight '" + spec.name + "' has shape " +
                     to_string(it->second.shape()) + ", expected " + to_string(spec.shape4()));
  }
  return it->second;
}

template <typename Fn>
auto with_node_context(const GraphNode& node, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError("node '" + node.name + "': " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError("node '" + node.name + "': " + e.what());
  } catch (const ConfigError& e) {
    throw;
  }
}

template <typename S>
Tensor4<S> eval_node(const GraphNode& node, const std::vector<const Tensor4<S>*>& in, const TensorMap<S>& weights) {
  return std::visit(
      [&](const auto& op) -> Tensor4<S> {
        using T = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<T, InputOp>) {
          throw ConfigError("input node evaluated as an op");
        } else if constexpr (std::is_same_v<T, ConvOp>) {
          const Tensor4<S>& w = lookup(weights, node, 0);
          std::span<const S> b;
          if (op.spec.has_bias) b = lookup(weights, node, 1).span();
          return conv2d(*in[0], w, b, op.spec);
        } else if constexpr (std::is_same_v<T, BatchNormOp>) {
          return batchnorm_infer(*in[0], lookup(weights, node, 0).span(), lookup(weights, node, 1).span(),
                                 lookup(weights, node, 2).span(), lookup(weights, node, 3).span(),
                                 static_cast<S>(op.eps));
        } else if constexpr (std::is_same_v<T, ActivationOp>) {
          return activation(*in[0], op.kind);
        } else if constexpr (std::is_same_v<T, MaxPoolOp>) {
          return maxpool2d(*in[0], op.spec);
        } else if constexpr (std::is_same_v<T, UpsampleOp>) {
          return upsample_bilinear(*in[0], in[1]->h(), in[1]->w(), op.align_corners);
        } else if constexpr (std::is_same_v<T, EwiseNodeOp>) {
          return ewise(*in[0], *in[1], op.op);
        } else {
          return concat_channels<S>(std::span<const Tensor4<S>* const>(in));
        }
      },
      node.op);
}

}  // namespace

namespace {

// Evaluates the graph, calling before(node, inputs) ahead of every op.
template <typename S, typename Before>
TensorMap<S> run_nodes(const Graph& graph, const TensorMap<S>& weights, std::span<const Tensor4<S>> inputs,
                       const std::vector<std::pair<std::string, NodeId>>& outs, Before&& before) {
  if (inputs.size() != graph.inputs().size()) {
    throw ShapeError("graph expects " + std::to_string(graph.inputs().size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  const std::size_t n = graph.size();
  std::vector<std::size_t> last_use(n, 0);
  std::vector<bool> keep(n, false);
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId in : graph.node(i).inputs) last_use[in] = std::max(last_use[in], i);
  }
  for (const auto& [_, id] : outs) keep[id] = true;

  std::vector<Tensor4<S>> values(n);
  std::size_t next_input = 0;
  for (NodeId i = 0; i < n; ++i) {
    const GraphNode& node = graph.node(i);
    if (std::holds_alternative<InputOp>(node.op)) {
      const Tensor4<S>& x = inputs[next_input++];
      if (x.c() != node.channels) {
        throw ShapeError("input '" + node.name + "': expected " + std::to_string(node.channels) +
                         " channels, got " + to_string(x.shape()));
      }
      values[i] = x;
    } else {
      std::vector<const Tensor4<S>*> in;
      in.reserve(node.inputs.size());
      for (NodeId k : node.inputs) in.push_back(&values[k]);
      before(node, in);
      values[i] = with_node_context(node, [&] { return eval_node(node, in, weights); });
      for (NodeId k : node.inputs) {
        if (last_use[k] == i && !keep[k]) values[k] = Tensor4<S>();
      }
    }
  }
  TensorMap<S> result;
  for (const auto& [name, id] : outs) result.emplace(name, values[id]);
  return result;
}

}  // namespace

template <typename S>
TensorMap<S> run_graph(const Graph& graph, const TensorMap<S>& weights, std::span<const Tensor4<S>> inputs,
                       const std::vector<std::string>& wanted) {
  std::vector<std::pair<std::string, NodeId>> outs;
  if (wanted.empty()) {
    outs = graph.outputs();
  } else {
    for (const auto& name : wanted) outs.emplace_back(name, graph.output(name));
  }
  return run_nodes(graph, weights, inputs, outs, [](const GraphNode&, const auto&) {});
}

template <typename S>
void calibrate_batchnorm(const Graph& graph, TensorMap<S>& weights, std::span<const Tensor4<S>> inputs) {
  run_nodes(graph, weights, inputs, {}, [&](const GraphNode& node, const std::vector<const Tensor4<S>*>& in) {
    if (!std::holds_alternative<BatchNormOp>(node.op)) return;
    const Tensor4<S>& x = *in[0];
    Tensor4<S>& mean = weights.at(node.weights.at(2).name);
    Tensor4<S>& var = weights.at(node.weights.at(3).name);
    const double count = static_cast<double>(x.n() * x.h() * x.w());
    for (Index c = 0; c < x.c(); ++c) {
      double sum = 0.0;
      double sq = 0.0;
      for (Index b = 0; b < x.n(); ++b) {
        const S* p = x.plane(b, c);
        for (Index i = 0; i < x.h() * x.w(); ++i) {
          sum += static_cast<double>(p[i]);
          sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
        }
      }
      const double m = sum / count;
      mean[c] = static_cast<S>(m);
      var[c] = static_cast<S>(std::max(sq / count - m * m, 0.0));
    }
  });
}

template <typename S>
ParamBinding bind_weights(Tape<S>& tape, const Graph& graph, const TensorMap<S>& weights) {
  ParamBinding b;
  for (const auto& node : graph.nodes()) {
    for (std::size_t k = 0; k < node.weights.size(); ++k) {
      const WeightSpec& spec = node.weights[k];
      const Tensor4<S>& t = lookup(weights, node, k);
      b.ids.emplace(spec.name, tape.leaf(t, spec.trainable));
      if (spec.trainable) b.trainable.push_back(spec.name);
    }
  }
  return b;
}

template <typename S>
std::vector<ValueId> record_graph(Tape<S>& tape, const Graph& graph, const ParamBinding& params,
                                  std::span<const ValueId> inputs) {
  if (inputs.size() != graph.inputs().size()) {
    throw ShapeError("graph expects " + std::to_string(graph.inputs().size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  std::vector<ValueId> ids(graph.size());
  std::size_t next_input = 0;
  for (NodeId i = 0; i < graph.size(); ++i) {
    const GraphNode& node = graph.node(i);
    auto param = [&](std::size_t k) {
      const auto it = params.ids.find(node.weights.at(k).name);
      if (it == params.ids.end()) {
        throw ConfigError("node '" + node.name + "': missing weight '" + node.weights[k].name + "'");
      }
      return it->second;
    };
    auto in = [&](std::size_t k) { return ids[node.inputs[k]]; };
    ids[i] = with_node_context(node, [&]() -> ValueId {
      return std::visit(
          [&](const auto& op) -> ValueId {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, InputOp>) {
              return inputs[next_input++];
            } else if constexpr (std::is_same_v<T, ConvOp>) {
              std::optional<ValueId> bias;
              if (op.spec.has_bias) bias = param(1);
              return tape.conv2d(in(0), param(0), bias, op.spec);
            } else if constexpr (std::is_same_v<T, BatchNormOp>) {
              return tape.batchnorm(in(0), param(0), param(1), param(2), param(3), static_cast<S>(op.eps));
            } else if constexpr (std::is_same_v<T, ActivationOp>) {
              return tape.activation(in(0), op.kind);
            } else if constexpr (std::is_same_v<T, MaxPoolOp>) {
              return tape.maxpool2d(in(0), op.spec);
            } else if constexpr (std::is_same_v<T, UpsampleOp>) {
              const Tensor4<S>& ref = tape.value(in(1));
              return tape.upsample(in(0), ref.h(), ref.w(), op.align_corners);
            } else if constexpr (std::is_same_v<T, EwiseNodeOp>) {
              return tape.ewise(in(0), in(1), op.op);
            } else {
              std::vector<ValueId> xs;
              for (std::size_t k = 0; k < node.inputs.size(); ++k) xs.push_back(in(k));
              return tape.concat(xs);
            }
          },
          node.op);
    });
  }
  return ids;
}

template <typename S>
FoldedGraph<S> fold_batchnorm(const Graph& graph, const TensorMap<S>& weights) {
  FoldedGraph<S> out;
  const auto consumers = graph.consumers();
  std::vector<bool> is_output(graph.size(), false);
  for (const auto& [_, id] : graph.outputs()) is_output[id] = true;

  std::vector<NodeId> remap(graph.size());
  std::vector<bool> absorbed(graph.size(), false);
  for (NodeId i = 0; i < graph.size(); ++i) {
    if (absorbed[i]) continue;
    GraphNode node = graph.node(i);
    for (NodeId& in : node.inputs) in = remap[in];

    const auto* conv = std::get_if<ConvOp>(&node.op);
    const bool foldable = conv != nullptr && consumers[i].size() == 1 && !is_output[i] &&
                          std::holds_alternative<BatchNormOp>(graph.node(consumers[i][0]).op);
    if (!foldable) {
      for (std::size_t k = 0; k < node.weights.size(); ++k) {
        out.weights.insert_or_assign(node.weights[k].name, lookup(weights, graph.node(i), k));
      }
      remap[i] = out.graph.append(std::move(node));
      continue;
    }

    const NodeId bn_id = consumers[i][0];
    const GraphNode& bn = graph.node(bn_id);
    const double eps = std::get<BatchNormOp>(bn.op).eps;
    const Tensor4<S>& w = lookup(weights, graph.node(i), 0);
    std::span<const S> b;
    if (conv->spec.has_bias) b = lookup(weights, graph.node(i), 1).span();
    auto [wf, bf] = batchnorm_fold(w, b, lookup(weights, bn, 0).span(), lookup(weights, bn, 1).span(),
                                   lookup(weights, bn, 2).span(), lookup(weights, bn, 3).span(), static_cast<S>(eps));
    ConvSpec spec = conv->spec;
    spec.has_bias = true;
    node.op = ConvOp{spec};
    node.weights.resize(1);
    node.weights.push_back({node.name + ".bias", {spec.out_ch}, WeightRole::ConvBias, true});
    out.weights.insert_or_assign(node.weights[0].name, std::move(wf));
    out.weights.insert_or_assign(node.weights[1].name,
                                 Tensor4<S>(Shape4{spec.out_ch, 1, 1, 1}, std::move(bf)));
    remap[i] = out.graph.append(std::move(node));
    remap[bn_id] = remap[i];
    absorbed[bn_id] = true;
  }
  for (const auto& [name, id] : graph.outputs()) out.graph.add_output(name, remap[id]);
  return out;
}

#define MSEG_INSTANTIATE_EXECUTOR(S)                                                                          \
  template TensorMap<S> run_graph<S>(const Graph&, const TensorMap<S>&, std::span<const Tensor4<S>>,          \
                                     const std::vector<std::string>&);                                        \
  template ParamBinding bind_weights<S>(Tape<S>&, const Graph&, const TensorMap<S>&);                         \
  template std::vector<ValueId> record_graph<S>(Tape<S>&, const Graph&, const ParamBinding&,                  \
                                                std::span<const ValueId>);                                    \
  template FoldedGraph<S> fold_batchnorm<S>(const Graph&, const TensorMap<S>&);                             \
  template void calibrate_batchnorm<S>(const Graph&, TensorMap<S>&, std::span<const Tensor4<S>>);

MSEG_INSTANTIATE_EXECUTOR(float)
MSEG_INSTANTIATE_EXECUTOR(double)

#undef MSEG_INSTANTIATE_EXECUTOR

}  // namespace mseg
