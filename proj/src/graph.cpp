#include "mseg/graph.hpp"

#include <numeric>

namespace mseg {

std::string_view op_name(const NodeOp& op) {
  struct Visitor {
    std::string_view operator()(const InputOp&) const { return "input"; }
    std::string_view operator()(const ConvOp&) const { return "conv"; }
    std::string_view operator()(const BatchNormOp&) const { return "batchnorm"; }
    std::string_view operator()(const ActivationOp& a) const { return to_string(a.kind); }
    std::string_view operator()(const MaxPoolOp&) const { return "maxpool"; }
    std::string_view operator()(const UpsampleOp&) const { return "upsample"; }
    std::string_view operator()(const EwiseNodeOp& e) const { return e.op == EwiseOp::Mul ? "mul" : "add"; }
    std::string_view operator()(const ConcatOp&) const { return "concat"; }
  };
  return std::visit(Visitor{}, op);
}

Index WeightSpec::numel() const {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

Shape4 WeightSpec::shape4() const {
  Index d[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < shape.size() && i < 4; ++i) d[i] = shape[i];
  return {d[0], d[1], d[2], d[3]};
}

const GraphNode& Graph::checked(NodeId id, const std::string& user) const {
  if (id >= nodes_.size()) throw ShapeError("node '" + user + "': input id " + std::to_string(id) + " does not exist");
  return nodes_[id];
}

NodeId Graph::push(GraphNode node) {
  if (by_name_.count(node.name) != 0) throw ConfigError("duplicate graph node name '" + node.name + "'");
  const NodeId id = nodes_.size();
  by_name_.emplace(node.name, id);
  nodes_.push_back(std::move(node));
  return id;
}

NodeId Graph::append(GraphNode node) {
  for (NodeId in : node.inputs) checked(in, node.name);
  const bool is_input = std::holds_alternative<InputOp>(node.op);
  const NodeId id = push(std::move(node));
  if (is_input) inputs_.push_back(id);
  return id;
}

NodeId Graph::input(std::string name, Index channels) {
  if (channels < 1) throw ConfigError("input '" + name + "': channel count must be positive");
  GraphNode n{std::move(name), InputOp{}, {}, channels, 1, {}};
  const NodeId id = push(std::move(n));
  inputs_.push_back(id);
  return id;
}

NodeId Graph::conv(std::string name, NodeId x, const ConvSpec& spec) {
  const GraphNode& in = checked(x, name);
  spec.validate();
  if (in.channels != spec.in_ch) {
    throw ShapeError("node '" + name + "': conv expects " + std::to_string(spec.in_ch) + " input channels, '" +
                     in.name + "' has " + std::to_string(in.channels));
  }
  GraphNode n{name, ConvOp{spec}, {x}, spec.out_ch, in.stride * spec.stride.y, {}};
  const Shape4 ws = spec.weight_shape();
  n.weights.push_back({name + ".weight", {ws.n, ws.c, ws.h, ws.w}, WeightRole::ConvWeight, true});
  if (spec.has_bias) n.weights.push_back({name + ".bias", {spec.out_ch}, WeightRole::ConvBias, true});
  return push(std::move(n));
}

NodeId Graph::batchnorm(std::string name, NodeId x, double eps) {
  const GraphNode& in = checked(x, name);
  const Index c = in.channels;
  GraphNode n{name, BatchNormOp{eps}, {x}, c, in.stride, {}};
  n.weights = {{name + ".weight", {c}, WeightRole::BnGamma, true},
               {name + ".bias", {c}, WeightRole::BnBeta, true},
               {name + ".running_mean", {c}, WeightRole::BnMean, false},
               {name + ".running_var", {c}, WeightRole::BnVar, false}};
  return push(std::move(n));
}

NodeId Graph::activation(std::string name, NodeId x, ActKind kind) {
  const GraphNode& in = checked(x, name);
  return push(GraphNode{std::move(name), ActivationOp{kind}, {x}, in.channels, in.stride, {}});
}

NodeId Graph::maxpool(std::string name, NodeId x, const PoolSpec& spec) {
  const GraphNode& in = checked(x, name);
  return push(GraphNode{std::move(name), MaxPoolOp{spec}, {x}, in.channels, in.stride * spec.stride, {}});
}

NodeId Graph::upsample(std::string name, NodeId x, NodeId size_ref, bool align_corners) {
  const GraphNode& in = checked(x, name);
  const GraphNode& ref = checked(size_ref, name);
  return push(GraphNode{std::move(name), UpsampleOp{align_corners}, {x, size_ref}, in.channels, ref.stride, {}});
}

NodeId Graph::ewise(std::string name, NodeId a, NodeId b, EwiseOp op) {
  const GraphNode& na = checked(a, name);
  const GraphNode& nb = checked(b, name);
  if (na.channels != nb.channels) {
    throw ShapeError("node '" + name + "': channel mismatch " + std::to_string(na.channels) + " ('" + na.name +
                     "') vs " + std::to_string(nb.channels) + " ('" + nb.name + "')");
  }
  if (na.stride != nb.stride) {
    throw ShapeError("node '" + name + "': stride mismatch between '" + na.name + "' and '" + nb.name + "'");
  }
  return push(GraphNode{std::move(name), EwiseNodeOp{op}, {a, b}, na.channels, na.stride, {}});
}

NodeId Graph::concat(std::string name, const std::vector<NodeId>& xs) {
  if (xs.empty()) throw ShapeError("node '" + name + "': concat needs at least one input");
  Index channels = 0;
  const Index stride = checked(xs.front(), name).stride;
  for (NodeId x : xs) {
    const GraphNode& in = checked(x, name);
    if (in.stride != stride) throw ShapeError("node '" + name + "': stride mismatch at input '" + in.name + "'");
    channels += in.channels;
  }
  return push(GraphNode{std::move(name), ConcatOp{}, xs, channels, stride, {}});
}

NodeId Graph::conv_bn(const std::string& name, NodeId x, ConvSpec spec) {
  spec.has_bias = false;
  const NodeId c = conv(name + ".conv", x, spec);
  return batchnorm(name + ".bn", c);
}

NodeId Graph::conv_bn_act(const std::string& name, NodeId x, const ConvSpec& spec, ActKind kind) {
  return activation(name + ".act", conv_bn(name, x, spec), kind);
}

void Graph::add_output(std::string name, NodeId id) {
  checked(id, name);
  for (const auto& [existing, _] : outputs_) {
    if (existing == name) throw ConfigError("duplicate graph output '" + name + "'");
  }
  outputs_.emplace_back(std::move(name), id);
}

NodeId Graph::output(std::string_view name) const {
  for (const auto& [n, id] : outputs_) {
    if (n == name) return id;
  }
  throw ConfigError("graph has no output named '" + std::string(name) + "'");
}

NodeId Graph::find(std::string_view name) const {
  const auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw ConfigError("graph has no node named '" + std::string(name) + "'");
  return it->second;
}

std::vector<WeightSpec> Graph::weight_specs() const {
  std::vector<WeightSpec> out;
  for (const auto& n : nodes_) out.insert(out.end(), n.weights.begin(), n.weights.end());
  return out;
}

std::vector<std::vector<NodeId>> Graph::consumers() const {
  std::vector<std::vector<NodeId>> out(nodes_.size());
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    for (NodeId in : nodes_[i].inputs) out[in].push_back(i);
  }
  return out;
}

std::vector<Shape4> Graph::infer_shapes(const std::vector<Shape4>& input_shapes) const {
  if (input_shapes.size() != inputs_.size()) {
    throw ShapeError("graph expects " + std::to_string(inputs_.size()) + " inputs, got " +
                     std::to_string(input_shapes.size()));
  }
  std::vector<Shape4> shapes(nodes_.size());
  std::size_t next_input = 0;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const GraphNode& n = nodes_[i];
    try {
      shapes[i] = std::visit(
          [&](const auto& op) -> Shape4 {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, InputOp>) {
              const Shape4 s = input_shapes[next_input++];
              if (s.c != n.channels) {
                throw ShapeError("expected " + std::to_string(n.channels) + " channels, got " + to_string(s));
              }
              return s;
            } else if constexpr (std::is_same_v<T, ConvOp>) {
              return op.spec.output_shape(shapes[n.inputs[0]]);
            } else if constexpr (std::is_same_v<T, MaxPoolOp>) {
              return op.spec.output_shape(shapes[n.inputs[0]]);
            } else if constexpr (std::is_same_v<T, UpsampleOp>) {
              const Shape4 x = shapes[n.inputs[0]];
              const Shape4 r = shapes[n.inputs[1]];
              return {x.n, x.c, r.h, r.w};
            } else if constexpr (std::is_same_v<T, EwiseNodeOp>) {
              const Shape4 a = shapes[n.inputs[0]];
              const Shape4 b = shapes[n.inputs[1]];
              if (!(a == b)) throw ShapeError("operand shapes " + to_string(a) + " vs " + to_string(b));
              return a;
            } else if constexpr (std::is_same_v<T, ConcatOp>) {
              Shape4 s = shapes[n.inputs[0]];
              s.c = 0;
              for (NodeId in : n.inputs) {
                const Shape4 x = shapes[in];
                if (x.n != s.n || x.h != s.h || x.w != s.w) {
                  throw ShapeError("concat input '" + nodes_[in].name + "' has shape " + to_string(x));
                }
                s.c += x.c;
              }
              return s;
            } else {
              return shapes[n.inputs[0]];
            }
          },
          n.op);
    } catch (const ShapeError& e) {
      throw ShapeError("node '" + n.name + "': " + e.what());
    }
  }
  return shapes;
}

}  // namespace mseg
