#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mseg/ops.hpp"

namespace mseg {

using NodeId = std::size_t;

struct InputOp {};
struct ConvOp {
  ConvSpec spec;
};
struct BatchNormOp {
  double eps = 1e-5;
};
struct ActivationOp {
  ActKind kind = ActKind::Relu;
};
struct MaxPoolOp {
  PoolSpec spec;
};
/// Inputs: {x, size_ref}. Resizes x to the spatial size of size_ref.
struct UpsampleOp {
  bool align_corners = false;
};
struct EwiseNodeOp {
  EwiseOp op = EwiseOp::Mul;
};
struct ConcatOp {};

using NodeOp = std::variant<InputOp, ConvOp, BatchNormOp, ActivationOp, MaxPoolOp, UpsampleOp, EwiseNodeOp, ConcatOp>;

std::string_view op_name(const NodeOp& op);

enum class WeightRole { ConvWeight, ConvBias, BnGamma, BnBeta, BnMean, BnVar };

struct WeightSpec {
  std::string name;
  std::vector<Index> shape;
  WeightRole role = WeightRole::ConvWeight;
  bool trainable = true;

  Index numel() const;
  /// The shape padded with trailing ones to four dimensions.
  Shape4 shape4() const;
};

struct GraphNode {
  std::string name;
  NodeOp op;
  std::vector<NodeId> inputs;
  Index channels = 0;
  /// Nominal stride relative to the graph input.
  Index stride = 1;
  std::vector<WeightSpec> weights;
};

/// Static dataflow description of a network. Nodes are appended in
/// topological order; every input of a node precedes it.
class Graph {
 public:
  NodeId input(std::string name, Index channels);
  NodeId conv(std::string name, NodeId x, const ConvSpec& spec);
  NodeId batchnorm(std::string name, NodeId x, double eps = 1e-5);
  NodeId activation(std::string name, NodeId x, ActKind kind);
  NodeId maxpool(std::string name, NodeId x, const PoolSpec& spec);
  NodeId upsample(std::string name, NodeId x, NodeId size_ref, bool align_corners);
  NodeId ewise(std::string name, NodeId a, NodeId b, EwiseOp op);
  NodeId concat(std::string name, const std::vector<NodeId>& xs);

  /// conv (no bias) + batch norm, named `<name>.conv` / `<name>.bn`.
  NodeId conv_bn(const std::string& name, NodeId x, ConvSpec spec);
  /// conv_bn followed by `<name>.act`.
  NodeId conv_bn_act(const std::string& name, NodeId x, const ConvSpec& spec, ActKind kind);

  void add_output(std::string name, NodeId id);

  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const GraphNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& inputs() const { return inputs_; }
  const std::vector<std::pair<std::string, NodeId>>& outputs() const { return outputs_; }
  NodeId output(std::string_view name) const;
  NodeId find(std::string_view name) const;

  /// All weights in node order.
  std::vector<WeightSpec> weight_specs() const;
  /// consumers()[i] lists the nodes reading node i (size references included).
  std::vector<std::vector<NodeId>> consumers() const;
  /// Output shape of every node for the given input shapes (graph input order).
  std::vector<Shape4> infer_shapes(const std::vector<Shape4>& input_shapes) const;

  /// Appends a node verbatim (used by graph rewrites). Checks ordering and name uniqueness.
  NodeId append(GraphNode node);

 private:
  NodeId push(GraphNode node);
  const GraphNode& checked(NodeId id, const std::string& user) const;

  std::vector<GraphNode> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
  std::unordered_map<std::string, NodeId> by_name_;
};

}  // namespace mseg
