#pragma once

#include <span>
#include <string>
#include <vector>

#include "mseg/autodiff.hpp"
#include "mseg/graph.hpp"

namespace mseg {

/// Evaluates `graph` in topological order and returns the requested outputs
/// (all declared outputs when `wanted` is empty). Intermediate tensors are
/// released after their last use. Errors name the failing node.
template <typename S>
TensorMap<S> run_graph(const Graph& graph, const TensorMap<S>& weights, std::span<const Tensor4<S>> inputs,
                       const std::vector<std::string>& wanted = {});

/// Sets every batch norm's running mean and variance to the per-channel
/// statistics of its input on the given batch, in graph order.
template <typename S>
void calibrate_batchnorm(const Graph& graph, TensorMap<S>& weights, std::span<const Tensor4<S>> inputs);

/// Tape handles for every weight of a graph.
struct ParamBinding {
  std::map<std::string, ValueId, std::less<>> ids;
  /// Names of the differentiable (trainable) entries, in graph order.
  std::vector<std::string> trainable;
};

/// Registers trainable weights as differentiable leaves and frozen
/// statistics (running mean/var) as constants.
template <typename S>
ParamBinding bind_weights(Tape<S>& tape, const Graph& graph, const TensorMap<S>& weights);

/// Records the graph on a tape. Returns the value of every node.
template <typename S>
std::vector<ValueId> record_graph(Tape<S>& tape, const Graph& graph, const ParamBinding& params,
                                  std::span<const ValueId> inputs);

template <typename S>
struct FoldedGraph {
  Graph graph;
  TensorMap<S> weights;
};

/// Merges every conv -> batchnorm pair (where the conv has no other reader)
/// into a single biased conv.
template <typename S>
FoldedGraph<S> fold_batchnorm(const Graph& graph, const TensorMap<S>& weights);

}  // namespace mseg
