#pragma once

#include <string>

#include "mseg/executor.hpp"
#include "mseg/hardnet.hpp"
#include "mseg/weights.hpp"

namespace mseg {

/// Receptive field block: four branches (1x1; and 1x1 -> 1xk -> kx1 -> 3x3 dilated
/// for k = 3, 5, 7), concatenated and merged by a 1x1 conv, plus a 1x1 shortcut
/// from the input, then the decoder activation. Every conv is conv + bn.
NodeId build_rfb(Graph& graph, const std::string& prefix, NodeId x, Index out_ch, const DecoderCfg& cfg);

/// Standalone RFB graph: input "x" with `in_ch` channels, output "out".
Graph build_rfb(Index in_ch, Index out_ch, const DecoderCfg& cfg = {});

struct AggregationInputs {
  NodeId g32 = 0;
  NodeId g16 = 0;
  NodeId g8 = 0;
};

/// Multiplicative dense aggregation of three same-width features at strides
/// 32/16/8. Returns the 1-channel logit map at the stride-8 resolution.
NodeId build_aggregation(Graph& graph, const std::string& prefix, const AggregationInputs& in, const DecoderCfg& cfg);

/// Standalone aggregation graph: inputs "g32", "g16", "g8" (rfb_out_ch each), output "out".
Graph build_aggregation(const DecoderCfg& cfg);

/// Whole segmentation network. Graph outputs: "f8", "f16", "f32" (backbone taps),
/// "logits" (full resolution) and "prob" (sigmoid of logits).
struct Model {
  ModelCfg cfg;
  Graph graph;
};

Model build_mseg(const ModelCfg& cfg);

/// The shipped preset whose weight layout matches `store` exactly.
ModelCfg detect_preset(const WeightStore& store);

/// Graph with batch norms folded into convs, ready for repeated inference.
struct InferenceModel {
  ModelCfg cfg;
  Graph graph;
  TensorMap<float> weights;
};

InferenceModel prepare_inference(const Model& model, const WeightStore& store);

/// Probability mask 1x1xHxW for an input 1x3xHxW (H, W >= 64). `graph` may be
/// the plain model graph or a folded one.
template <typename S>
Tensor4<S> forward_mseg(const Graph& graph, const TensorMap<S>& weights, const Tensor4<S>& x);

}  // namespace mseg
