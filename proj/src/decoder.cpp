#include "mseg/decoder.hpp"

#include <cmath>
#include <limits>

namespace mseg {

namespace {

ConvSpec rect(Index in, Index out, Index kh, Index kw, Index ph, Index pw, Index dil = 1) {
  return ConvSpec{in, out, {kh, kw}, {1, 1}, {ph, pw}, {dil, dil}, 1, false};
}

}  // namespace

NodeId build_rfb(Graph& graph, const std::string& prefix, NodeId x, Index out_ch, const DecoderCfg& cfg) {
  cfg.validate();
  if (out_ch < 1) throw ConfigError("RFB '" + prefix + "': out_ch must be positive");
  const Index in_ch = graph.node(x).channels;
  auto conv = [&](const std::string& name, NodeId in, const ConvSpec& spec) {
    return graph.conv_bn(prefix + "." + name, in, spec);
  };

  std::vector<NodeId> branches;
  branches.push_back(conv("branch0.0", x, rect(in_ch, out_ch, 1, 1, 0, 0)));
  for (int b = 1; b <= 3; ++b) {
    const Index k = 2 * b + 1;
    const Index d = cfg.dilations[static_cast<std::size_t>(b - 1)];
    const std::string name = "branch" + std::to_string(b);
    NodeId t = conv(name + ".0", x, rect(in_ch, out_ch, 1, 1, 0, 0));
    t = conv(name + ".1", t, rect(out_ch, out_ch, 1, k, 0, k / 2));
    t = conv(name + ".2", t, rect(out_ch, out_ch, k, 1, k / 2, 0));
    t = conv(name + ".3", t, rect(out_ch, out_ch, 3, 3, d, d, d));
    branches.push_back(t);
  }
  const NodeId cat = graph.concat(prefix + ".cat", branches);
  const NodeId merged = conv("conv_cat", cat, rect(4 * out_ch, out_ch, 1, 1, 0, 0));
  const NodeId shortcut = conv("conv_res", x, rect(in_ch, out_ch, 1, 1, 0, 0));
  const NodeId sum = graph.ewise(prefix + ".sum", merged, shortcut, EwiseOp::Add);
  return graph.activation(prefix + ".act", sum, cfg.act);
}

Graph build_rfb(Index in_ch, Index out_ch, const DecoderCfg& cfg) {
  Graph g;
  const NodeId x = g.input("x", in_ch);
  g.add_output("out", build_rfb(g, "rfb", x, out_ch, cfg));
  return g;
}

NodeId build_aggregation(Graph& graph, const std::string& prefix, const AggregationInputs& in, const DecoderCfg& cfg) {
  cfg.validate();
  const Index c = cfg.rfb_out_ch;
  for (NodeId id : {in.g32, in.g16, in.g8}) {
    if (graph.node(id).channels != c) {
      throw ShapeError("aggregation '" + prefix + "': input '" + graph.node(id).name + "' has " +
                       std::to_string(graph.node(id).channels) + " channels, expected " + std::to_string(c));
    }
  }
  auto up = [&](const std::string& name, NodeId x, NodeId ref) {
    return graph.upsample(prefix + "." + name, x, ref, cfg.align_corners);
  };
  auto conv3 = [&](const std::string& name, NodeId x, Index cin, Index cout) {
    return graph.conv_bn(prefix + "." + name, x, ConvSpec::square(cin, cout, 3));
  };
  auto mul = [&](const std::string& name, NodeId a, NodeId b) {
    return graph.ewise(prefix + "." + name, a, b, EwiseOp::Mul);
  };

  const NodeId up32_16 = up("up32to16", in.g32, in.g16);
  const NodeId up32_8 = up("up32to8", up32_16, in.g8);
  const NodeId up16_8 = up("up16to8", in.g16, in.g8);

  const NodeId x2 = mul("x2", conv3("conv_upsample1", up32_16, c, c), in.g16);
  const NodeId x3 = mul("x3", mul("x3a", conv3("conv_upsample2", up32_8, c, c), conv3("conv_upsample3", up16_8, c, c)),
                        in.g8);

  const NodeId c2_in = graph.concat(prefix + ".cat2", {x2, conv3("conv_upsample4", up32_16, c, c)});
  const NodeId c2 = conv3("conv_concat2", c2_in, 2 * c, 2 * c);
  const NodeId c2_up = up("up_c2", c2, in.g8);
  const NodeId c3_in = graph.concat(prefix + ".cat3", {x3, conv3("conv_upsample5", c2_up, 2 * c, 2 * c)});
  const NodeId c3 = conv3("conv_concat3", c3_in, 3 * c, 3 * c);
  const NodeId c4 = conv3("conv4", c3, 3 * c, cfg.head_hidden_ch());
  return graph.conv(prefix + ".conv5", c4, ConvSpec::square(cfg.head_hidden_ch(), 1, 1, 1, 1, true));
}

Graph build_aggregation(const DecoderCfg& cfg) {
  Graph g;
  const NodeId g32 = g.input("g32", cfg.rfb_out_ch);
  const NodeId g16 = g.input("g16", cfg.rfb_out_ch);
  const NodeId g8 = g.input("g8", cfg.rfb_out_ch);
  g.add_output("out", build_aggregation(g, "agg", {g32, g16, g8}, cfg));
  return g;
}

Model build_mseg(const ModelCfg& cfg) {
  Model m{cfg, {}};
  Graph& g = m.graph;
  const NodeId image = g.input("image", 3);
  const BackboneTaps taps = add_backbone(g, image, cfg.backbone);
  const Index c = cfg.decoder.rfb_out_ch;
  const NodeId r8 = build_rfb(g, "rfb2_1", taps.f8, c, cfg.decoder);
  const NodeId r16 = build_rfb(g, "rfb3_1", taps.f16, c, cfg.decoder);
  const NodeId r32 = build_rfb(g, "rfb4_1", taps.f32, c, cfg.decoder);
  const NodeId head = build_aggregation(g, "agg1", {r32, r16, r8}, cfg.decoder);
  const NodeId logits = g.upsample("head.upsample", head, image, cfg.decoder.align_corners);
  const NodeId prob = g.activation("head.sigmoid", logits, ActKind::Sigmoid);
  g.add_output("f8", taps.f8);
  g.add_output("f16", taps.f16);
  g.add_output("f32", taps.f32);
  g.add_output("logits", logits);
  g.add_output("prob", prob);
  return m;
}

ModelCfg detect_preset(const WeightStore& store) {
  for (const auto& name : preset_names()) {
    ModelCfg cfg = preset(name);
    if (diff_against_graph(build_mseg(cfg).graph, store).empty()) return cfg;
  }
  throw ConfigError("weights do not match any shipped preset (" + std::to_string(store.size()) + " entries)");
}

InferenceModel prepare_inference(const Model& model, const WeightStore& store) {
  const auto diffs = diff_against_graph(model.graph, store);
  if (!diffs.empty()) {
    throw ConfigError("weights do not match model '" + model.cfg.name + "': " + diffs.front() + " (+" +
                      std::to_string(diffs.size() - 1) + " more)");
  }
  FoldedGraph<float> folded = fold_batchnorm(model.graph, to_tensor_map<float>(store));
  return {model.cfg, std::move(folded.graph), std::move(folded.weights)};
}

template <typename S>
Tensor4<S> forward_mseg(const Graph& graph, const TensorMap<S>& weights, const Tensor4<S>& x) {
  if (x.n() != 1 || x.c() != 3) throw ShapeError("forward_mseg: expected a 1x3xHxW input, got " + to_string(x.shape()));
  if (x.h() < 64 || x.w() < 64) throw ShapeError("forward_mseg: input must be at least 64x64, got " + to_string(x.shape()));
  TensorMap<S> out = run_graph<S>(graph, weights, std::span<const Tensor4<S>>(&x, 1), {"prob"});
  Tensor4<S> prob = std::move(out.at("prob"));
  // Keep saturated sigmoids inside the open unit interval.
  const S lo = std::numeric_limits<S>::min();
  const S hi = std::nextafter(S(1), S(0));
  prob.array() = prob.array().max(lo).min(hi);
  return prob;
}

template Tensor4<float> forward_mseg<float>(const Graph&, const TensorMap<float>&, const Tensor4<float>&);
template Tensor4<double> forward_mseg<double>(const Graph&, const TensorMap<double>&, const Tensor4<double>&);

}  // namespace mseg
