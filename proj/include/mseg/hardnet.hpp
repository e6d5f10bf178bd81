#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mseg/autodiff.hpp"
#include "mseg/graph.hpp"

namespace mseg {

/// Largest j with 2^j dividing l (l >= 1).
int two_adic_valuation(Index l);

struct HardLink {
  /// Earlier layers feeding layer l, ascending (layer 0 is the block input).
  std::vector<Index> links;
  Index out_ch = 0;
};

/// Harmonic link rule: layer l reads layers l - 2^j for every 2^j dividing l,
/// and its width is k * m^v2(l) floored and bumped to the next even integer.
HardLink hard_links(Index layer, Index growth_rate, double multiplier);

enum class LinkRule {
  Harmonic,
  /// Every layer reads all previous layers; used for traffic comparisons only.
  Dense,
};

struct HarDBlockCfg {
  Index n_layers = 4;
  Index growth_rate = 14;
  double multiplier = 1.7;
  Index base_ch = 64;
  ActKind act = ActKind::Relu6;
  LinkRule rule = LinkRule::Harmonic;

  void validate() const;
};

/// Static layout of a HarDBlock, layers indexed 1..n (index 0 unused).
struct HarDBlockPlan {
  std::vector<HardLink> layers;
  std::vector<Index> in_ch;
  /// Layers concatenated into the block output: odd-indexed ones plus the last.
  std::vector<Index> outputs;
  Index out_ch = 0;
};

HarDBlockPlan plan_hardblock(const HarDBlockCfg& cfg);

struct HarDBlockNodes {
  NodeId out = 0;
  Index out_ch = 0;
  std::vector<NodeId> layer_convs;
};

/// Appends a HarDBlock reading `x`. Layer l is conv3x3 + bn + activation over the
/// concatenation of its linked layers (nearest link first).
HarDBlockNodes build_hardblock(Graph& graph, const std::string& prefix, NodeId x, const HarDBlockCfg& cfg);

/// Standalone block graph with input "x" and output "out".
Graph build_hardblock(const HarDBlockCfg& cfg);

struct StemLayer {
  Index out_ch = 32;
  Index kernel = 3;
  Index stride = 2;
  friend bool operator==(const StemLayer&, const StemLayer&) = default;
};

struct StageCfg {
  Index growth_rate = 14;
  Index n_layers = 8;
  Index transition_ch = 128;
  bool downsample = true;
  friend bool operator==(const StageCfg&, const StageCfg&) = default;
};

/// A named backbone output: stage output after the 1x1 transition,
/// optionally taken after the stage's stride-2 downsample.
struct TapCfg {
  std::string name;
  Index stage = 0;
  bool after_downsample = false;
  Index stride = 8;
  friend bool operator==(const TapCfg&, const TapCfg&) = default;
};

struct BackboneCfg {
  std::vector<StemLayer> stem;
  std::optional<PoolSpec> stem_pool;
  double multiplier = 1.7;
  ActKind act = ActKind::Relu6;
  std::vector<StageCfg> stages;
  std::vector<TapCfg> taps;

  void validate() const;
  /// Channel count of each tap, derived from the stage list.
  Index tap_channels(const TapCfg& tap) const;
  friend bool operator==(const BackboneCfg&, const BackboneCfg&) = default;
};

struct DecoderCfg {
  Index rfb_out_ch = 32;
  std::array<Index, 3> dilations{3, 5, 7};
  bool align_corners = false;
  ActKind act = ActKind::Relu;

  Index head_hidden_ch() const { return 3 * rfb_out_ch; }
  void validate() const;
  friend bool operator==(const DecoderCfg&, const DecoderCfg&) = default;
};

struct ModelCfg {
  std::string name;
  BackboneCfg backbone;
  DecoderCfg decoder;
  friend bool operator==(const ModelCfg&, const ModelCfg&) = default;
};

/// Shipped presets: "hardnet68-mseg", "tiny", "small".
ModelCfg preset(std::string_view name);
std::vector<std::string> preset_names();

/// Key-value preset file (see presets/*.cfg for the schema).
ModelCfg parse_model_cfg(std::string_view text);
std::string format_model_cfg(const ModelCfg& cfg);
/// A shipped preset name or a path to a preset file.
ModelCfg load_model_cfg(const std::string& name_or_path);

struct BackboneTaps {
  NodeId f8 = 0;
  NodeId f16 = 0;
  NodeId f32 = 0;
};

/// Appends stem and stages to `graph`, reading `image`.
BackboneTaps add_backbone(Graph& graph, NodeId image, const BackboneCfg& cfg);

/// Backbone-only graph: input "image" (3 channels), outputs "f8", "f16", "f32".
Graph build_backbone(const BackboneCfg& cfg);

template <typename S>
struct FeaturePyramid {
  Tensor4<S> f8;
  Tensor4<S> f16;
  Tensor4<S> f32;
};

template <typename S>
FeaturePyramid<S> forward_backbone(const Graph& graph, const TensorMap<S>& weights, const Tensor4<S>& x);

}  // namespace mseg
