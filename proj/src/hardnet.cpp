#include "mseg/hardnet.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mseg/executor.hpp"

namespace mseg {

int two_adic_valuation(Index l) {
  if (l < 1) throw ConfigError("two_adic_valuation: argument must be >= 1");
  int v = 0;
  while (l % 2 == 0) {
    l /= 2;
    ++v;
  }
  return v;
}

HardLink hard_links(Index layer, Index growth_rate, double multiplier) {
  if (layer < 1) throw ConfigError("hard_links: layer index must be >= 1, got " + std::to_string(layer));
  if (growth_rate < 1) throw ConfigError("hard_links: growth rate must be positive");
  HardLink out;
  double width = static_cast<double>(growth_rate);
  for (Index j = 0, step = 1; step <= layer; ++j, step *= 2) {
    if (layer % step != 0) continue;
    out.links.push_back(layer - step);
    if (j > 0) width *= multiplier;
  }
  std::sort(out.links.begin(), out.links.end());
  const auto t = static_cast<Index>(std::floor(width));
  out.out_ch = (t % 2 != 0) ? t + 1 : t;
  return out;
}

void HarDBlockCfg::validate() const {
  if (n_layers < 1) throw ConfigError("HarDBlock: n_layers must be positive");
  if (growth_rate < 1) throw ConfigError("HarDBlock: growth rate must be positive");
  if (!(multiplier > 1.0)) throw ConfigError("HarDBlock: multiplier must exceed 1");
  if (base_ch < 1) throw ConfigError("HarDBlock: base channel count must be positive");
}

HarDBlockPlan plan_hardblock(const HarDBlockCfg& cfg) {
  cfg.validate();
  HarDBlockPlan plan;
  const auto n = static_cast<std::size_t>(cfg.n_layers);
  plan.layers.resize(n + 1);
  plan.in_ch.assign(n + 1, 0);
  std::vector<Index> width(n + 1, 0);
  width[0] = cfg.base_ch;
  for (Index l = 1; l <= cfg.n_layers; ++l) {
    HardLink link = hard_links(l, cfg.growth_rate, cfg.multiplier);
    if (cfg.rule == LinkRule::Dense) {
      link.links.clear();
      for (Index j = 0; j < l; ++j) link.links.push_back(j);
    }
    const auto li = static_cast<std::size_t>(l);
    width[li] = link.out_ch;
    for (Index j : link.links) plan.in_ch[li] += width[static_cast<std::size_t>(j)];
    plan.layers[li] = std::move(link);
    if (l % 2 == 1 || l == cfg.n_layers) {
      plan.outputs.push_back(l);
      plan.out_ch += width[li];
    }
  }
  return plan;
}

HarDBlockNodes build_hardblock(Graph& graph, const std::string& prefix, NodeId x, const HarDBlockCfg& cfg) {
  if (graph.node(x).channels != cfg.base_ch) {
    throw ShapeError("HarDBlock '" + prefix + "': base_ch " + std::to_string(cfg.base_ch) + " but input has " +
                     std::to_string(graph.node(x).channels) + " channels");
  }
  const HarDBlockPlan plan = plan_hardblock(cfg);
  HarDBlockNodes result;
  std::vector<NodeId> layer{x};
  for (Index l = 1; l <= cfg.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const HardLink& link = plan.layers[li];
    const std::string name = prefix + ".layer" + std::to_string(l);
    NodeId in;
    if (link.links.size() == 1) {
      in = layer[static_cast<std::size_t>(link.links.front())];
    } else {
      std::vector<NodeId> parts;
      for (auto it = link.links.rbegin(); it != link.links.rend(); ++it) {
        parts.push_back(layer[static_cast<std::size_t>(*it)]);
      }
      in = graph.concat(name + ".cat", parts);
    }
    const NodeId out = graph.conv_bn_act(name, in, ConvSpec::square(plan.in_ch[li], link.out_ch, 3), cfg.act);
    result.layer_convs.push_back(graph.find(name + ".conv"));
    layer.push_back(out);
  }
  if (plan.outputs.size() == 1) {
    result.out = layer[static_cast<std::size_t>(plan.outputs.front())];
  } else {
    std::vector<NodeId> parts;
    for (Index l : plan.outputs) parts.push_back(layer[static_cast<std::size_t>(l)]);
    result.out = graph.concat(prefix + ".out", parts);
  }
  result.out_ch = plan.out_ch;
  return result;
}

Graph build_hardblock(const HarDBlockCfg& cfg) {
  Graph g;
  const NodeId x = g.input("x", cfg.base_ch);
  const HarDBlockNodes block = build_hardblock(g, "block", x, cfg);
  g.add_output("out", block.out);
  return g;
}

// ---------------------------------------------------------------------------

void BackboneCfg::validate() const {
  if (stem.empty()) throw ConfigError("backbone: stem is empty");
  if (stages.empty()) throw ConfigError("backbone: no stages");
  if (!(multiplier > 1.0)) throw ConfigError("backbone: multiplier must exceed 1");
  for (const auto& s : stem) {
    if (s.out_ch < 1 || s.kernel < 1 || s.stride < 1) throw ConfigError("backbone: invalid stem layer");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.growth_rate < 1 || s.n_layers < 1 || s.transition_ch < 1) {
      throw ConfigError("backbone: stage " + std::to_string(i) + " has non-positive parameters");
    }
  }
  for (Index want : {Index{8}, Index{16}, Index{32}}) {
    int found = 0;
    for (const auto& t : taps) {
      if (t.stride == want) ++found;
      if (t.stage < 0 || t.stage >= static_cast<Index>(stages.size())) {
        throw ConfigError("backbone: tap '" + t.name + "' refers to missing stage " + std::to_string(t.stage));
      }
      if (t.name != "f" + std::to_string(t.stride)) {
        throw ConfigError("backbone: tap '" + t.name + "' must be named f" + std::to_string(t.stride));
      }
    }
    if (found != 1) throw ConfigError("backbone: need exactly one tap at stride " + std::to_string(want));
  }
}

Index BackboneCfg::tap_channels(const TapCfg& tap) const {
  return stages.at(static_cast<std::size_t>(tap.stage)).transition_ch;
}

void DecoderCfg::validate() const {
  if (rfb_out_ch < 1) throw ConfigError("decoder: rfb_out_ch must be positive");
  for (Index d : dilations) {
    if (d < 1) throw ConfigError("decoder: dilations must be positive");
  }
}

BackboneTaps add_backbone(Graph& graph, NodeId image, const BackboneCfg& cfg) {
  cfg.validate();
  NodeId x = image;
  for (std::size_t i = 0; i < cfg.stem.size(); ++i) {
    const StemLayer& s = cfg.stem[i];
    x = graph.conv_bn_act("base.stem" + std::to_string(i), x,
                          ConvSpec::square(graph.node(x).channels, s.out_ch, s.kernel, s.stride), cfg.act);
  }
  if (cfg.stem_pool) x = graph.maxpool("base.pool", x, *cfg.stem_pool);

  std::vector<NodeId> pre(cfg.stages.size());
  std::vector<NodeId> post(cfg.stages.size());
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageCfg& st = cfg.stages[i];
    const std::string prefix = "stage" + std::to_string(i);
    HarDBlockCfg block{st.n_layers, st.growth_rate, cfg.multiplier, graph.node(x).channels, cfg.act,
                       LinkRule::Harmonic};
    const HarDBlockNodes b = build_hardblock(graph, prefix + ".block", x, block);
    x = graph.conv_bn_act(prefix + ".transition", b.out, ConvSpec::square(b.out_ch, st.transition_ch, 1), cfg.act);
    pre[i] = x;
    if (st.downsample) x = graph.maxpool(prefix + ".down", x, PoolSpec{2, 2, 0});
    post[i] = x;
  }

  BackboneTaps taps;
  for (const TapCfg& t : cfg.taps) {
    const auto si = static_cast<std::size_t>(t.stage);
    const NodeId id = t.after_downsample ? post[si] : pre[si];
    const Index stride = graph.node(id).stride;
    if (stride != t.stride) {
      throw ConfigError("stage " + std::to_string(t.stage) + ": tap '" + t.name + "' has stride " +
                        std::to_string(stride) + " but declares " + std::to_string(t.stride));
    }
    if (t.stride == 8) taps.f8 = id;
    if (t.stride == 16) taps.f16 = id;
    if (t.stride == 32) taps.f32 = id;
  }
  return taps;
}

Graph build_backbone(const BackboneCfg& cfg) {
  Graph g;
  const NodeId image = g.input("image", 3);
  const BackboneTaps taps = add_backbone(g, image, cfg);
  g.add_output("f8", taps.f8);
  g.add_output("f16", taps.f16);
  g.add_output("f32", taps.f32);
  return g;
}

template <typename S>
FeaturePyramid<S> forward_backbone(const Graph& graph, const TensorMap<S>& weights, const Tensor4<S>& x) {
  if (x.c() != 3) throw ShapeError("forward_backbone: expected 3 input channels, got " + to_string(x.shape()));
  TensorMap<S> out = run_graph<S>(graph, weights, std::span<const Tensor4<S>>(&x, 1), {"f8", "f16", "f32"});
  return {std::move(out.at("f8")), std::move(out.at("f16")), std::move(out.at("f32"))};
}

template FeaturePyramid<float> forward_backbone<float>(const Graph&, const TensorMap<float>&, const Tensor4<float>&);
template FeaturePyramid<double> forward_backbone<double>(const Graph&, const TensorMap<double>&,
                                                         const Tensor4<double>&);

// ---------------------------------------------------------------------------
// Presets and the key-value preset format.

ModelCfg preset(std::string_view name) {
  ModelCfg cfg;
  cfg.name = std::string(name);
  BackboneCfg& b = cfg.backbone;
  if (name == "hardnet68-mseg") {
    b.stem = {{32, 3, 2}, {64, 3, 1}};
    b.stem_pool = PoolSpec{3, 2, 1};
    b.multiplier = 1.7;
    b.stages = {{14, 8, 128, true}, {16, 16, 256, false}, {20, 16, 320, true}, {40, 16, 640, true},
                {160, 4, 1024, false}};
    b.taps = {{"f8", 2, false, 8}, {"f16", 3, false, 16}, {"f32", 4, false, 32}};
    cfg.decoder.rfb_out_ch = 32;
  } else if (name == "tiny") {
    b.stem = {{16, 3, 2}};
    b.stem_pool = PoolSpec{3, 2, 1};
    b.multiplier = 1.7;
    b.stages = {{8, 4, 32, true}, {10, 4, 48, true}, {12, 4, 64, true}};
    b.taps = {{"f8", 0, true, 8}, {"f16", 1, true, 16}, {"f32", 2, true, 32}};
    cfg.decoder.rfb_out_ch = 16;
  } else if (name == "small") {
    b.stem = {{24, 3, 2}};
    b.stem_pool = PoolSpec{3, 2, 1};
    b.multiplier = 1.7;
    b.stages = {{10, 6, 48, true}, {12, 6, 64, true}, {16, 6, 96, true}};
    b.taps = {{"f8", 0, true, 8}, {"f16", 1, true, 16}, {"f32", 2, true, 32}};
    cfg.decoder.rfb_out_ch = 24;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return cfg;
}

std::vector<std::string> preset_names() { return {"hardnet68-mseg", "tiny", "small"}; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep || (sep == ' ' && c == '\t')) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Index to_index(const std::string& s, int line) {
  Index v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("preset line " + std::to_string(line) + ": expected an integer, got '" + s + "'");
  }
  return v;
}

double to_double(const std::string& s, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("preset line " + std::to_string(line) + ": expected a number, got '" + s + "'");
  }
}

bool to_bool(const std::string& s, int line) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("preset line " + std::to_string(line) + ": expected true/false, got '" + s + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ModelCfg parse_model_cfg(std::string_view text) {
  ModelCfg cfg;
  BackboneCfg& b = cfg.backbone;
  b.stem.clear();
  b.stem_pool.reset();
  int line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string l = trim(line);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ConfigError("preset line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(l).substr(0, eq));
    const std::string value = trim(std::string_view(l).substr(eq + 1));
    const auto words = split(value, ' ');
    auto need = [&](std::size_t n) {
      if (words.size() != n) {
        throw ConfigError("preset line " + std::to_string(line_no) + ": '" + key + "' expects " + std::to_string(n) +
                          " fields");
      }
    };
    if (key == "name") {
      cfg.name = value;
    } else if (key == "stem") {
      for (const auto& w : words) {
        const auto f = split(w, '/');
        if (f.size() != 3) throw ConfigError("preset line " + std::to_string(line_no) + ": stem entries are out/kernel/stride");
        b.stem.push_back({to_index(f[0], line_no), to_index(f[1], line_no), to_index(f[2], line_no)});
      }
    } else if (key == "stem_pool") {
      if (value == "none") {
        b.stem_pool.reset();
      } else {
        const auto f = split(value, '/');
        if (f.size() != 3) throw ConfigError("preset line " + std::to_string(line_no) + ": stem_pool is kernel/stride/padding");
        b.stem_pool = PoolSpec{to_index(f[0], line_no), to_index(f[1], line_no), to_index(f[2], line_no)};
      }
    } else if (key == "multiplier") {
      need(1);
      b.multiplier = to_double(words[0], line_no);
    } else if (key == "activation") {
      need(1);
      b.act = parse_act_kind(words[0]);
    } else if (key == "stage") {
      need(4);
      if (words[3] != "down" && words[3] != "keep") {
        throw ConfigError("preset line " + std::to_string(line_no) + ": stage mode must be 'down' or 'keep'");
      }
      b.stages.push_back({to_index(words[0], line_no), to_index(words[1], line_no), to_index(words[2], line_no),
                          words[3] == "down"});
    } else if (key == "tap") {
      need(4);
      if (words[2] != "pre" && words[2] != "post") {
        throw ConfigError("preset line " + std::to_string(line_no) + ": tap position must be 'pre' or 'post'");
      }
      b.taps.push_back({words[0], to_index(words[1], line_no), words[2] == "post", to_index(words[3], line_no)});
    } else if (key == "rfb_out_ch") {
      need(1);
      cfg.decoder.rfb_out_ch = to_index(words[0], line_no);
    } else if (key == "dilations") {
      need(3);
      for (std::size_t i = 0; i < 3; ++i) cfg.decoder.dilations[i] = to_index(words[i], line_no);
    } else if (key == "align_corners") {
      need(1);
      cfg.decoder.align_corners = to_bool(words[0], line_no);
    } else if (key == "decoder_activation") {
      need(1);
      cfg.decoder.act = parse_act_kind(words[0]);
    } else {
      throw ConfigError("preset line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  b.validate();
  cfg.decoder.validate();
  return cfg;
}

std::string format_model_cfg(const ModelCfg& cfg) {
  const BackboneCfg& b = cfg.backbone;
  std::ostringstream os;
  os << "name = " << cfg.name << "\n";
  os << "stem =";
  for (const auto& s : b.stem) os << " " << s.out_ch << "/" << s.kernel << "/" << s.stride;
  os << "\n";
  if (b.stem_pool) {
    os << "stem_pool = " << b.stem_pool->kernel << "/" << b.stem_pool->stride << "/" << b.stem_pool->padding << "\n";
  } else {
    os << "stem_pool = none\n";
  }
  os << "multiplier = " << format_double(b.multiplier) << "\n";
  os << "activation = " << to_string(b.act) << "\n";
  for (const auto& s : b.stages) {
    os << "stage = " << s.growth_rate << " " << s.n_layers << " " << s.transition_ch << " "
       << (s.downsample ? "down" : "keep") << "\n";
  }
  for (const auto& t : b.taps) {
    os << "tap = " << t.name << " " << t.stage << " " << (t.after_downsample ? "post" : "pre") << " " << t.stride
       << "\n";
  }
  os << "rfb_out_ch = " << cfg.decoder.rfb_out_ch << "\n";
  os << "dilations = " << cfg.decoder.dilations[0] << " " << cfg.decoder.dilations[1] << " "
     << cfg.decoder.dilations[2] << "\n";
  os << "align_corners = " << (cfg.decoder.align_corners ? "true" : "false") << "\n";
  os << "decoder_activation = " << to_string(cfg.decoder.act) << "\n";
  return os.str();
}

ModelCfg load_model_cfg(const std::string& name_or_path) {
  for (const auto& n : preset_names()) {
    if (n == name_or_path) return preset(n);
  }
  std::ifstream in(name_or_path);
  if (!in) throw IoError("'" + name_or_path + "' is neither a shipped preset nor a readable preset file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model_cfg(ss.str());
}

}  // namespace mseg
