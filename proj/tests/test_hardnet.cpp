#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mseg/hardnet.hpp"
#include "mseg/weights.hpp"
#include "support.hpp"

using namespace mseg;

namespace {

// Direct reading of the link rule: try every power of two up to l.
std::vector<Index> links_oracle(Index l) {
  std::vector<Index> out;
  for (Index p = 1; p <= l; p *= 2) {
    if (l % p == 0) out.push_back(l - p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Index width_oracle(Index l, Index k, double m) {
  int v = 0;
  while (l % 2 == 0) {
    l /= 2;
    ++v;
  }
  double w = static_cast<double>(k);
  for (int i = 0; i < v; ++i) w *= m;
  auto t = static_cast<Index>(std::floor(w));
  return t % 2 == 1 ? t + 1 : t;
}

Index block_out_oracle(Index n, Index k, double m) {
  Index total = 0;
  for (Index l = 1; l <= n; ++l) {
    if (l % 2 == 1 || l == n) total += width_oracle(l, k, m);
  }
  return total;
}

}  // namespace

TEST_SUITE("hardnet") {
  TEST_CASE("hard_links examples") {
    CHECK(hard_links(1, 14, 1.7).links == std::vector<Index>{0});
    CHECK(hard_links(1, 14, 1.7).out_ch == 14);
    CHECK(hard_links(3, 14, 1.7).links == std::vector<Index>{2});
    CHECK(hard_links(3, 14, 1.7).out_ch == 14);
    CHECK(hard_links(4, 14, 1.7).links == std::vector<Index>{0, 2, 3});
    CHECK(hard_links(4, 14, 1.7).out_ch == 40);
    CHECK_THROWS_AS(hard_links(0, 14, 1.7), ConfigError);
  }

  TEST_CASE("hard_links matches brute force for l in [1, 64]") {
    for (Index k : {8, 14, 16, 20, 40}) {
      for (double m : {1.6, 1.7}) {
        for (Index l = 1; l <= 64; ++l) {
          const HardLink h = hard_links(l, k, m);
          CHECK(h.links == links_oracle(l));
          CHECK(h.out_ch == width_oracle(l, k, m));
          CHECK(h.out_ch % 2 == 0);
          CHECK(h.out_ch >= k);
          CHECK(static_cast<int>(h.links.size()) == two_adic_valuation(l) + 1);
        }
      }
    }
  }

  TEST_CASE("build_hardblock degenerate and small blocks") {
    const Graph one = build_hardblock(HarDBlockCfg{1, 14, 1.7, 64});
    CHECK(plan_hardblock(HarDBlockCfg{1, 14, 1.7, 64}).out_ch == 14);
    CHECK(one.node(one.output("out")).channels == 14);

    const HarDBlockPlan p4 = plan_hardblock(HarDBlockCfg{4, 14, 1.7, 64});
    CHECK(p4.outputs == std::vector<Index>{1, 3, 4});
    CHECK(p4.out_ch == 68);
    const Graph g4 = build_hardblock(HarDBlockCfg{4, 14, 1.7, 64});
    CHECK(g4.node(g4.output("out")).channels == 68);

    for (Index n : {8, 16}) {
      const HarDBlockCfg cfg{n, 14, 1.7, 64};
      CHECK(plan_hardblock(cfg).out_ch == block_out_oracle(n, 14, 1.7));
      const Graph g = build_hardblock(cfg);
      CHECK(g.node(g.output("out")).channels == block_out_oracle(n, 14, 1.7));
    }
  }

  TEST_CASE("layer input widths sum the linked widths") {
    const HarDBlockCfg cfg{16, 20, 1.7, 256};
    const HarDBlockPlan plan = plan_hardblock(cfg);
    for (Index l = 1; l <= 16; ++l) {
      Index expect = 0;
      for (Index j : links_oracle(l)) expect += j == 0 ? 256 : width_oracle(j, 20, 1.7);
      CHECK(plan.in_ch[static_cast<std::size_t>(l)] == expect);
    }
  }

  TEST_CASE("connection count is the sum of v2(l) + 1") {
    for (Index n : {4, 8, 16}) {
      const HarDBlockPlan plan = plan_hardblock(HarDBlockCfg{n, 14, 1.7, 64});
      Index count = 0;
      Index expect = 0;
      for (Index l = 1; l <= n; ++l) {
        count += static_cast<Index>(plan.layers[static_cast<std::size_t>(l)].links.size());
        expect += static_cast<Index>(links_oracle(l).size());
      }
      CHECK(count == expect);
      HarDBlockCfg dense{n, 14, 1.7, 64};
      dense.rule = LinkRule::Dense;
      Index dense_count = 0;
      const HarDBlockPlan dp = plan_hardblock(dense);
      for (Index l = 1; l <= n; ++l) dense_count += static_cast<Index>(dp.layers[static_cast<std::size_t>(l)].links.size());
      CHECK(dense_count == n * (n + 1) / 2);
      CHECK(count < dense_count);
    }
  }

  TEST_CASE("config validation") {
    CHECK_THROWS_AS(plan_hardblock(HarDBlockCfg{4, 14, 1.0, 64}), ConfigError);
    CHECK_THROWS_AS(plan_hardblock(HarDBlockCfg{0, 14, 1.7, 64}), ConfigError);
  }

  TEST_CASE("hardnet68-mseg taps at 352") {
    const Graph g = build_backbone(preset("hardnet68-mseg").backbone);
    const auto shapes = g.infer_shapes({Shape4{1, 3, 352, 352}});
    CHECK(shapes[g.output("f8")] == Shape4{1, 320, 44, 44});
    CHECK(shapes[g.output("f16")] == Shape4{1, 640, 22, 22});
    CHECK(shapes[g.output("f32")] == Shape4{1, 1024, 11, 11});
  }

  TEST_CASE("tap sizes follow floor arithmetic at 312") {
    const Graph g = build_backbone(preset("hardnet68-mseg").backbone);
    const auto shapes = g.infer_shapes({Shape4{1, 3, 312, 312}});
    CHECK(shapes[g.output("f8")].h == 39);
    CHECK(shapes[g.output("f16")].h == 19);
    CHECK(shapes[g.output("f32")].h == 9);
  }

  TEST_CASE("tap strides are exact for sizes divisible by 32") {
    for (const auto& name : preset_names()) {
      const BackboneCfg cfg = preset(name).backbone;
      const Graph g = build_backbone(cfg);
      for (Index s : {256, 320, 352, 512}) {
        const auto shapes = g.infer_shapes({Shape4{1, 3, s, s}});
        for (const auto& t : cfg.taps) {
          const Shape4 sh = shapes[g.output(t.name)];
          CHECK(sh.h == s / t.stride);
          CHECK(sh.w == s / t.stride);
          CHECK(sh.c == cfg.tap_channels(t));
        }
      }
    }
  }

  TEST_CASE("stride bookkeeping errors name the stage") {
    BackboneCfg cfg = preset("tiny").backbone;
    cfg.stages[1].downsample = false;
    try {
      (void)build_backbone(cfg);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
  }

  TEST_CASE("forward_backbone zero weights and determinism") {
    const BackboneCfg cfg = preset("tiny").backbone;
    const Graph g = build_backbone(cfg);
    WeightStore zero = init_weights(g, 1);
    TensorMap<double> zw = to_tensor_map<double>(zero);
    for (auto& [name, t] : zw) {
      if (name.find("running_var") == std::string::npos) t.fill(0.0);
    }
    const auto fz = forward_backbone(g, zw, Tensor4d(1, 3, 64, 64));
    CHECK(fz.f8.array().abs().maxCoeff() == 0.0);
    CHECK(fz.f32.array().abs().maxCoeff() == 0.0);

    const TensorMap<double> w = to_tensor_map<double>(init_weights(g, 2));
    const Tensor4d x = mseg::testing::random_tensor<double>({1, 3, 96, 96}, 3);
    const auto a = forward_backbone(g, w, x);
    const auto b = forward_backbone(g, w, x);
    CHECK(a.f8 == b.f8);
    CHECK(a.f16 == b.f16);
    CHECK(a.f32 == b.f32);
    CHECK_THROWS_AS((void)forward_backbone(g, w, Tensor4d(1, 1, 64, 64)), ShapeError);
  }

  TEST_CASE("missing weight error names the node") {
    const Graph g = build_backbone(preset("tiny").backbone);
    TensorMap<float> w = to_tensor_map<float>(init_weights(g, 1));
    w.erase("stage1.block.layer2.conv.weight");
    try {
      (void)forward_backbone(g, w, Tensor4f(1, 3, 64, 64));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("stage1.block.layer2.conv") != std::string::npos);
    }
  }

  TEST_CASE("preset files round-trip") {
    for (const auto& name : preset_names()) {
      const ModelCfg cfg = preset(name);
      CHECK(parse_model_cfg(format_model_cfg(cfg)) == cfg);
      const std::filesystem::path file = std::filesystem::path(MSEG_SOURCE_DIR) / "presets" / (name + ".cfg");
      REQUIRE(std::filesystem::exists(file));
      CHECK(load_model_cfg(file.string()) == cfg);
      CHECK(load_model_cfg(name) == cfg);
    }
    CHECK_THROWS_AS(parse_model_cfg("stage = 1 2"), ConfigError);
    CHECK_THROWS_AS(load_model_cfg("no-such-preset"), IoError);
  }
}
