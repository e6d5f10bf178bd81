#include <doctest.h>

#include <algorithm>

#include "mseg/analyzer.hpp"
#include "mseg/decoder.hpp"

using namespace mseg;

TEST_SUITE("analyzer") {
  TEST_CASE("single 1x1 conv with bias") {
    Graph g;
    const NodeId x = g.input("x", 3);
    g.add_output("y", g.conv("conv", x, ConvSpec::square(3, 4, 1, 1, 1, true)));
    const Summary s = summarize(g, {1, 3, 8, 8});
    const LayerStat& l = s.layers.at(1);
    CHECK(l.params == 16);
    CHECK(l.macs == 768);
    CHECK(l.input_bytes == 3 * 64 * 4);
    CHECK(l.output_bytes == 4 * 64 * 4);
    CHECK(l.weight_bytes == 16 * 4);
    CHECK(s.total_params == 16);
    CHECK(s.total_macs == 768);
  }

  TEST_CASE("parameter-free ops cost nothing") {
    Graph g;
    const NodeId x = g.input("x", 3);
    const NodeId a = g.activation("act", x, ActKind::Relu);
    const NodeId p = g.maxpool("pool", a, PoolSpec{2, 2, 0});
    g.add_output("y", g.upsample("up", p, x, false));
    const Summary s = summarize(g, {1, 3, 8, 8});
    for (const auto& l : s.layers) {
      CHECK(l.params == 0);
      CHECK(l.macs == 0);
    }
  }

  TEST_CASE("grouped and dilated conv MACs") {
    Graph g;
    const NodeId x = g.input("x", 4);
    ConvSpec spec = ConvSpec::square(4, 8, 3, 1, 2);
    spec.groups = 2;
    g.add_output("y", g.conv("conv", x, spec));
    const Summary s = summarize(g, {1, 4, 10, 10});
    CHECK(s.layers[1].params == 8 * 2 * 9);
    CHECK(s.layers[1].macs == 8 * 100 * 2 * 9);
  }

  TEST_CASE("totals are sums of rows and match the weight store") {
    for (const auto& name : preset_names()) {
      const Model m = build_mseg(preset(name));
      const Summary s = summarize(m.graph, {1, 3, 256, 256});
      std::int64_t p = 0, mac = 0, t = 0;
      for (const auto& l : s.layers) {
        p += l.params;
        mac += l.macs;
        t += l.traffic_bytes();
      }
      CHECK(p == s.total_params);
      CHECK(mac == s.total_macs);
      CHECK(t == s.total_traffic);
      CHECK(s.total_params == init_weights(m.graph, 0).element_count());
    }
  }

  TEST_CASE("totals do not depend on the input size for params") {
    const Model m = build_mseg(preset("tiny"));
    const Summary a = summarize(m.graph, {1, 3, 64, 64});
    const Summary b = summarize(m.graph, {1, 3, 128, 128});
    CHECK(a.total_params == b.total_params);
    CHECK(b.total_macs > 3 * a.total_macs);
  }

  TEST_CASE("sparse blocks move fewer concat bytes than dense ones") {
    for (Index n : {4, 8, 16}) {
      HarDBlockCfg cfg;
      cfg.n_layers = n;
      cfg.growth_rate = 16;
      cfg.base_ch = 64;
      const Summary sparse = summarize(build_hardblock(cfg), {1, 64, 32, 32});
      cfg.rule = LinkRule::Dense;
      const Summary dense = summarize(build_hardblock(cfg), {1, 64, 32, 32});
      CHECK(concat_traffic(sparse) < concat_traffic(dense));
    }
  }

  TEST_CASE("summary json") {
    const Model m = build_mseg(preset("tiny"));
    const auto j = to_json(summarize(m.graph, {1, 3, 64, 64}));
    CHECK(j.contains("total_params"));
    CHECK(j.contains("total_macs"));
    CHECK(j.contains("total_traffic_bytes"));
    CHECK(j["layers"].size() == m.graph.size());
  }

  TEST_CASE("bench report") {
    const Model m = build_mseg(preset("tiny"));
    const InferenceModel im = prepare_inference(m, init_weights(m.graph, 0));
    const BenchReport r = bench(im, 64, 1, 10, 1, 3);
    CHECK(r.latencies_ms.size() == 10);
    CHECK(r.fps > 0);
    CHECK(r.fps == doctest::Approx(1000.0 / r.mean_ms));
    CHECK(r.median_ms <= *std::max_element(r.latencies_ms.begin(), r.latencies_ms.end()));
    CHECK(r.p95_ms >= r.median_ms);
    CHECK(r.input == Shape4{1, 3, 64, 64});
    CHECK(!r.platform.empty());
    const auto j = to_json(r);
    CHECK(j["latencies_ms"].size() == 10);
    CHECK_THROWS_AS((void)bench(im, 64, 0, 10, 1), ConfigError);
    CHECK_THROWS_AS((void)bench(im, 64, 1, 9, 1), ConfigError);
  }
}
