#include <doctest.h>

#include "mseg/decoder.hpp"
#include "support.hpp"

using namespace mseg;
using mseg::testing::random_tensor;

namespace {

TensorMap<double> random_weights(const Graph& g, std::uint64_t seed) {
  TensorMap<double> w;
  std::uint64_t s = seed;
  for (const auto& spec : g.weight_specs()) {
    const bool var = spec.role == WeightRole::BnVar;
    const bool gamma = spec.role == WeightRole::BnGamma;
    w.emplace(spec.name, random_tensor<double>(spec.shape4(), ++s, var || gamma ? 0.5 : -0.3, var || gamma ? 1.5 : 0.3));
  }
  return w;
}

// Straight-line conv + bn with the weights of `<name>.conv` / `<name>.bn`.
Tensor4d conv_bn(const TensorMap<double>& w, const std::string& name, const Tensor4d& x, Index out) {
  const Tensor4d& k = w.at(name + ".conv.weight");
  const Index kh = k.h();
  const ConvSpec spec{x.c(), out, {kh, kh}, {1, 1}, {kh / 2, kh / 2}, {1, 1}, 1, false};
  const Tensor4d y = conv2d_naive<double>(x, k, {}, spec);
  return batchnorm_infer<double>(y, w.at(name + ".bn.weight").span(), w.at(name + ".bn.bias").span(),
                                 w.at(name + ".bn.running_mean").span(), w.at(name + ".bn.running_var").span(), 1e-5);
}

Tensor4d mul(const Tensor4d& a, const Tensor4d& b) {
  Tensor4d y = a;
  y.array() *= b.array();
  return y;
}

Tensor4d cat(const Tensor4d& a, const Tensor4d& b) {
  Tensor4d y(a.n(), a.c() + b.c(), a.h(), a.w());
  for (Index c = 0; c < a.c(); ++c)
    for (Index i = 0; i < a.h() * a.w(); ++i) y.plane(0, c)[i] = a.plane(0, c)[i];
  for (Index c = 0; c < b.c(); ++c)
    for (Index i = 0; i < a.h() * a.w(); ++i) y.plane(0, a.c() + c)[i] = b.plane(0, c)[i];
  return y;
}

Tensor4d aggregation_oracle(const TensorMap<double>& w, const Tensor4d& g32, const Tensor4d& g16, const Tensor4d& g8) {
  const Index c = g32.c();
  auto up = [](const Tensor4d& x, const Tensor4d& ref) { return upsample_bilinear(x, ref.h(), ref.w(), false); };
  const Tensor4d u16 = up(g32, g16);
  const Tensor4d x2 = mul(conv_bn(w, "agg.conv_upsample1", u16, c), g16);
  const Tensor4d x3 =
      mul(mul(conv_bn(w, "agg.conv_upsample2", up(u16, g8), c), conv_bn(w, "agg.conv_upsample3", up(g16, g8), c)), g8);
  const Tensor4d c2 = conv_bn(w, "agg.conv_concat2", cat(x2, conv_bn(w, "agg.conv_upsample4", u16, c)), 2 * c);
  const Tensor4d c3 =
      conv_bn(w, "agg.conv_concat3", cat(x3, conv_bn(w, "agg.conv_upsample5", up(c2, g8), 2 * c)), 3 * c);
  const Tensor4d c4 = conv_bn(w, "agg.conv4", c3, 3 * c);
  const ConvSpec head = ConvSpec::square(3 * c, 1, 1, 1, 1, true);
  return conv2d_naive<double>(c4, w.at("agg.conv5.weight"), w.at("agg.conv5.bias").span(), head);
}

void set_identity_bn(TensorMap<double>& w, const std::string& bn) {
  w.at(bn + ".weight").fill(1.0);
  w.at(bn + ".bias").fill(0.0);
  w.at(bn + ".running_mean").fill(0.0);
  w.at(bn + ".running_var").fill(1.0);
}

// Rows of the output holding any nonzero value.
Index support_height(const Tensor4d& y) {
  Index lo = y.h(), hi = -1;
  for (Index c = 0; c < y.c(); ++c)
    for (Index i = 0; i < y.h(); ++i)
      for (Index j = 0; j < y.w(); ++j)
        if (y(0, c, i, j) != 0.0) {
          lo = std::min(lo, i);
          hi = std::max(hi, i);
        }
  return hi < lo ? 0 : hi - lo + 1;
}

}  // namespace

TEST_SUITE("decoder") {
  TEST_CASE("RFB preserves spatial size") {
    const Graph g = build_rfb(5, 4);
    for (Index s : {13, 17, 22, 44}) {
      const auto shapes = g.infer_shapes({Shape4{1, 5, s, s + 3}});
      CHECK(shapes[g.output("out")] == Shape4{1, 4, s, s + 3});
    }
  }

  TEST_CASE("RFB residual path in isolation") {
    const Graph g = build_rfb(3, 3);
    TensorMap<double> w = random_weights(g, 1);
    for (auto& [name, t] : w) {
      if (name.find(".conv.weight") != std::string::npos) t.fill(0.0);
      if (name.find(".bn.") != std::string::npos) {
        if (name.ends_with("bias") || name.ends_with("running_mean")) t.fill(0.0);
      }
    }
    Tensor4d& res = w.at("rfb.conv_res.conv.weight");
    for (Index c = 0; c < 3; ++c) res(c, c, 0, 0) = 1.0;
    set_identity_bn(w, "rfb.conv_res.bn");
    const Tensor4d x = random_tensor<double>({1, 3, 13, 13}, 2);
    const Tensor4d y = run_graph<double>(g, w, std::span<const Tensor4d>(&x, 1)).at("out");
    Tensor4d expect = x;
    expect.array() = (x.array() / std::sqrt(1.0 + 1e-5)).max(0.0);
    CHECK(mseg::testing::max_abs_diff(y, expect) < 1e-12);
  }

  TEST_CASE("RFB branch receptive fields grow from a to d") {
    Graph g = build_rfb(1, 1);
    const char* ends[] = {"rfb.branch0.0.bn", "rfb.branch1.3.bn", "rfb.branch2.3.bn", "rfb.branch3.3.bn"};
    for (int b = 0; b < 4; ++b) g.add_output("b" + std::to_string(b), g.find(ends[b]));
    TensorMap<double> w = random_weights(g, 3);
    for (auto& [name, t] : w) {
      if (name.find(".conv.weight") != std::string::npos) t.array() = t.array().abs() + 0.1;
      if (name.ends_with("bn.bias") || name.ends_with("running_mean")) t.fill(0.0);
    }
    Tensor4d x(1, 1, 41, 41);
    x(0, 0, 20, 20) = 1.0;
    const TensorMap<double> out = run_graph<double>(g, w, std::span<const Tensor4d>(&x, 1));
    const Index h0 = support_height(out.at("b0"));
    const Index h1 = support_height(out.at("b1"));
    const Index h2 = support_height(out.at("b2"));
    const Index h3 = support_height(out.at("b3"));
    CHECK(h0 == 1);
    CHECK(h1 == 3 + 2 * 3);
    CHECK(h2 == 5 + 2 * 5);
    CHECK(h3 == 7 + 2 * 7);
    CHECK(h0 < h1);
    CHECK(h1 < h2);
    CHECK(h2 < h3);
  }

  TEST_CASE("aggregation multiplicative identity with pass-through convs") {
    DecoderCfg cfg;
    cfg.rfb_out_ch = 2;
    Graph g = build_aggregation(cfg);
    g.add_output("x2", g.find("agg.x2"));
    g.add_output("x3", g.find("agg.x3"));
    TensorMap<double> w = random_weights(g, 4);
    for (const char* n : {"agg.conv_upsample1", "agg.conv_upsample2", "agg.conv_upsample3"}) {
      Tensor4d& k = w.at(std::string(n) + ".conv.weight");
      k.fill(0.0);
      for (Index c = 0; c < 2; ++c) k(c, c, 1, 1) = 1.0;
      set_identity_bn(w, std::string(n) + ".bn");
      w.at(std::string(n) + ".bn.running_var").fill(1.0 - 1e-5);
    }
    const Tensor4d ins[] = {Tensor4d(Shape4{1, 2, 4, 4}, 1.0), Tensor4d(Shape4{1, 2, 8, 8}, 1.0),
                            Tensor4d(Shape4{1, 2, 16, 16}, 1.0)};
    const TensorMap<double> out = run_graph<double>(g, w, ins);
    for (const char* n : {"x2", "x3"}) {
      const Tensor4d& t = out.at(n);
      CHECK((t.array() - 1.0).abs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("aggregation: a zero deepest feature gates the products") {
    DecoderCfg cfg;
    cfg.rfb_out_ch = 3;
    Graph g = build_aggregation(cfg);
    g.add_output("x2", g.find("agg.x2"));
    g.add_output("x3", g.find("agg.x3"));
    TensorMap<double> w = random_weights(g, 5);
    for (auto& [name, t] : w) {
      if (name.ends_with("bn.bias") || name.ends_with("running_mean")) t.fill(0.0);
    }
    const Tensor4d ins[] = {Tensor4d(1, 3, 5, 5), random_tensor<double>({1, 3, 10, 10}, 6),
                            random_tensor<double>({1, 3, 20, 20}, 7)};
    const TensorMap<double> out = run_graph<double>(g, w, ins);
    CHECK(out.at("x2").array().abs().maxCoeff() == 0.0);
    CHECK(out.at("x3").array().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("aggregation matches a straight-line reimplementation at 44/22/11") {
    DecoderCfg cfg;
    cfg.rfb_out_ch = 4;
    const Graph g = build_aggregation(cfg);
    const TensorMap<double> w = random_weights(g, 8);
    const Tensor4d g32 = random_tensor<double>({1, 4, 11, 11}, 9);
    const Tensor4d g16 = random_tensor<double>({1, 4, 22, 22}, 10);
    const Tensor4d g8 = random_tensor<double>({1, 4, 44, 44}, 11);
    const Tensor4d ins[] = {g32, g16, g8};
    const Tensor4d y = run_graph<double>(g, w, ins).at("out");
    CHECK(y.shape() == Shape4{1, 1, 44, 44});
    CHECK(max_rel_err(y, aggregation_oracle(w, g32, g16, g8)) < 1e-12);

    // Non-power-of-two sizes: the output follows the stride-8 input exactly.
    const Tensor4d odd[] = {random_tensor<double>({1, 4, 9, 9}, 12), random_tensor<double>({1, 4, 19, 19}, 13),
                            random_tensor<double>({1, 4, 39, 39}, 14)};
    const Tensor4d yo = run_graph<double>(g, w, odd).at("out");
    CHECK(yo.shape() == Shape4{1, 1, 39, 39});
    CHECK(max_rel_err(yo, aggregation_oracle(w, odd[0], odd[1], odd[2])) < 1e-12);

    DecoderCfg wrong = cfg;
    Graph bad;
    const NodeId a = bad.input("a", 4);
    const NodeId b = bad.input("b", 5);
    CHECK_THROWS_AS(build_aggregation(bad, "agg", {a, b, a}, wrong), ShapeError);
  }

  TEST_CASE("forward_mseg shape and range on the tiny preset") {
    const Model m = build_mseg(preset("tiny"));
    const InferenceModel im = prepare_inference(m, init_weights(m.graph, 1));
    for (Index s : {64, 96, 100, 256}) {
      const Tensor4f x = random_tensor<float>({1, 3, s, s}, static_cast<std::uint64_t>(s), -2.0, 2.0);
      const Tensor4f p = forward_mseg(im.graph, im.weights, x);
      CHECK(p.shape() == Shape4{1, 1, s, s});
      CHECK(p.array().minCoeff() > 0.0f);
      CHECK(p.array().maxCoeff() < 1.0f);
    }
    CHECK_THROWS_AS((void)forward_mseg(im.graph, im.weights, Tensor4f(1, 3, 32, 32)), ShapeError);
    CHECK_THROWS_AS((void)forward_mseg(im.graph, im.weights, Tensor4f(2, 3, 64, 64)), ShapeError);
  }

  TEST_CASE("folded and unfolded graphs agree") {
    const Model m = build_mseg(preset("tiny"));
    const WeightStore store = init_weights(m.graph, 2);
    TensorMap<double> w = to_tensor_map<double>(store);
    for (auto& [name, t] : w) {
      if (name.ends_with("running_var")) t.fill(2.0);
      if (name.ends_with("running_mean")) t.fill(0.1);
    }
    const FoldedGraph<double> f = fold_batchnorm(m.graph, w);
    CHECK(f.graph.size() < m.graph.size());
    const Tensor4d x = random_tensor<double>({1, 3, 64, 64}, 3);
    CHECK(max_rel_err(forward_mseg(f.graph, f.weights, x), forward_mseg(m.graph, w, x)) < 1e-10);
  }

  TEST_CASE("tape and executor evaluate the model identically") {
    const Model m = build_mseg(preset("tiny"));
    const TensorMap<double> w = to_tensor_map<double>(init_weights(m.graph, 3));
    const Tensor4d x = random_tensor<double>({1, 3, 64, 64}, 4);
    const Tensor4d a = run_graph<double>(m.graph, w, std::span<const Tensor4d>(&x, 1), {"logits"}).at("logits");
    Tape<double> tape;
    const ParamBinding b = bind_weights(tape, m.graph, w);
    const ValueId xi = tape.constant(x);
    const auto ids = record_graph(tape, m.graph, b, std::span<const ValueId>(&xi, 1));
    CHECK(mseg::testing::max_abs_diff(tape.value(ids[m.graph.output("logits")]), a) <= 1e-12 * a.array().abs().maxCoeff());
  }

  TEST_CASE("every backbone parameter receives gradient") {
    const Model m = build_mseg(preset("tiny"));
    TensorMap<double> w = to_tensor_map<double>(init_weights(m.graph, 5));
    const Tensor4d x = random_tensor<double>({2, 3, 64, 64}, 6, -2.0, 2.0);
    calibrate_batchnorm(m.graph, w, std::span<const Tensor4d>(&x, 1));
    Tape<double> tape;
    const ParamBinding b = bind_weights(tape, m.graph, w);
    const ValueId xi = tape.constant(x);
    const auto ids = record_graph(tape, m.graph, b, std::span<const ValueId>(&xi, 1));
    const Tensor4d target = mseg::testing::random_binary<double>({2, 1, 64, 64}, 7);
    const auto grads = tape.backward(tape.loss_seg(ids[m.graph.output("logits")], target));
    for (const auto& name : b.trainable) {
      INFO(name);
      CHECK(grads.of(b.ids.at(name)).array().abs().maxCoeff() > 0.0);
    }
  }

  TEST_CASE("preset detection and weight mismatch") {
    const Model tiny = build_mseg(preset("tiny"));
    const WeightStore store = init_weights(tiny.graph, 1);
    CHECK(detect_preset(store) == preset("tiny"));
    const Model small = build_mseg(preset("small"));
    CHECK_THROWS_AS((void)prepare_inference(small, store), ConfigError);
    CHECK_THROWS_AS((void)detect_preset(WeightStore{}), ConfigError);
  }
}
