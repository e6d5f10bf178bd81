#include <doctest.h>

#include <cmath>

#include "mseg/autodiff.hpp"
#include "mseg/gradcheck.hpp"
#include "support.hpp"

using namespace mseg;
using mseg::testing::random_binary;
using mseg::testing::random_tensor;

TEST_SUITE("autodiff") {
  TEST_CASE("grad of sum is ones") {
    Tape<double> t;
    const ValueId x = t.leaf(random_tensor<double>({1, 2, 3, 3}, 1));
    const auto g = t.backward(t.sum(x));
    const Tensor4d gx = g.of(x);
    for (Index i = 0; i < gx.size(); ++i) CHECK(gx[i] == 1.0);
  }

  TEST_CASE("relu mask") {
    Tape<double> t;
    const ValueId x = t.leaf(Tensor4d(Shape4{1, 1, 1, 2}, std::vector<double>{-1, 2}));
    const auto g = t.backward(t.sum(t.activation(x, ActKind::Relu)));
    CHECK(g.of(x) == Tensor4d(Shape4{1, 1, 1, 2}, std::vector<double>{0, 1}));
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape<double> t;
    const ValueId x = t.leaf(Tensor4d(1, 1, 2, 2));
    CHECK_THROWS_AS((void)t.backward(x), ShapeError);
  }

  TEST_CASE("unreached leaves get zero gradients and fan-out sums") {
    Tape<double> t;
    const ValueId x = t.leaf(random_tensor<double>({1, 1, 2, 2}, 2));
    const ValueId unused = t.leaf(random_tensor<double>({1, 1, 2, 2}, 3));
    const ValueId y = t.ewise(x, x, EwiseOp::Add);
    const auto g = t.backward(t.sum(y));
    CHECK_FALSE(g.reached(unused));
    CHECK(g.of(unused) == Tensor4d(Shape4{1, 1, 2, 2}, 0.0));
    for (Index i = 0; i < 4; ++i) CHECK(g.of(x)[i] == 2.0);
  }

  TEST_CASE("concat gradient splits exactly") {
    Tape<double> t;
    const ValueId a = t.leaf(random_tensor<double>({1, 2, 3, 3}, 4));
    const ValueId b = t.leaf(random_tensor<double>({1, 3, 3, 3}, 5));
    const ValueId ids[] = {a, b};
    const ValueId cat = t.concat(ids);
    const Tensor4d proj = random_tensor<double>({1, 5, 3, 3}, 6);
    const auto g = t.backward(t.dot(cat, proj));
    CHECK(g.of(a) == slice_channels(proj, 0, 2));
    CHECK(g.of(b) == slice_channels(proj, 2, 3));
  }

  TEST_CASE("multiplicative gradient is grad times partner") {
    Tape<double> t;
    const Tensor4d av = random_tensor<double>({1, 2, 4, 4}, 7);
    const Tensor4d bv = random_tensor<double>({1, 2, 4, 4}, 8);
    const ValueId a = t.leaf(av);
    const ValueId b = t.leaf(bv);
    const Tensor4d proj = random_tensor<double>({1, 2, 4, 4}, 9);
    const auto g = t.backward(t.dot(t.ewise(a, b, EwiseOp::Mul), proj));
    Tensor4d expect = proj;
    expect.array() *= bv.array();
    CHECK(g.of(a) == expect);
  }

  TEST_CASE("finite_diff closed forms") {
    const std::function<double(const std::vector<Tensor4d>&)> sq = [](const std::vector<Tensor4d>& p) {
      return p[0][0] * p[0][0];
    };
    const auto g = finite_diff(sq, {Tensor4d(Shape4{1, 1, 1, 1}, 3.0)}, 1e-5);
    CHECK(std::abs(g[0][0] - 6.0) < 1e-4);
    const std::function<double(const std::vector<Tensor4d>&)> konst = [](const std::vector<Tensor4d>&) { return 4.0; };
    const auto z = finite_diff(konst, {random_tensor<double>({1, 1, 2, 2}, 10)}, 1e-5);
    CHECK(z[0].array().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("loss_seg analytic values") {
    const Tensor4d target = random_binary<double>({1, 1, 4, 4}, 11);
    Tensor4d logits(target.shape());
    for (Index i = 0; i < logits.size(); ++i) logits[i] = target[i] == 1.0 ? 100.0 : -100.0;
    CHECK(loss_seg(logits, target) <= 1e-3);

    // BCE at logit 0 is ln 2; the soft-dice term is 1 - (2 * 0.5n + 1) / (0.5n + n + 1).
    const Index n = 16;
    const Tensor4d zeros(Shape4{1, 1, 4, 4}, 0.0);
    const Tensor4d ones(Shape4{1, 1, 4, 4}, 1.0);
    const double dice = 1.0 - (2.0 * 0.5 * n + 1.0) / (0.5 * n + n + 1.0);
    CHECK(loss_seg(zeros, ones) == doctest::Approx(std::log(2.0) + dice).epsilon(1e-12));

    Tensor4d bad = target;
    bad[0] = 0.5;
    CHECK_THROWS_AS((void)loss_seg(zeros, bad), Error);
    CHECK_THROWS_AS((void)loss_seg(Tensor4d(1, 2, 2, 2), Tensor4d(1, 2, 2, 2)), ShapeError);
  }

  TEST_CASE("soft dice loss on 4x4 logits matches finite differences") {
    const Tensor4d target = random_binary<double>({1, 1, 4, 4}, 12);
    const Tensor4d logits = random_tensor<double>({1, 1, 4, 4}, 13, -2.0, 2.0);
    const std::function<double(const std::vector<Tensor4d>&)> f = [&](const std::vector<Tensor4d>& p) {
      return loss_seg(p[0], target);
    };
    const auto numeric = finite_diff(f, {logits}, 1e-5);
    CHECK(grad_rel_err(loss_seg_grad(logits, target), numeric[0]) < 1e-4);
  }

  TEST_CASE("optimizer steps") {
    TensorMap<float> p{{"w", Tensor4f(Shape4{1, 1, 1, 1}, 1.0f)}};
    const TensorMap<float> g{{"w", Tensor4f(Shape4{1, 1, 1, 1}, 0.5f)}};
    auto sgd = OptimState<float>::sgd(0.1f);
    optimizer_step(sgd, p, g);
    CHECK(p.at("w")[0] == doctest::Approx(0.95f));
    CHECK(sgd.step == 1);

    for (auto kind : {OptimKind::Sgd, OptimKind::Adam}) {
      TensorMap<float> q{{"w", random_tensor<float>({1, 2, 2, 2}, 14)}};
      const TensorMap<float> zero{{"w", Tensor4f(Shape4{1, 2, 2, 2}, 0.0f)}};
      const TensorMap<float> before = q;
      auto st = kind == OptimKind::Sgd ? OptimState<float>::sgd(0.1f, 0.9f) : OptimState<float>::adam(1e-3f);
      optimizer_step(st, q, zero);
      CHECK(q.at("w") == before.at("w"));
    }

    TensorMap<float> missing{{"v", Tensor4f(1, 1, 1, 1)}};
    CHECK_THROWS_AS(optimizer_step(sgd, missing, g), Error);
  }

  TEST_CASE("adam step one closed form") {
    // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
    const double lr = 1e-3, eps = 1e-8;
    for (double gv : {0.3, -2.0, 1e-6}) {
      TensorMap<double> p{{"w", Tensor4d(Shape4{1, 1, 1, 1}, 1.0)}};
      const TensorMap<double> g{{"w", Tensor4d(Shape4{1, 1, 1, 1}, gv)}};
      auto st = OptimState<double>::adam(lr);
      optimizer_step(st, p, g);
      CHECK(p.at("w")[0] == doctest::Approx(1.0 - lr * gv / (std::abs(gv) + eps)).epsilon(1e-12));
    }
  }

  TEST_CASE("every op kind passes the gradient check") {
    for (const auto& r : run_gradchecks(3)) {
      INFO(r.op << " " << r.max_rel_err);
      CHECK(r.passed);
    }
  }
}
