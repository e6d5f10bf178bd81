#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "mseg/metrics.hpp"
#include "support.hpp"

using namespace mseg;
using mseg::testing::random_binary;
using mseg::testing::random_tensor;

namespace {

ConfusionCounts pixel_loop(const Tensor4f& pred, const Tensor4f& gt) {
  ConfusionCounts c;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == 1.0f, g = gt[i] == 1.0f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Tensor4f permuted(const Tensor4f& x, const std::vector<Index>& perm) {
  Tensor4f y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = x[perm[static_cast<std::size_t>(i)]];
  return y;
}

void check_close(const ScalarMetrics& a, const ScalarMetrics& b, double tol) {
  CHECK(std::abs(a.dice - b.dice) <= tol);
  CHECK(std::abs(a.iou - b.iou) <= tol);
  CHECK(std::abs(a.precision - b.precision) <= tol);
  CHECK(std::abs(a.recall - b.recall) <= tol);
  CHECK(std::abs(a.f2 - b.f2) <= tol);
  CHECK(std::abs(a.accuracy - b.accuracy) <= tol);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("binarize uses >= and validates the threshold") {
    Tensor4f p(Shape4{1, 1, 1, 3}, std::vector<float>{0.2f, 0.5f, 0.9f});
    CHECK(binarize(p, 0.5) == Tensor4f(Shape4{1, 1, 1, 3}, std::vector<float>{0, 1, 1}));
    CHECK(binarize(p, 0.0).array().minCoeff() == 1.0f);
    CHECK_THROWS_AS((void)binarize(p, 1.0 + 1e-9), ConfigError);
    CHECK_THROWS_AS((void)binarize(p, -0.1), ConfigError);
  }

  TEST_CASE("confusion counts") {
    const Tensor4f gt = random_binary<float>({1, 1, 16, 16}, 1);
    const ConfusionCounts same = confusion(gt, gt);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    Tensor4f inv = gt;
    inv.array() = 1.0f - gt.array();
    const ConfusionCounts opp = confusion(inv, gt);
    CHECK(opp.tp == 0);
    CHECK(opp.tn == 0);
    for (std::uint64_t s = 0; s < 20; ++s) {
      const Tensor4f a = random_binary<float>({1, 1, 16, 16}, 100 + s, 0.3);
      const Tensor4f b = random_binary<float>({1, 1, 16, 16}, 200 + s, 0.6);
      const ConfusionCounts c = confusion(a, b);
      CHECK(c == pixel_loop(a, b));
      CHECK(c.total() == 256);
    }
    CHECK_THROWS_AS((void)confusion(gt, Tensor4f(1, 1, 16, 15)), ShapeError);
    Tensor4f bad = gt;
    bad[3] = 0.5f;
    CHECK_THROWS_AS((void)confusion(bad, gt), Error);
  }

  TEST_CASE("scalar metrics closed forms") {
    const ScalarMetrics m = scalar_metrics({3, 1, 1, 11});
    CHECK(m.dice == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.iou == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(m.precision == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.recall == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.f2 == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.accuracy == doctest::Approx(0.875).epsilon(1e-15));

    check_close(scalar_metrics({10, 0, 0, 6}), {1, 1, 1, 1, 1, 1}, 0.0);
    check_close(scalar_metrics({0, 0, 0, 16}), {1, 1, 1, 1, 1, 1}, 0.0);
    const ScalarMetrics miss = scalar_metrics({0, 0, 5, 11});
    CHECK(miss.dice == 0.0);
    CHECK(miss.precision == 0.0);
    CHECK(miss.recall == 0.0);
    CHECK(miss.f2 == 0.0);
  }

  TEST_CASE("random counts: identities and ranges") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::uint64_t> d(0, 500);
    for (int i = 0; i < 500; ++i) {
      const ConfusionCounts c{d(rng), d(rng), d(rng), d(rng)};
      const ScalarMetrics m = scalar_metrics(c);
      for (double v : {m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      CHECK(std::abs(m.dice - 2 * m.iou / (1 + m.iou)) < 1e-15);
      CHECK(std::abs(m.iou - m.dice / (2 - m.dice)) < 1e-15);
      if (m.precision + m.recall > 0) {
        const double beta2 = 4.0;
        CHECK(std::abs(m.f2 - (1 + beta2) * m.precision * m.recall / (beta2 * m.precision + m.recall)) < 1e-15);
      }
    }
  }

  TEST_CASE("mae") {
    const Tensor4f gt = random_binary<float>({1, 1, 8, 8}, 2);
    CHECK(mae(gt, gt) == 0.0);
    CHECK(mae(Tensor4f(gt.shape(), 0.5f), gt) == 0.5);
    const Tensor4f p = random_tensor<float>({1, 1, 8, 8}, 3, 0.0, 1.0);
    double s = 0;
    for (Index i = 0; i < p.size(); ++i) s += std::abs(static_cast<double>(p[i]) - gt[i]);
    CHECK(mae(p, gt) == doctest::Approx(s / 64).epsilon(1e-12));
  }

  TEST_CASE("metrics are invariant under a joint pixel permutation") {
    const Tensor4f prob = random_tensor<float>({1, 1, 12, 12}, 4, 0.0, 1.0);
    const Tensor4f gt = random_binary<float>({1, 1, 12, 12}, 5);
    std::vector<Index> perm(144);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(6));
    const MetricReport a = evaluate_pairs({{"a", prob, gt}}, 0.5);
    const MetricReport b = evaluate_pairs({{"a", permuted(prob, perm), permuted(gt, perm)}}, 0.5);
    CHECK(a.images[0].counts == b.images[0].counts);
    CHECK(a.mean_mae == doctest::Approx(b.mean_mae).epsilon(1e-12));
  }

  TEST_CASE("recall does not decrease as the threshold drops") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Tensor4f prob = random_tensor<float>({1, 1, 20, 20}, 10 + s, 0.0, 1.0);
      const Tensor4f gt = random_binary<float>({1, 1, 20, 20}, 20 + s);
      double last = -1;
      for (int t = 100; t >= 0; t -= 5) {
        const double r = scalar_metrics(confusion(binarize(prob, t / 100.0), gt)).recall;
        CHECK(r >= last);
        last = r;
      }
      CHECK(last == 1.0);
    }
  }

  TEST_CASE("dataset means are per-image") {
    // Dice 1 on the first image, 0.5 on the second.
    Tensor4f gt1(Shape4{1, 1, 2, 2}, std::vector<float>{1, 1, 0, 0});
    Tensor4f gt2(Shape4{1, 1, 2, 2}, std::vector<float>{1, 0, 0, 0});
    Tensor4f p2(Shape4{1, 1, 2, 2}, std::vector<float>{1, 1, 1, 0});
    const MetricReport r = evaluate_dataset({{"b", p2}, {"a", gt1}}, {{"a", gt1}, {"b", gt2}}, 0.5);
    REQUIRE(r.images.size() == 2);
    CHECK(r.images[0].id == "a");
    CHECK(r.images[1].metrics.dice == doctest::Approx(0.5));
    CHECK(r.mean.dice == doctest::Approx(0.75));

    const MetricReport one = evaluate_dataset({{"b", p2}}, {{"b", gt2}}, 0.5);
    check_close(one.mean, one.images[0].metrics, 0.0);

    try {
      (void)evaluate_dataset({{"a", gt1}, {"x", gt1}}, {{"a", gt1}, {"y", gt1}}, 0.5);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("x") != std::string::npos);
      CHECK(msg.find("y") != std::string::npos);
    }
  }

  TEST_CASE("predictions are resized to the ground truth") {
    const Tensor4f gt = random_binary<float>({1, 1, 16, 16}, 7);
    Tensor4f small(Shape4{1, 1, 8, 8}, 0.9f);
    const MetricReport r = evaluate_pairs({{"a", small, gt}}, 0.5);
    CHECK(r.images[0].counts.total() == 256);
    CHECK(r.images[0].counts.tn == 0);
  }

  TEST_CASE("report json keys") {
    const Tensor4f gt = random_binary<float>({1, 1, 4, 4}, 8);
    const auto j = to_json(evaluate_pairs({{"a", gt, gt}}, 0.5));
    for (const char* k : {"threshold", "mdice", "miou", "precision", "recall", "f2", "accuracy", "mae", "images"})
      CHECK(j.contains(k));
    CHECK(j["mdice"].get<double>() == 1.0);
    CHECK(j["images"][0]["id"] == "a");
    CHECK(!format_table(evaluate_pairs({{"a", gt, gt}}, 0.5)).empty());
  }
}
