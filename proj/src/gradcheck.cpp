#include "mseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "mseg/decoder.hpp"

namespace mseg {

namespace {

using Build = std::function<ValueId(Tape<double>&, const std::vector<ValueId>&)>;

class Checker {
 public:
  Checker(std::uint64_t seed, double tol, double eps) : rng_(seed), tol_(tol), eps_(eps) {}

  Tensor4d normal(Shape4 s, double scale = 1.0, double shift = 0.0) {
    Tensor4d t(s);
    std::normal_distribution<double> d(shift, scale);
    for (Index i = 0; i < t.size(); ++i) t[i] = d(rng_);
    return t;
  }

  Tensor4d uniform(Shape4 s, double lo, double hi) {
    Tensor4d t(s);
    std::uniform_real_distribution<double> d(lo, hi);
    for (Index i = 0; i < t.size(); ++i) t[i] = d(rng_);
    return t;
  }

  // Checks d(sum(out * R))/d(params) with a random projection R.
  GradcheckResult check(const std::string& name, std::vector<Tensor4d> params, const Build& build,
                        bool scalar_out = false) {
    Tensor4d proj;
    auto forward = [&](Tape<double>& tape, const std::vector<Tensor4d>& ps, std::vector<ValueId>& leaves) {
      leaves.clear();
      for (const auto& p : ps) leaves.push_back(tape.leaf(p));
      const ValueId out = build(tape, leaves);
      if (proj.empty()) proj = scalar_out ? Tensor4d(tape.value(out).shape(), 1.0) : normal(tape.value(out).shape());
      return tape.dot(out, proj);
    };

    Tape<double> tape;
    std::vector<ValueId> leaves;
    const ValueId loss = forward(tape, params, leaves);
    const Gradients<double> grads = tape.backward(loss);

    const std::function<double(const std::vector<Tensor4d>&)> f = [&](const std::vector<Tensor4d>& ps) {
      Tape<double> t;
      std::vector<ValueId> l;
      return t.value(forward(t, ps, l))[0];
    };
    const std::vector<Tensor4d> numeric = finite_diff(f, params, eps_);

    GradcheckResult r;
    r.op = name;
    for (std::size_t i = 0; i < params.size(); ++i) {
      r.max_rel_err = std::max(r.max_rel_err, grad_rel_err(grads.of(leaves[i]), numeric[i]));
      r.checked += params[i].size();
    }
    r.passed = r.max_rel_err < tol_;
    return r;
  }

  // Checks a graph with respect to its inputs and every trainable weight.
  GradcheckResult check_graph(const std::string& name, const Graph& graph, std::vector<Tensor4d> inputs) {
    std::vector<Tensor4d> params = inputs;
    std::vector<std::string> names;
    TensorMap<double> frozen;
    for (const auto& spec : graph.weight_specs()) {
      if (spec.trainable) {
        names.push_back(spec.name);
        const bool bn = spec.role == WeightRole::BnGamma;
        params.push_back(bn ? uniform(spec.shape4(), 0.5, 1.5) : normal(spec.shape4(), 0.4));
      } else {
        const bool var = spec.role == WeightRole::BnVar;
        frozen.emplace(spec.name, var ? uniform(spec.shape4(), 0.5, 1.5) : normal(spec.shape4(), 0.2));
      }
    }
    const std::size_t n_in = inputs.size();
    return check(name, std::move(params), [&graph, &names, &frozen, n_in](Tape<double>& tape,
                                                                          const std::vector<ValueId>& leaves) {
      ParamBinding binding;
      for (std::size_t i = 0; i < names.size(); ++i) {
        binding.ids.emplace(names[i], leaves[n_in + i]);
        binding.trainable.push_back(names[i]);
      }
      for (const auto& [k, t] : frozen) binding.ids.emplace(k, tape.constant(t));
      const std::vector<ValueId> in(leaves.begin(), leaves.begin() + static_cast<std::ptrdiff_t>(n_in));
      const auto ids = record_graph(tape, graph, binding, in);
      return ids[graph.outputs().front().second];
    });
  }

 private:
  std::mt19937_64 rng_;
  double tol_;
  double eps_;
};

}  // namespace

double grad_rel_err(const Tensor4d& analytic, const Tensor4d& numeric) {
  if (!(analytic.shape() == numeric.shape())) {
    throw ShapeError("grad_rel_err: " + to_string(analytic.shape()) + " vs " + to_string(numeric.shape()));
  }
  double scale = 0.0;
  for (Index i = 0; i < numeric.size(); ++i) scale = std::max(scale, std::abs(numeric[i]));
  const double floor = std::max(1e-3 * scale, 1e-12);
  double worst = 0.0;
  for (Index i = 0; i < numeric.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed, double tolerance, double eps) {
  Checker c(seed, tolerance, eps);
  std::vector<GradcheckResult> out;

  {
    const ConvSpec spec = ConvSpec::square(4, 5, 3, 2, 1, true);
    out.push_back(c.check("conv2d", {c.normal({2, 4, 7, 7}), c.normal(spec.weight_shape()), c.normal({1, 5, 1, 1})},
                          [spec](Tape<double>& t, const std::vector<ValueId>& v) {
                            return t.conv2d(v[0], v[1], v[2], spec);
                          }));
  }
  {
    const ConvSpec spec = ConvSpec::square(3, 4, 3, 1, 2);
    out.push_back(c.check("conv2d_dilated", {c.normal({1, 3, 9, 9}), c.normal(spec.weight_shape())},
                          [spec](Tape<double>& t, const std::vector<ValueId>& v) {
                            return t.conv2d(v[0], v[1], std::nullopt, spec);
                          }));
  }
  {
    ConvSpec spec = ConvSpec::square(4, 4, 3);
    spec.groups = 4;
    out.push_back(c.check("conv2d_grouped", {c.normal({1, 4, 6, 6}), c.normal(spec.weight_shape())},
                          [spec](Tape<double>& t, const std::vector<ValueId>& v) {
                            return t.conv2d(v[0], v[1], std::nullopt, spec);
                          }));
  }
  {
    const ConvSpec spec{3, 2, {1, 5}, {1, 1}, {0, 2}, {1, 1}, 1, false};
    out.push_back(c.check("conv2d_asymmetric", {c.normal({1, 3, 5, 8}), c.normal(spec.weight_shape())},
                          [spec](Tape<double>& t, const std::vector<ValueId>& v) {
                            return t.conv2d(v[0], v[1], std::nullopt, spec);
                          }));
  }
  {
    const Tensor4d mean = c.normal({1, 3, 1, 1});
    const Tensor4d var = c.uniform({1, 3, 1, 1}, 0.5, 2.0);
    out.push_back(c.check("batchnorm",
                          {c.normal({2, 3, 4, 4}), c.uniform({1, 3, 1, 1}, 0.5, 1.5), c.normal({1, 3, 1, 1})},
                          [mean, var](Tape<double>& t, const std::vector<ValueId>& v) {
                            return t.batchnorm(v[0], v[1], v[2], t.constant(mean), t.constant(var), 1e-5);
                          }));
  }
  out.push_back(c.check("relu", {c.normal({1, 2, 5, 5})}, [](Tape<double>& t, const std::vector<ValueId>& v) {
    return t.activation(v[0], ActKind::Relu);
  }));
  out.push_back(c.check("relu6", {c.normal({1, 2, 5, 5}, 4.0, 3.0)},
                        [](Tape<double>& t, const std::vector<ValueId>& v) {
                          return t.activation(v[0], ActKind::Relu6);
                        }));
  out.push_back(c.check("sigmoid", {c.normal({1, 2, 5, 5}, 2.0)}, [](Tape<double>& t, const std::vector<ValueId>& v) {
    return t.activation(v[0], ActKind::Sigmoid);
  }));
  out.push_back(c.check("maxpool2d", {c.normal({1, 3, 9, 9})}, [](Tape<double>& t, const std::vector<ValueId>& v) {
    return t.maxpool2d(v[0], PoolSpec{3, 2, 1});
  }));
  out.push_back(c.check("upsample_bilinear", {c.normal({1, 2, 3, 4})},
                        [](Tape<double>& t, const std::vector<ValueId>& v) { return t.upsample(v[0], 7, 9, false); }));
  out.push_back(c.check("upsample_bilinear_aligned", {c.normal({1, 2, 3, 4})},
                        [](Tape<double>& t, const std::vector<ValueId>& v) { return t.upsample(v[0], 7, 9, true); }));
  out.push_back(c.check("ewise_mul", {c.normal({1, 3, 4, 4}), c.normal({1, 3, 4, 4})},
                        [](Tape<double>& t, const std::vector<ValueId>& v) {
                          return t.ewise(v[0], v[1], EwiseOp::Mul);
                        }));
  out.push_back(c.check("ewise_add", {c.normal({1, 3, 4, 4}), c.normal({1, 3, 4, 4})},
                        [](Tape<double>& t, const std::vector<ValueId>& v) {
                          return t.ewise(v[0], v[1], EwiseOp::Add);
                        }));
  out.push_back(c.check("concat", {c.normal({2, 1, 3, 3}), c.normal({2, 3, 3, 3}), c.normal({2, 2, 3, 3})},
                        [](Tape<double>& t, const std::vector<ValueId>& v) { return t.concat(v); }));
  {
    Tensor4d target(Shape4{2, 1, 4, 4});
    std::mt19937_64 rng(seed ^ 0x5eedull);
    for (Index i = 0; i < target.size(); ++i) target[i] = static_cast<double>(rng() & 1u);
    out.push_back(c.check(
        "loss_seg", {c.normal({2, 1, 4, 4}, 2.0)},
        [target](Tape<double>& t, const std::vector<ValueId>& v) { return t.loss_seg(v[0], target); }, true));
  }

  DecoderCfg dec;
  dec.rfb_out_ch = 3;
  out.push_back(c.check_graph("rfb", build_rfb(4, 3, dec), {c.normal({1, 4, 13, 13})}));
  dec.rfb_out_ch = 2;
  out.push_back(c.check_graph("aggregation", build_aggregation(dec),
                              {c.normal({1, 2, 3, 3}), c.normal({1, 2, 6, 6}), c.normal({1, 2, 11, 11})}));
  return out;
}

nlohmann::ordered_json to_json(const std::vector<GradcheckResult>& results) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    j.push_back({{"op", r.op}, {"max_rel_err", r.max_rel_err}, {"checked", r.checked}, {"passed", r.passed}});
  }
  return j;
}

std::string format_table(const std::vector<GradcheckResult>& results) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %12s %10s  %s\n", "op", "max rel err", "elements", "result");
  os << buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-28s %12.3e %10lld  %s\n", r.op.c_str(), r.max_rel_err,
                  static_cast<long long>(r.checked), r.passed ? "pass" : "FAIL");
    os << buf;
  }
  return os.str();
}

}  // namespace mseg
