#include "mseg/ops.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

namespace mseg {

namespace {

std::atomic<int> g_threads{1};

std::string dim_error(const char* op, const char* what, Index got, Index want) {
  return std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

void check_conv_inputs(const Shape4& x, const Shape4& w, Index bias_len, const ConvSpec& spec, const char* op) {
  spec.validate();
  if (x.c != spec.in_ch) throw ShapeError(dim_error(op, "input channel count", x.c, spec.in_ch));
  const Shape4 ws = spec.weight_shape();
  if (w.n != ws.n) throw ShapeError(dim_error(op, "weight dim 0 (out_ch)", w.n, ws.n));
  if (w.c != ws.c) throw ShapeError(dim_error(op, "weight dim 1 (in_ch/groups)", w.c, ws.c));
  if (w.h != ws.h) throw ShapeError(dim_error(op, "weight dim 2 (kernel h)", w.h, ws.h));
  if (w.w != ws.w) throw ShapeError(dim_error(op, "weight dim 3 (kernel w)", w.w, ws.w));
  if (bias_len != 0 && bias_len != spec.out_ch) throw ShapeError(dim_error(op, "bias length", bias_len, spec.out_ch));
}

// Fills `col` (K x OH*OW) with the receptive-field taps of one channel group.
template <typename S>
void im2col(const S* x, Index channels, Index h, Index w, const ConvSpec& spec, Index oh, Index ow, S* col) {
  const Index p = oh * ow;
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    const S* plane = x + c * h * w;
    for (Index ky = 0; ky < spec.kernel.y; ++ky) {
      for (Index kx = 0; kx < spec.kernel.x; ++kx, ++row) {
        S* dst = col + row * p;
        const Index dx = kx * spec.dilation.x - spec.padding.x;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * spec.stride.y - spec.padding.y + ky * spec.dilation.y;
          S* out = dst + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + ow, S(0));
            continue;
          }
          const S* src = plane + iy * w;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * spec.stride.x + dx;
            out[ox] = (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* col, Index channels, Index h, Index w, const ConvSpec& spec, Index oh, Index ow, S* x) {
  const Index p = oh * ow;
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    S* plane = x + c * h * w;
    for (Index ky = 0; ky < spec.kernel.y; ++ky) {
      for (Index kx = 0; kx < spec.kernel.x; ++kx, ++row) {
        const S* src = col + row * p;
        const Index dx = kx * spec.dilation.x - spec.padding.x;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * spec.stride.y - spec.padding.y + ky * spec.dilation.y;
          if (iy < 0 || iy >= h) continue;
          S* dst = plane + iy * w;
          const S* in = src + oy * ow;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * spec.stride.x + dx;
            if (ix >= 0 && ix < w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kernel.y == 1 && s.kernel.x == 1 && s.stride.y == 1 && s.stride.x == 1 && s.padding.y == 0 &&
         s.padding.x == 0;
}

// out = lhs * rhs, split by output rows over the configured thread count.
template <typename S, typename Lhs, typename Rhs, typename Out>
void gemm_rows(const Lhs& lhs, const Rhs& rhs, Out& out) {
  const int threads = num_threads();
  const Index rows = lhs.rows();
  if (threads <= 1 || rows < 2 * threads || lhs.cols() * rhs.cols() < 4096) {
    out.noalias() = lhs * rhs;
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  const Index chunk = (rows + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const Index r0 = t * chunk;
    const Index len = std::min(chunk, rows - r0);
    if (len <= 0) break;
    pool.emplace_back([&, r0, len] { out.middleRows(r0, len).noalias() = lhs.middleRows(r0, len) * rhs; });
  }
}

struct AxisTap {
  Index i0;
  Index i1;
  double lambda;
};

std::vector<AxisTap> axis_taps(Index in, Index out, bool align_corners) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(out));
  double scale;
  if (align_corners) {
    scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  } else {
    scale = static_cast<double>(in) / static_cast<double>(out);
  }
  for (Index d = 0; d < out; ++d) {
    double src = align_corners ? d * scale : (d + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = i0 < in - 1 ? i0 + 1 : i0;
    double l = src - static_cast<double>(i0);
    if (i1 == i0) l = 0.0;
    taps[static_cast<std::size_t>(d)] = {i0, i1, l};
  }
  return taps;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(ActKind k) {
  switch (k) {
    case ActKind::Relu: return "relu";
    case ActKind::Relu6: return "relu6";
    case ActKind::Sigmoid: return "sigmoid";
  }
  return "?";
}

ActKind parse_act_kind(std::string_view s) {
  if (s == "relu") return ActKind::Relu;
  if (s == "relu6") return ActKind::Relu6;
  if (s == "sigmoid") return ActKind::Sigmoid;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int num_threads() { return g_threads.load(); }

void ConvSpec::validate() const {
  if (in_ch < 1 || out_ch < 1) throw ShapeError("conv: channel counts must be positive");
  if (kernel.y < 1 || kernel.x < 1) throw ShapeError("conv: kernel extents must be positive");
  if (stride.y < 1 || stride.x < 1) throw ShapeError("conv: stride must be positive");
  if (dilation.y < 1 || dilation.x < 1) throw ShapeError("conv: dilation must be positive");
  if (padding.y < 0 || padding.x < 0) throw ShapeError("conv: padding must be non-negative");
  if (groups < 1 || in_ch % groups != 0 || out_ch % groups != 0) {
    throw ShapeError("conv: groups " + std::to_string(groups) + " must divide in_ch " + std::to_string(in_ch) +
                     " and out_ch " + std::to_string(out_ch));
  }
}

Shape4 ConvSpec::output_shape(const Shape4& x) const {
  validate();
  if (x.c != in_ch) throw ShapeError(dim_error("conv", "input channel count", x.c, in_ch));
  const Index oh = out_h(x.h);
  const Index ow = out_w(x.w);
  if (oh < 1 || ow < 1 || x.h + 2 * padding.y - dilation.y * (kernel.y - 1) - 1 < 0 ||
      x.w + 2 * padding.x - dilation.x * (kernel.x - 1) - 1 < 0) {
    throw ShapeError("conv: non-positive output size for input " + to_string(x));
  }
  return {x.n, out_ch, oh, ow};
}

Shape4 PoolSpec::output_shape(const Shape4& x) const {
  if (kernel < 1 || stride < 1 || padding < 0) throw ShapeError("maxpool: invalid kernel/stride/padding");
  if (2 * padding > kernel) throw ShapeError("maxpool: padding exceeds half the kernel");
  if (kernel > x.h + 2 * padding || kernel > x.w + 2 * padding) {
    throw ShapeError("maxpool: kernel " + std::to_string(kernel) + " larger than padded input " + to_string(x));
  }
  return {x.n, x.c, (x.h + 2 * padding - kernel) / stride + 1, (x.w + 2 * padding - kernel) / stride + 1};
}

template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const Tensor4<S>& w, std::span<const S> bias, const ConvSpec& spec) {
  check_conv_inputs(x.shape(), w.shape(), static_cast<Index>(bias.size()), spec, "conv2d");
  const Shape4 os = spec.output_shape(x.shape());
  Tensor4<S> y(os);
  const Index cin_g = spec.in_ch / spec.groups;
  const Index cout_g = spec.out_ch / spec.groups;
  const Index k = cin_g * spec.kernel.y * spec.kernel.x;
  const Index p = os.h * os.w;
  const bool pointwise = is_pointwise(spec);
  RowMatrix<S> col;
  if (!pointwise) col.resize(k, p);

  for (Index n = 0; n < x.n(); ++n) {
    for (Index g = 0; g < spec.groups; ++g) {
      Eigen::Map<const RowMatrix<S>> wg(w.data() + g * cout_g * k, cout_g, k);
      Eigen::Map<RowMatrix<S>> yg(y.plane(n, g * cout_g), cout_g, p);
      if (pointwise) {
        Eigen::Map<const RowMatrix<S>> xg(x.plane(n, g * cin_g), cin_g, p);
        gemm_rows<S>(wg, xg, yg);
      } else {
        im2col(x.plane(n, g * cin_g), cin_g, x.h(), x.w(), spec, os.h, os.w, col.data());
        gemm_rows<S>(wg, col, yg);
      }
      if (!bias.empty()) {
        yg.colwise() += Eigen::Map<const Vector<S>>(bias.data() + g * cout_g, cout_g);
      }
    }
  }
  require_finite(y, "conv2d");
  return y;
}

template <typename S>
Tensor4<S> conv2d_naive(const Tensor4<S>& x, const Tensor4<S>& w, std::span<const S> bias,
                        const ConvSpec& spec) {
  check_conv_inputs(x.shape(), w.shape(), static_cast<Index>(bias.size()), spec, "conv2d_naive");
  const Shape4 os = spec.output_shape(x.shape());
  Tensor4<S> y(os);
  const Index cin_g = spec.in_ch / spec.groups;
  const Index cout_g = spec.out_ch / spec.groups;
  for (Index n = 0; n < os.n; ++n) {
    for (Index o = 0; o < os.c; ++o) {
      const Index g = o / cout_g;
      for (Index oy = 0; oy < os.h; ++oy) {
        for (Index ox = 0; ox < os.w; ++ox) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[static_cast<std::size_t>(o)]);
          for (Index ci = 0; ci < cin_g; ++ci) {
            for (Index ky = 0; ky < spec.kernel.y; ++ky) {
              for (Index kx = 0; kx < spec.kernel.x; ++kx) {
                const Index iy = oy * spec.stride.y - spec.padding.y + ky * spec.dilation.y;
                const Index ix = ox * spec.stride.x - spec.padding.x + kx * spec.dilation.x;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += static_cast<double>(x(n, g * cin_g + ci, iy, ix)) * static_cast<double>(w(o, ci, ky, kx));
              }
            }
          }
          y(n, o, oy, ox) = static_cast<S>(acc);
        }
      }
    }
  }
  require_finite(y, "conv2d_naive");
  return y;
}

namespace {

template <typename S>
void check_bn_params(Index channels, std::span<const S> gamma, std::span<const S> beta, std::span<const S> mean,
                     std::span<const S> var, S eps, const char* op) {
  const auto c = static_cast<std::size_t>(channels);
  if (gamma.size() != c) throw ShapeError(dim_error(op, "gamma length", static_cast<Index>(gamma.size()), channels));
  if (beta.size() != c) throw ShapeError(dim_error(op, "beta length", static_cast<Index>(beta.size()), channels));
  if (mean.size() != c) throw ShapeError(dim_error(op, "running_mean length", static_cast<Index>(mean.size()), channels));
  if (var.size() != c) throw ShapeError(dim_error(op, "running_var length", static_cast<Index>(var.size()), channels));
  for (std::size_t i = 0; i < c; ++i) {
    if (!(var[i] + eps > S(0))) {
      throw NumericError(std::string(op) + ": var + eps <= 0 at channel " + std::to_string(i));
    }
  }
}

}  // namespace

template <typename S>
Tensor4<S> batchnorm_infer(const Tensor4<S>& x, std::span<const S> gamma, std::span<const S> beta,
                           std::span<const S> mean, std::span<const S> var, S eps) {
  check_bn_params(x.c(), gamma, beta, mean, var, eps, "batchnorm_infer");
  Tensor4<S> y(x.shape());
  const Index plane = x.h() * x.w();
  for (Index c = 0; c < x.c(); ++c) {
    const auto i = static_cast<std::size_t>(c);
    const S scale = gamma[i] / std::sqrt(var[i] + eps);
    const S shift = beta[i] - mean[i] * scale;
    for (Index n = 0; n < x.n(); ++n) {
      Eigen::Map<const Vector<S>> src(x.plane(n, c), plane);
      Eigen::Map<Vector<S>> dst(y.plane(n, c), plane);
      dst = (src.array() * scale + shift).matrix();
    }
  }
  require_finite(y, "batchnorm_infer");
  return y;
}

template <typename S>
std::pair<Tensor4<S>, std::vector<S>> batchnorm_fold(const Tensor4<S>& w, std::span<const S> b,
                                                     std::span<const S> gamma, std::span<const S> beta,
                                                     std::span<const S> mean, std::span<const S> var, S eps) {
  const Index out = w.n();
  check_bn_params(out, gamma, beta, mean, var, eps, "batchnorm_fold");
  if (!b.empty() && static_cast<Index>(b.size()) != out) {
    throw ShapeError(dim_error("batchnorm_fold", "bias length", static_cast<Index>(b.size()), out));
  }
  Tensor4<S> wf = w;
  std::vector<S> bf(static_cast<std::size_t>(out));
  const Index per_out = w.c() * w.h() * w.w();
  for (Index o = 0; o < out; ++o) {
    const auto i = static_cast<std::size_t>(o);
    const S scale = gamma[i] / std::sqrt(var[i] + eps);
    Eigen::Map<Vector<S>>(wf.data() + o * per_out, per_out) *= scale;
    const S bias = b.empty() ? S(0) : b[i];
    bf[i] = (bias - mean[i]) * scale + beta[i];
  }
  return {std::move(wf), std::move(bf)};
}

template <typename S>
Tensor4<S> activation(const Tensor4<S>& x, ActKind kind) {
  Tensor4<S> y(x.shape());
  switch (kind) {
    case ActKind::Relu: y.array() = x.array().max(S(0)); break;
    case ActKind::Relu6: y.array() = x.array().max(S(0)).min(S(6)); break;
    case ActKind::Sigmoid: y.array() = S(1) / (S(1) + (-x.array()).exp()); break;
  }
  require_finite(y, "activation");
  return y;
}

template <typename S>
Tensor4<S> maxpool2d(const Tensor4<S>& x, const PoolSpec& spec) {
  const Shape4 os = spec.output_shape(x.shape());
  Tensor4<S> y(os);
  for (Index n = 0; n < os.n; ++n) {
    for (Index c = 0; c < os.c; ++c) {
      const S* src = x.plane(n, c);
      S* dst = y.plane(n, c);
      for (Index oy = 0; oy < os.h; ++oy) {
        const Index y0 = std::max<Index>(oy * spec.stride - spec.padding, 0);
        const Index y1 = std::min<Index>(oy * spec.stride - spec.padding + spec.kernel, x.h());
        for (Index ox = 0; ox < os.w; ++ox) {
          const Index x0 = std::max<Index>(ox * spec.stride - spec.padding, 0);
          const Index x1 = std::min<Index>(ox * spec.stride - spec.padding + spec.kernel, x.w());
          S best = -std::numeric_limits<S>::infinity();
          for (Index iy = y0; iy < y1; ++iy) {
            for (Index ix = x0; ix < x1; ++ix) best = std::max(best, src[iy * x.w() + ix]);
          }
          dst[oy * os.w + ox] = best;
        }
      }
    }
  }
  require_finite(y, "maxpool2d");
  return y;
}

template <typename S>
Tensor4<S> upsample_bilinear(const Tensor4<S>& x, Index out_h, Index out_w, bool align_corners) {
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear: output size must be positive");
  if (x.h() < 1 || x.w() < 1) throw ShapeError("upsample_bilinear: empty input " + to_string(x.shape()));
  Tensor4<S> y(Shape4{x.n(), x.c(), out_h, out_w});
  const auto ty = axis_taps(x.h(), out_h, align_corners);
  const auto tx = axis_taps(x.w(), out_w, align_corners);
  for (Index n = 0; n < x.n(); ++n) {
    for (Index c = 0; c < x.c(); ++c) {
      const S* src = x.plane(n, c);
      S* dst = y.plane(n, c);
      for (Index oy = 0; oy < out_h; ++oy) {
        const AxisTap& a = ty[static_cast<std::size_t>(oy)];
        const S ly = static_cast<S>(a.lambda);
        const S* r0 = src + a.i0 * x.w();
        const S* r1 = src + a.i1 * x.w();
        for (Index ox = 0; ox < out_w; ++ox) {
          const AxisTap& b = tx[static_cast<std::size_t>(ox)];
          const S lx = static_cast<S>(b.lambda);
          const S top = (S(1) - lx) * r0[b.i0] + lx * r0[b.i1];
          const S bottom = (S(1) - lx) * r1[b.i0] + lx * r1[b.i1];
          dst[oy * out_w + ox] = (S(1) - ly) * top + ly * bottom;
        }
      }
    }
  }
  require_finite(y, "upsample_bilinear");
  return y;
}

template <typename S>
Tensor4<S> ewise(const Tensor4<S>& a, const Tensor4<S>& b, EwiseOp op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("ewise: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor4<S> y(a.shape());
  if (op == EwiseOp::Mul) {
    y.array() = a.array() * b.array();
  } else {
    y.array() = a.array() + b.array();
  }
  require_finite(y, "ewise");
  return y;
}

template <typename S>
Tensor4<S> concat_channels(std::span<const Tensor4<S>* const> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape4 first = xs.front()->shape();
  Index channels = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Shape4 s = xs[i]->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: input " + std::to_string(i) + " has shape " + to_string(s) +
                       ", expected n/h/w of " + to_string(first));
    }
    channels += s.c;
  }
  Tensor4<S> y(Shape4{first.n, channels, first.h, first.w});
  const Index plane = first.h * first.w;
  for (Index n = 0; n < first.n; ++n) {
    S* dst = y.plane(n, 0);
    for (const Tensor4<S>* x : xs) {
      const S* src = x->plane(n, 0);
      dst = std::copy(src, src + x->c() * plane, dst);
    }
  }
  return y;
}

template <typename S>
Tensor4<S> concat_channels(std::span<const Tensor4<S>> xs) {
  std::vector<const Tensor4<S>*> ptrs;
  ptrs.reserve(xs.size());
  for (const auto& x : xs) ptrs.push_back(&x);
  return concat_channels<S>(std::span<const Tensor4<S>* const>(ptrs));
}

template <typename S>
Tensor4<S> slice_channels(const Tensor4<S>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.c()) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + std::to_string(x.c()) + " channels");
  }
  Tensor4<S> y(Shape4{x.n(), count, x.h(), x.w()});
  const Index plane = x.h() * x.w();
  for (Index n = 0; n < x.n(); ++n) {
    const S* src = x.plane(n, begin);
    std::copy(src, src + count * plane, y.plane(n, 0));
  }
  return y;
}

template <typename S>
Tensor4<S> flip(const Tensor4<S>& x, bool horizontal) {
  Tensor4<S> y(x.shape());
  for (Index n = 0; n < x.n(); ++n) {
    for (Index c = 0; c < x.c(); ++c) {
      for (Index i = 0; i < x.h(); ++i) {
        for (Index j = 0; j < x.w(); ++j) {
          y(n, c, i, j) = horizontal ? x(n, c, i, x.w() - 1 - j) : x(n, c, x.h() - 1 - i, j);
        }
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------

template <typename S>
ConvGrads<S> conv2d_backward(const Tensor4<S>& x, const Tensor4<S>& w, const Tensor4<S>& dy,
                             const ConvSpec& spec, bool need_dx) {
  check_conv_inputs(x.shape(), w.shape(), 0, spec, "conv2d_backward");
  const Shape4 os = spec.output_shape(x.shape());
  if (!(dy.shape() == os)) {
    throw ShapeError("conv2d_backward: grad shape " + to_string(dy.shape()) + ", expected " + to_string(os));
  }
  const Index cin_g = spec.in_ch / spec.groups;
  const Index cout_g = spec.out_ch / spec.groups;
  const Index k = cin_g * spec.kernel.y * spec.kernel.x;
  const Index p = os.h * os.w;
  const bool pointwise = is_pointwise(spec);

  ConvGrads<S> g;
  g.dw = Tensor4<S>(w.shape());
  g.db.assign(static_cast<std::size_t>(spec.out_ch), S(0));
  if (need_dx) g.dx = Tensor4<S>(x.shape());

  RowMatrix<S> col(pointwise ? 0 : k, pointwise ? 0 : p);
  RowMatrix<S> dcol(pointwise ? 0 : k, pointwise ? 0 : p);
  for (Index n = 0; n < x.n(); ++n) {
    for (Index gi = 0; gi < spec.groups; ++gi) {
      Eigen::Map<const RowMatrix<S>> wg(w.data() + gi * cout_g * k, cout_g, k);
      Eigen::Map<RowMatrix<S>> dwg(g.dw.data() + gi * cout_g * k, cout_g, k);
      Eigen::Map<const RowMatrix<S>> dyg(dy.plane(n, gi * cout_g), cout_g, p);
      Eigen::Map<Vector<S>> dbg(g.db.data() + gi * cout_g, cout_g);
      dbg += dyg.rowwise().sum();
      if (pointwise) {
        Eigen::Map<const RowMatrix<S>> xg(x.plane(n, gi * cin_g), cin_g, p);
        dwg.noalias() += dyg * xg.transpose();
        if (need_dx) {
          Eigen::Map<RowMatrix<S>> dxg(g.dx.plane(n, gi * cin_g), cin_g, p);
          dxg.noalias() += wg.transpose() * dyg;
        }
      } else {
        im2col(x.plane(n, gi * cin_g), cin_g, x.h(), x.w(), spec, os.h, os.w, col.data());
        dwg.noalias() += dyg * col.transpose();
        if (need_dx) {
          dcol.noalias() = wg.transpose() * dyg;
          col2im(dcol.data(), cin_g, x.h(), x.w(), spec, os.h, os.w, g.dx.plane(n, gi * cin_g));
        }
      }
    }
  }
  return g;
}

template <typename S>
BatchNormGrads<S> batchnorm_backward(const Tensor4<S>& x, const Tensor4<S>& dy, std::span<const S> gamma,
                                     std::span<const S> mean, std::span<const S> var, S eps) {
  BatchNormGrads<S> g;
  g.dx = Tensor4<S>(x.shape());
  g.dgamma.assign(static_cast<std::size_t>(x.c()), S(0));
  g.dbeta.assign(static_cast<std::size_t>(x.c()), S(0));
  const Index plane = x.h() * x.w();
  for (Index c = 0; c < x.c(); ++c) {
    const auto i = static_cast<std::size_t>(c);
    const S inv_std = S(1) / std::sqrt(var[i] + eps);
    for (Index n = 0; n < x.n(); ++n) {
      Eigen::Map<const Vector<S>> xs(x.plane(n, c), plane);
      Eigen::Map<const Vector<S>> gs(dy.plane(n, c), plane);
      Eigen::Map<Vector<S>> dx(g.dx.plane(n, c), plane);
      dx = gs * (gamma[i] * inv_std);
      g.dbeta[i] += gs.sum();
      g.dgamma[i] += (gs.array() * (xs.array() - mean[i]) * inv_std).sum();
    }
  }
  return g;
}

template <typename S>
Tensor4<S> activation_backward(const Tensor4<S>& x, const Tensor4<S>& y, const Tensor4<S>& dy, ActKind kind) {
  Tensor4<S> dx(dy.shape());
  switch (kind) {
    case ActKind::Relu:
      dx.array() = (x.array() > S(0)).select(dy.array(), S(0));
      break;
    case ActKind::Relu6:
      dx.array() = (x.array() > S(0) && x.array() < S(6)).select(dy.array(), S(0));
      break;
    case ActKind::Sigmoid:
      dx.array() = dy.array() * y.array() * (S(1) - y.array());
      break;
  }
  return dx;
}

template <typename S>
Tensor4<S> maxpool2d_backward(const Tensor4<S>& x, const Tensor4<S>& dy, const PoolSpec& spec) {
  const Shape4 os = spec.output_shape(x.shape());
  Tensor4<S> dx(x.shape());
  for (Index n = 0; n < os.n; ++n) {
    for (Index c = 0; c < os.c; ++c) {
      const S* src = x.plane(n, c);
      const S* g = dy.plane(n, c);
      S* dst = dx.plane(n, c);
      for (Index oy = 0; oy < os.h; ++oy) {
        const Index y0 = std::max<Index>(oy * spec.stride - spec.padding, 0);
        const Index y1 = std::min<Index>(oy * spec.stride - spec.padding + spec.kernel, x.h());
        for (Index ox = 0; ox < os.w; ++ox) {
          const Index x0 = std::max<Index>(ox * spec.stride - spec.padding, 0);
          const Index x1 = std::min<Index>(ox * spec.stride - spec.padding + spec.kernel, x.w());
          Index arg = y0 * x.w() + x0;
          for (Index iy = y0; iy < y1; ++iy) {
            for (Index ix = x0; ix < x1; ++ix) {
              if (src[iy * x.w() + ix] > src[arg]) arg = iy * x.w() + ix;
            }
          }
          dst[arg] += g[oy * os.w + ox];
        }
      }
    }
  }
  return dx;
}

template <typename S>
Tensor4<S> upsample_bilinear_backward(const Tensor4<S>& dy, const Shape4& x_shape, bool align_corners) {
  Tensor4<S> dx(x_shape);
  const auto ty = axis_taps(x_shape.h, dy.h(), align_corners);
  const auto tx = axis_taps(x_shape.w, dy.w(), align_corners);
  for (Index n = 0; n < dy.n(); ++n) {
    for (Index c = 0; c < dy.c(); ++c) {
      const S* g = dy.plane(n, c);
      S* dst = dx.plane(n, c);
      for (Index oy = 0; oy < dy.h(); ++oy) {
        const AxisTap& a = ty[static_cast<std::size_t>(oy)];
        const S ly = static_cast<S>(a.lambda);
        S* r0 = dst + a.i0 * x_shape.w;
        S* r1 = dst + a.i1 * x_shape.w;
        for (Index ox = 0; ox < dy.w(); ++ox) {
          const AxisTap& b = tx[static_cast<std::size_t>(ox)];
          const S lx = static_cast<S>(b.lambda);
          const S v = g[oy * dy.w() + ox];
          r0[b.i0] += (S(1) - ly) * (S(1) - lx) * v;
          r0[b.i1] += (S(1) - ly) * lx * v;
          r1[b.i0] += ly * (S(1) - lx) * v;
          r1[b.i1] += ly * lx * v;
        }
      }
    }
  }
  return dx;
}

#define MSEG_INSTANTIATE_OPS(S)                                                                                  \
  template Tensor4<S> conv2d<S>(const Tensor4<S>&, const Tensor4<S>&, std::span<const S>, const ConvSpec&);      \
  template Tensor4<S> conv2d_naive<S>(const Tensor4<S>&, const Tensor4<S>&, std::span<const S>,                 \
                                      const ConvSpec&);                                                          \
  template Tensor4<S> batchnorm_infer<S>(const Tensor4<S>&, std::span<const S>, std::span<const S>,             \
                                         std::span<const S>, std::span<const S>, S);                             \
  template std::pair<Tensor4<S>, std::vector<S>> batchnorm_fold<S>(                                              \
      const Tensor4<S>&, std::span<const S>, std::span<const S>, std::span<const S>, std::span<const S>,         \
      std::span<const S>, S);                                                                                    \
  template Tensor4<S> activation<S>(const Tensor4<S>&, ActKind);                                                 \
  template Tensor4<S> maxpool2d<S>(const Tensor4<S>&, const PoolSpec&);                                          \
  template Tensor4<S> upsample_bilinear<S>(const Tensor4<S>&, Index, Index, bool);                               \
  template Tensor4<S> ewise<S>(const Tensor4<S>&, const Tensor4<S>&, EwiseOp);                                   \
  template Tensor4<S> concat_channels<S>(std::span<const Tensor4<S>* const>);                                    \
  template Tensor4<S> concat_channels<S>(std::span<const Tensor4<S>>);                                           \
  template Tensor4<S> slice_channels<S>(const Tensor4<S>&, Index, Index);                                        \
  template Tensor4<S> flip<S>(const Tensor4<S>&, bool);                                                          \
  template ConvGrads<S> conv2d_backward<S>(const Tensor4<S>&, const Tensor4<S>&, const Tensor4<S>&,              \
                                           const ConvSpec&, bool);                                               \
  template BatchNormGrads<S> batchnorm_backward<S>(const Tensor4<S>&, const Tensor4<S>&, std::span<const S>,    \
                                                   std::span<const S>, std::span<const S>, S);                   \
  template Tensor4<S> activation_backward<S>(const Tensor4<S>&, const Tensor4<S>&, const Tensor4<S>&, ActKind);  \
  template Tensor4<S> maxpool2d_backward<S>(const Tensor4<S>&, const Tensor4<S>&, const PoolSpec&);              \
  template Tensor4<S> upsample_bilinear_backward<S>(const Tensor4<S>&, const Shape4&, bool);

MSEG_INSTANTIATE_OPS(float)
MSEG_INSTANTIATE_OPS(double)

#undef MSEG_INSTANTIATE_OPS

}  // namespace mseg
