// Differentiable primitives on Tensor<T>: elementwise arithmetic, matmul,
// 2-D cross-correlation, pooling, activations, upper-bound clipping and
// rejection, softmax cross-entropy, and the reductions used by the losses.
// Inner products and reductions accumulate in double regardless of T.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "aclip/tensor.hpp"

namespace aclip {

enum class Activation { None, ReLU, LeakyReLU, ELU, Tanh, Sigmoid, Softplus };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::ReLU: return "relu";
    case Activation::LeakyReLU: return "leaky_relu";
    case Activation::ELU: return "elu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softplus: return "softplus";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "none") return Activation::None;
  if (name == "relu") return Activation::ReLU;
  if (name == "leaky_relu") return Activation::LeakyReLU;
  if (name == "elu") return Activation::ELU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "softplus") return Activation::Softplus;
  throw config_error("unknown activation '" + name + "'");
}

// Activations whose range is bounded below by zero; their upper bounds are
// clamped nonnegative during tightening.
inline bool activation_nonnegative(Activation a) {
  return a == Activation::ReLU || a == Activation::Sigmoid ||
         a == Activation::Softplus;
}

namespace detail {

template <typename T>
bool wants(const Tensor<T>& t) {
  return t.node()->wants_grad();
}

inline double act_forward(Activation kind, double x) {
  switch (kind) {
    case Activation::None: return x;
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? x : 0.01 * x;
    case Activation::ELU: return x > 0.0 ? x : std::expm1(x);
    case Activation::Tanh: return std::tanh(x);
    case Activation::Sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
    case Activation::Softplus:
      return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
  }
  return x;
}

inline double act_derivative(Activation kind, double x) {
  switch (kind) {
    case Activation::None: return 1.0;
    case Activation::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? 1.0 : 0.01;
    case Activation::ELU: return x > 0.0 ? 1.0 : std::exp(x);
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::Sigmoid: {
      const double s = act_forward(Activation::Sigmoid, x);
      return s * (1.0 - s);
    }
    case Activation::Softplus:
      return act_forward(Activation::Sigmoid, x);
  }
  return 1.0;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  detail::check_finite(out, "add");
  if (!grad_enabled() || (!detail::wants(a) && !detail::wants(b)))
    return Tensor<T>::from_values(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_recorded(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const typename Tensor<T>::Node& node) {
        std::vector<double> g(node.grad.begin(), node.grad.end());
        detail::accum_grad(an, g);
        detail::accum_grad(bn, g);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  detail::check_finite(out, "sub");
  if (!grad_enabled() || (!detail::wants(a) && !detail::wants(b)))
    return Tensor<T>::from_values(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_recorded(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const typename Tensor<T>::Node& node) {
        const std::size_t n = node.grad.size();
        std::vector<double> g(n), neg(n);
        for (std::size_t i = 0; i < n; ++i) {
          g[i] = static_cast<double>(node.grad[i]);
          neg[i] = -g[i];
        }
        detail::accum_grad(an, g);
        detail::accum_grad(bn, neg);
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  detail::check_finite(out, "mul");
  if (!grad_enabled() || (!detail::wants(a) && !detail::wants(b)))
    return Tensor<T>::from_values(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_recorded(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const typename Tensor<T>::Node& node) {
        const std::size_t n = node.grad.size();
        std::vector<double> ga(n), gb(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double g = static_cast<double>(node.grad[i]);
          ga[i] = g * static_cast<double>(bn->values[i]);
          gb[i] = g * static_cast<double>(an->values[i]);
        }
        detail::accum_grad(an, ga);
        detail::accum_grad(bn, gb);
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(static_cast<double>(av[i]) * c);
  detail::check_finite(out, "scale");
  if (!grad_enabled() || !detail::wants(a))
    return Tensor<T>::from_values(a.shape(), std::move(out));
  auto an = a.node();
  return Tensor<T>::make_recorded(
      a.shape(), std::move(out), {an},
      [an, c](const typename Tensor<T>::Node& node) {
        std::vector<double> g(node.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] = c * static_cast<double>(node.grad[i]);
        detail::accum_grad(an, g);
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  if (!grad_enabled() || !detail::wants(a))
    return Tensor<T>::from_values(std::move(shape), std::move(out));
  auto an = a.node();
  return Tensor<T>::make_recorded(
      std::move(shape), std::move(out), {an},
      [an](const typename Tensor<T>::Node& node) {
        std::vector<double> g(node.grad.begin(), node.grad.end());
        detail::accum_grad(an, g);
      });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, {a.size()});
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n);
  {
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t)
          acc += static_cast<double>(ap[i * k + t]) *
                 static_cast<double>(bp[t * n + j]);
        out[i * n + j] = static_cast<T>(acc);
      }
  }
  detail::check_finite(out, "matmul");
  if (!grad_enabled() || (!detail::wants(a) && !detail::wants(b)))
    return Tensor<T>::from_values({m, n}, std::move(out));
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_recorded(
      {m, n}, std::move(out), {an, bn},
      [an, bn, m, k, n](const typename Tensor<T>::Node& node) {
        if (an->wants_grad()) {
          std::vector<double> ga(m * k, 0.0);  // G * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += static_cast<double>(node.grad[i * n + j]) *
                       static_cast<double>(bn->values[t * n + j]);
              ga[i * k + t] = acc;
            }
          detail::accum_grad(an, ga);
        }
        if (bn->wants_grad()) {
          std::vector<double> gb(k * n, 0.0);  // A^T * G
          for (std::size_t t = 0; t < k; ++t)
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                acc += static_cast<double>(an->values[i * k + t]) *
                       static_cast<double>(node.grad[i * n + j]);
              gb[t * n + j] = acc;
            }
          detail::accum_grad(bn, gb);
        }
      });
}

// 2-D cross-correlation over a single [C_in,H,W] image with a
// [C_out,C_in,kh,kw] kernel stack.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride,
                 int padding) {
  if (input.rank() != 3 || kernel.rank() != 4)
    throw shape_error("conv2d: expected [C,H,W] input and [O,C,kh,kw] kernel");
  if (stride < 1 || padding < 0)
    throw config_error("conv2d: stride must be >= 1 and padding >= 0");
  const std::size_t cin = input.shape()[0], h = input.shape()[1],
                    w = input.shape()[2];
  const std::size_t cout = kernel.shape()[0], kh = kernel.shape()[2],
                    kw = kernel.shape()[3];
  if (kernel.shape()[1] != cin)
    throw shape_error("conv2d: kernel expects " +
                      std::to_string(kernel.shape()[1]) + " channels, input has " +
                      std::to_string(cin));
  const long ho_l = (static_cast<long>(h) + 2L * padding - static_cast<long>(kh)) / stride + 1;
  const long wo_l = (static_cast<long>(w) + 2L * padding - static_cast<long>(kw)) / stride + 1;
  if (ho_l < 1 || wo_l < 1 ||
      static_cast<long>(h) + 2L * padding < static_cast<long>(kh) ||
      static_cast<long>(w) + 2L * padding < static_cast<long>(kw))
    throw shape_error("conv2d: non-positive output extents");
  const std::size_t ho = static_cast<std::size_t>(ho_l),
                    wo = static_cast<std::size_t>(wo_l);

  std::vector<T> out(cout * ho * wo);
  const T* in = input.values().data();
  const T* kn = kernel.values().data();
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        const long iy0 = static_cast<long>(oy) * stride - padding;
        const long ix0 = static_cast<long>(ox) * stride - padding;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = iy0 + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const T* in_row = in + (ci * h + static_cast<std::size_t>(iy)) * w;
            const T* k_row = kn + ((co * cin + ci) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = ix0 + static_cast<long>(kx);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += static_cast<double>(in_row[ix]) *
                     static_cast<double>(k_row[kx]);
            }
          }
        out[(co * ho + oy) * wo + ox] = static_cast<T>(acc);
      }
  detail::check_finite(out, "conv2d");
  if (!grad_enabled() || (!detail::wants(input) && !detail::wants(kernel)))
    return Tensor<T>::from_values({cout, ho, wo}, std::move(out));
  auto xn = input.node(), wn = kernel.node();
  return Tensor<T>::make_recorded(
      {cout, ho, wo}, std::move(out), {xn, wn},
      [xn, wn, cin, h, w, cout, kh, kw, ho, wo, stride,
       padding](const typename Tensor<T>::Node& node) {
        const T* g = node.grad.data();
        if (xn->wants_grad()) {
          std::vector<double> gx(cin * h * w, 0.0);
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double go =
                    static_cast<double>(g[(co * ho + oy) * wo + ox]);
                if (go == 0.0) continue;
                const long iy0 = static_cast<long>(oy) * stride - padding;
                const long ix0 = static_cast<long>(ox) * stride - padding;
                for (std::size_t ci = 0; ci < cin; ++ci)
                  for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = iy0 + static_cast<long>(ky);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    double* gx_row =
                        gx.data() + (ci * h + static_cast<std::size_t>(iy)) * w;
                    const T* k_row =
                        wn->values.data() + ((co * cin + ci) * kh + ky) * kw;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const long ix = ix0 + static_cast<long>(kx);
                      if (ix < 0 || ix >= static_cast<long>(w)) continue;
                      gx_row[ix] += go * static_cast<double>(k_row[kx]);
                    }
                  }
              }
          detail::accum_grad(xn, gx);
        }
        if (wn->wants_grad()) {
          std::vector<double> gw(cout * cin * kh * kw, 0.0);
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double go =
                    static_cast<double>(g[(co * ho + oy) * wo + ox]);
                if (go == 0.0) continue;
                const long iy0 = static_cast<long>(oy) * stride - padding;
                const long ix0 = static_cast<long>(ox) * stride - padding;
                for (std::size_t ci = 0; ci < cin; ++ci)
                  for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = iy0 + static_cast<long>(ky);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    const T* in_row = xn->values.data() +
                                      (ci * h + static_cast<std::size_t>(iy)) * w;
                    double* gw_row =
                        gw.data() + ((co * cin + ci) * kh + ky) * kw;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const long ix = ix0 + static_cast<long>(kx);
                      if (ix < 0 || ix >= static_cast<long>(w)) continue;
                      gw_row[kx] += go * static_cast<double>(in_row[ix]);
                    }
                  }
              }
          detail::accum_grad(wn, gw);
        }
      });
}

// Adds a per-channel bias vector [C] to a [C,H,W] map.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.shape()[0] != x.shape()[0])
    throw shape_error("add_channel_bias: need [C,H,W] and [C]");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  std::vector<T> out(x.size());
  auto xv = x.values(), bv = bias.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < hw; ++i)
      out[ci * hw + i] = xv[ci * hw + i] + bv[ci];
  detail::check_finite(out, "add_channel_bias");
  if (!grad_enabled() || (!detail::wants(x) && !detail::wants(bias)))
    return Tensor<T>::from_values(x.shape(), std::move(out));
  auto xn = x.node(), bn = bias.node();
  return Tensor<T>::make_recorded(
      x.shape(), std::move(out), {xn, bn},
      [xn, bn, c, hw](const typename Tensor<T>::Node& node) {
        if (xn->wants_grad()) {
          std::vector<double> gx(node.grad.begin(), node.grad.end());
          detail::accum_grad(xn, gx);
        }
        if (bn->wants_grad()) {
          std::vector<double> gb(c, 0.0);
          for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i)
              acc += static_cast<double>(node.grad[ci * hw + i]);
            gb[ci] = acc;
          }
          detail::accum_grad(bn, gb);
        }
      });
}

// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  if (x.rank() != 3) throw shape_error("maxpool2: expected [C,H,W]");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h < 2 || w < 2) throw shape_error("maxpool2: spatial extents below 2");
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  auto xv = x.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ci * h + 2 * oy) * w + 2 * ox;
        T best_v = xv[best];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > best_v) {  // first maximum wins on ties
              best_v = xv[idx];
              best = idx;
            }
          }
        out[(ci * ho + oy) * wo + ox] = best_v;
        argmax[(ci * ho + oy) * wo + ox] = best;
      }
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values({c, ho, wo}, std::move(out));
  auto xn = x.node();
  return Tensor<T>::make_recorded(
      {c, ho, wo}, std::move(out), {xn},
      [xn, argmax = std::move(argmax)](const typename Tensor<T>::Node& node) {
        std::vector<double> gx(xn->values.size(), 0.0);
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          gx[argmax[i]] += static_cast<double>(node.grad[i]);
        detail::accum_grad(xn, gx);
      });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  if (kind == Activation::None) return x;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(detail::act_forward(kind, static_cast<double>(xv[i])));
  detail::check_finite(out, activation_name(kind));
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values(x.shape(), std::move(out));
  auto xn = x.node();
  return Tensor<T>::make_recorded(
      x.shape(), std::move(out), {xn},
      [xn, kind](const typename Tensor<T>::Node& node) {
        std::vector<double> gx(node.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] = static_cast<double>(node.grad[i]) *
                  detail::act_derivative(kind, static_cast<double>(xn->values[i]));
        detail::accum_grad(xn, gx);
      });
}

namespace detail {

// Maps element index of x to the element of a bound tensor: identity for
// exact-shape bounds, channel lookup for [C,1,1] bounds over [C,H,W].
struct BoundIndexer {
  std::size_t plane = 0;  // 0 means exact shape
  std::size_t map(std::size_t i) const { return plane ? i / plane : i; }
};

template <typename T>
BoundIndexer bound_indexer(const Tensor<T>& x, const Tensor<T>& bound,
                           const char* op) {
  if (bound.shape() == x.shape()) return {};
  if (x.rank() == 3 && bound.rank() == 3 && bound.shape()[0] == x.shape()[0] &&
      bound.shape()[1] == 1 && bound.shape()[2] == 1)
    return {x.shape()[1] * x.shape()[2]};
  throw shape_error(std::string(op) + ": bound shape " +
                    shape_str(bound.shape()) + " not broadcastable to " +
                    shape_str(x.shape()));
}

}  // namespace detail

// Upper-bound clipping: min(x, bound) elementwise, where `bound` is either
// the exact shape of x or per-channel [C,1,1] against [C,H,W]. Equality
// passes x through, so d/dx = 1 and d/dbound = 0 at x == bound.
template <typename T>
Tensor<T> clip_upper(const Tensor<T>& x, const Tensor<T>& bound) {
  const auto ix = detail::bound_indexer(x, bound, "clip_upper");
  std::vector<T> out(x.size());
  auto xv = x.values(), bv = bound.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T b = bv[ix.map(i)];
    out[i] = xv[i] <= b ? xv[i] : b;
  }
  // A +inf bound means "unbounded": the x branch is always taken there, so
  // finite inputs keep the output finite.
  detail::check_finite(out, "clip_upper");
  if (!grad_enabled() || (!detail::wants(x) && !detail::wants(bound)))
    return Tensor<T>::from_values(x.shape(), std::move(out));
  auto xn = x.node(), bn = bound.node();
  return Tensor<T>::make_recorded(
      x.shape(), std::move(out), {xn, bn},
      [xn, bn, ix](const typename Tensor<T>::Node& node) {
        const std::size_t n = node.grad.size();
        if (xn->wants_grad()) {
          std::vector<double> gx(n, 0.0);
          for (std::size_t i = 0; i < n; ++i)
            if (xn->values[i] <= bn->values[ix.map(i)])
              gx[i] = static_cast<double>(node.grad[i]);
          detail::accum_grad(xn, gx);
        }
        if (bn->wants_grad()) {
          std::vector<double> gb(bn->values.size(), 0.0);
          for (std::size_t i = 0; i < n; ++i)
            if (xn->values[i] > bn->values[ix.map(i)])
              gb[ix.map(i)] += static_cast<double>(node.grad[i]);
          detail::accum_grad(bn, gb);
        }
      });
}

// Rejection variant: values above the bound become zero instead of the bound.
// Used at inference only; the bound receives no gradient.
template <typename T>
Tensor<T> reject_upper(const Tensor<T>& x, const Tensor<T>& bound) {
  const auto ix = detail::bound_indexer(x, bound, "reject_upper");
  std::vector<T> out(x.size());
  auto xv = x.values(), bv = bound.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] <= bv[ix.map(i)] ? xv[i] : T(0);
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values(x.shape(), std::move(out));
  auto xn = x.node(), bn = bound.node();
  return Tensor<T>::make_recorded(
      x.shape(), std::move(out), {xn},
      [xn, bn, ix](const typename Tensor<T>::Node& node) {
        std::vector<double> gx(node.grad.size(), 0.0);
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (xn->values[i] <= bn->values[ix.map(i)])
            gx[i] = static_cast<double>(node.grad[i]);
        detail::accum_grad(xn, gx);
      });
}

// Numerically stable -log softmax(logits)[label] for a 1-D logits vector.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::size_t label) {
  if (logits.rank() != 1)
    throw shape_error("softmax_cross_entropy: logits must be 1-D");
  const std::size_t c = logits.shape()[0];
  if (label >= c)
    throw index_error("softmax_cross_entropy: label " + std::to_string(label) +
                      " out of range for " + std::to_string(c) + " classes");
  auto lv = logits.values();
  double max_logit = static_cast<double>(lv[0]);
  for (std::size_t i = 1; i < c; ++i)
    max_logit = std::max(max_logit, static_cast<double>(lv[i]));
  double sum_exp = 0.0;
  std::vector<double> probs(c);
  for (std::size_t i = 0; i < c; ++i) {
    probs[i] = std::exp(static_cast<double>(lv[i]) - max_logit);
    sum_exp += probs[i];
  }
  for (auto& p : probs) p /= sum_exp;
  const double loss =
      max_logit + std::log(sum_exp) - static_cast<double>(lv[label]);
  std::vector<T> out{static_cast<T>(loss)};
  detail::check_finite(out, "softmax_cross_entropy");
  if (!grad_enabled() || !detail::wants(logits))
    return Tensor<T>::from_values({1}, std::move(out));
  auto ln = logits.node();
  return Tensor<T>::make_recorded(
      {1}, std::move(out), {ln},
      [ln, label, probs = std::move(probs)](const typename Tensor<T>::Node& node) {
        const double g = static_cast<double>(node.grad[0]);
        std::vector<double> gl(probs.size());
        for (std::size_t i = 0; i < probs.size(); ++i)
          gl[i] = g * (probs[i] - (i == label ? 1.0 : 0.0));
        detail::accum_grad(ln, gl);
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  std::vector<T> out{static_cast<T>(acc)};
  detail::check_finite(out, "sum");
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values({1}, std::move(out));
  auto xn = x.node();
  return Tensor<T>::make_recorded(
      {1}, std::move(out), {xn},
      [xn](const typename Tensor<T>::Node& node) {
        std::vector<double> gx(xn->values.size(),
                               static_cast<double>(node.grad[0]));
        detail::accum_grad(xn, gx);
      });
}

// Sum of scalar tensors (n-ary, keeps loss graphs shallow).
template <typename T>
Tensor<T> sum_of(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw config_error("sum_of: no terms");
  double acc = 0.0;
  for (const auto& t : terms) acc += static_cast<double>(t.item());
  std::vector<T> out{static_cast<T>(acc)};
  detail::check_finite(out, "sum_of");
  bool record = false;
  if (grad_enabled())
    for (const auto& t : terms) record = record || detail::wants(t);
  if (!record) return Tensor<T>::from_values({1}, std::move(out));
  std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents;
  parents.reserve(terms.size());
  for (const auto& t : terms) parents.push_back(t.node());
  return Tensor<T>::make_recorded(
      {1}, std::move(out), parents,
      [parents](const typename Tensor<T>::Node& node) {
        const std::vector<double> g{static_cast<double>(node.grad[0])};
        for (const auto& p : parents) detail::accum_grad(p, g);
      });
}

// L1 norm, sum |x_i|; subgradient sign(x), with sign(0) = 0.
template <typename T>
Tensor<T> l1_norm(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += std::fabs(static_cast<double>(v));
  std::vector<T> out{static_cast<T>(acc)};
  detail::check_finite(out, "l1_norm");
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values({1}, std::move(out));
  auto xn = x.node();
  return Tensor<T>::make_recorded(
      {1}, std::move(out), {xn},
      [xn](const typename Tensor<T>::Node& node) {
        const double g = static_cast<double>(node.grad[0]);
        std::vector<double> gx(xn->values.size(), 0.0);
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const double v = static_cast<double>(xn->values[i]);
          gx[i] = v > 0.0 ? g : (v < 0.0 ? -g : 0.0);
        }
        detail::accum_grad(xn, gx);
      });
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) {
    const double d = static_cast<double>(v);
    acc += d * d;
  }
  std::vector<T> out{static_cast<T>(acc)};
  detail::check_finite(out, "sum_squares");
  if (!grad_enabled() || !detail::wants(x))
    return Tensor<T>::from_values({1}, std::move(out));
  auto xn = x.node();
  return Tensor<T>::make_recorded(
      {1}, std::move(out), {xn},
      [xn](const typename Tensor<T>::Node& node) {
        const double g = static_cast<double>(node.grad[0]);
        std::vector<double> gx(xn->values.size());
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] = 2.0 * g * static_cast<double>(xn->values[i]);
        detail::accum_grad(xn, gx);
      });
}

}  // namespace aclip
