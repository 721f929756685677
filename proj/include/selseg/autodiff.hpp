#pragma once

// Small reverse-mode differentiation engine over NHWC float64 tensors.
// A Tape records every op of one forward pass; backward() walks it in
// reverse and accumulates into the Parameters that were fed in.

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "selseg/error.hpp"

namespace selseg::ad {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
  out << ']';
  return out.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {
    for (int d : shape) selseg::detail::require(d > 0, "tensor: dimensions must be positive");
  }
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    for (int k : shape) selseg::detail::require(k > 0, "tensor: dimensions must be positive");
    selseg::detail::require(data.size() == shape_size(shape), "tensor: data length does not match shape");
  }
  static Tensor scalar(double v) { return Tensor({1}, v); }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double item() const {
    selseg::detail::require(data.size() == 1, "tensor: item() needs a single element");
    return data[0];
  }
  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

/// Trainable weights. The tape adds into `grad`; zero it between steps.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr, {}); }

  Var parameter(Parameter& p) {
    selseg::detail::require(p.grad.shape == p.value.shape, "tape: parameter grad shape mismatch");
    return push(p.value, true, &p, {});
  }

  /// Record an op output. `fn` runs during backward only when some input
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    bool any = false;
    for (const Var& v : inputs) {
      selseg::detail::require(v.tape == this, "tape: input belongs to a different tape");
      any = any || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
#ifndef NDEBUG
    if (!value.all_finite()) throw NumericalError("autodiff: op produced a non-finite value");
#endif
    return push(std::move(value), any, nullptr, any ? std::move(fn) : Backward{});
  }

  const Tensor& value(int id) const { return node(id).value; }
  bool requires_grad(int id) const { return node(id).requires_grad; }

  /// Gradient buffer of a node, allocated on first touch.
  Tensor& grad(int id) {
    Node& n = node(id);
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }
  bool has_grad(int id) const { return !node(id).grad.data.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse record order.
  void backward(Var loss) {
    selseg::detail::require(loss.tape == this, "backward: loss is not on this tape");
    selseg::detail::require(value(loss.id).size() == 1, "backward: loss must be a scalar");
    grad(loss.id).data[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = node(id);
      if (!n.requires_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        std::vector<double>& dst = n.param->grad.data;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad.data[i];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Tensor value, bool rg, Parameter* p, Backward fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, p, std::move(fn)});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }
  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void need_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw InputError(std::string(op) + ": expected NHWC tensor, got " + shape_str(t.shape));
}

inline void need_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
  int n, h, w, ci, kh, kw, co, stride, ph, pw, ho, wo;
  int rows() const { return ho * wo; }
  int cols() const { return kh * kw * ci; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1; }
};

inline void im2col(const double* x, const ConvGeom& g, RowMat& col) {
  col.resize(g.rows(), g.cols());
  for (int oy = 0; oy < g.ho; ++oy)
    for (int ox = 0; ox < g.wo; ++ox) {
      double* row = col.data() + static_cast<std::size_t>(oy * g.wo + ox) * g.cols();
      for (int dy = 0; dy < g.kh; ++dy) {
        const int iy = oy * g.stride + dy - g.ph;
        for (int dx = 0; dx < g.kw; ++dx) {
          const int ix = ox * g.stride + dx - g.pw;
          double* dst = row + (dy * g.kw + dx) * g.ci;
          if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
            std::fill(dst, dst + g.ci, 0.0);
          } else {
            const double* src = x + (static_cast<std::size_t>(iy) * g.w + ix) * g.ci;
            std::copy(src, src + g.ci, dst);
          }
        }
      }
    }
}

inline void col2im_add(const RowMat& col, const ConvGeom& g, double* dx) {
  for (int oy = 0; oy < g.ho; ++oy)
    for (int ox = 0; ox < g.wo; ++ox) {
      const double* row = col.data() + static_cast<std::size_t>(oy * g.wo + ox) * g.cols();
      for (int dy = 0; dy < g.kh; ++dy) {
        const int iy = oy * g.stride + dy - g.ph;
        if (iy < 0 || iy >= g.h) continue;
        for (int dxk = 0; dxk < g.kw; ++dxk) {
          const int ix = ox * g.stride + dxk - g.pw;
          if (ix < 0 || ix >= g.w) continue;
          const double* src = row + (dy * g.kw + dxk) * g.ci;
          double* dst = dx + (static_cast<std::size_t>(iy) * g.w + ix) * g.ci;
          for (int c = 0; c < g.ci; ++c) dst[c] += src[c];
        }
      }
    }
}

// Half-pixel-centre bilinear weights for a factor-2 upsample along one axis:
// output o reads input (o+0.5)/2-0.5, clamped at the borders.
struct UpTap {
  int i0, i1;
  double w0, w1;
};

inline UpTap up_tap(int o, int n) {
  const int i = o / 2;
  const int j = (o % 2 == 0) ? std::max(i - 1, 0) : std::min(i + 1, n - 1);
  return {i, j, 0.75, 0.25};
}

}  // namespace detail

enum class Padding { same, valid };

/// Cross-correlation (no kernel flip). x: [N,H,W,Cin], k: [kh,kw,Cin,Cout].
inline Var conv2d(Var x, Var k, int stride = 1, Padding pad = Padding::same) {
  const Tensor& xt = x.value();
  const Tensor& kt = k.value();
  detail::need_rank4(xt, "conv2d");
  if (kt.rank() != 4) throw InputError("conv2d: kernel must be [kh,kw,Cin,Cout]");
  if (kt.dim(2) != xt.dim(3))
    throw InputError("conv2d: kernel expects " + std::to_string(kt.dim(2)) + " input channels, got " +
                     std::to_string(xt.dim(3)));
  if (kt.dim(0) % 2 == 0 || kt.dim(1) % 2 == 0) throw InputError("conv2d: kernel size must be odd");
  if (stride != 1 && stride != 2) throw InputError("conv2d: stride must be 1 or 2");

  detail::ConvGeom g{xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3), kt.dim(0), kt.dim(1), kt.dim(3),
                     stride, 0, 0, 0, 0};
  if (pad == Padding::same) {
    g.ph = (g.kh - 1) / 2;
    g.pw = (g.kw - 1) / 2;
  }
  const int span_h = g.h + 2 * g.ph - g.kh, span_w = g.w + 2 * g.pw - g.kw;
  if (span_h < 0 || span_w < 0) throw InputError("conv2d: kernel larger than padded input");
  g.ho = span_h / stride + 1;
  g.wo = span_w / stride + 1;

  const std::size_t in_stride = static_cast<std::size_t>(g.h) * g.w * g.ci;
  const std::size_t out_stride = static_cast<std::size_t>(g.rows()) * g.co;
  Tensor out({g.n, g.ho, g.wo, g.co});
  detail::CMapMat km(kt.data.data(), g.cols(), g.co);
  detail::RowMat col;
  for (int n = 0; n < g.n; ++n) {
    detail::MapMat y(out.data.data() + n * out_stride, g.rows(), g.co);
    if (g.pointwise()) {
      y.noalias() = detail::CMapMat(xt.data.data() + n * in_stride, g.rows(), g.ci) * km;
    } else {
      detail::im2col(xt.data.data() + n * in_stride, g, col);
      y.noalias() = col * km;
    }
  }

  const int xi = x.id, ki = k.id;
  return x.tape->record(std::move(out), {x, k}, [g, xi, ki, in_stride, out_stride](Tape& tp, int self) {
    const Tensor& gy = tp.grad(self);
    const double* xv = tp.value(xi).data.data();
    detail::CMapMat km(tp.value(ki).data.data(), g.cols(), g.co);
    const bool want_x = tp.requires_grad(xi), want_k = tp.requires_grad(ki);
    double* gx = want_x ? tp.grad(xi).data.data() : nullptr;
    double* gk = want_k ? tp.grad(ki).data.data() : nullptr;
    detail::RowMat col;
    for (int n = 0; n < g.n; ++n) {
      detail::CMapMat dy(gy.data.data() + n * out_stride, g.rows(), g.co);
      if (g.pointwise()) {
        if (want_k)
          detail::MapMat(gk, g.cols(), g.co).noalias() +=
              detail::CMapMat(xv + n * in_stride, g.rows(), g.ci).transpose() * dy;
        if (want_x) detail::MapMat(gx + n * in_stride, g.rows(), g.ci).noalias() += dy * km.transpose();
        continue;
      }
      if (want_k) {
        detail::im2col(xv + n * in_stride, g, col);
        detail::MapMat(gk, g.cols(), g.co).noalias() += col.transpose() * dy;
      }
      if (want_x) {
        col.noalias() = dy * km.transpose();
        detail::col2im_add(col, g, gx + n * in_stride);
      }
    }
  });
}

/// Adds b[c] to every pixel of channel c.
inline Var add_channel_bias(Var x, Var b) {
  const Tensor& xt = x.value();
  detail::need_rank4(xt, "add_channel_bias");
  const int c = xt.dim(3);
  if (b.value().size() != static_cast<std::size_t>(c)) throw InputError("add_channel_bias: bias length != channels");
  Tensor out = xt;
  const std::vector<double>& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i % c];
  const int xi = x.id, bi = b.id;
  return x.tape->record(std::move(out), {x, b}, [xi, bi, c](Tape& tp, int self) {
    const std::vector<double>& gy = tp.grad(self).data;
    if (tp.requires_grad(xi)) {
      std::vector<double>& gx = tp.grad(xi).data;
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (tp.requires_grad(bi)) {
      std::vector<double>& gb = tp.grad(bi).data;
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
    }
  });
}

/// Factor-2 bilinear upsample, half-pixel centres, edge-clamped.
inline Var bilinear_upsample(Var x, int factor = 2) {
  if (factor != 2) throw InputError("bilinear_upsample: only factor 2 is supported");
  const Tensor& xt = x.value();
  detail::need_rank4(xt, "bilinear_upsample");
  const int n = xt.dim(0), h = xt.dim(1), w = xt.dim(2), c = xt.dim(3);
  const int h2 = 2 * h, w2 = 2 * w;
  Tensor out({n, h2, w2, c});
  auto at = [c](int b, int y, int xx, int hh, int ww) {
    return (static_cast<std::size_t>(b * hh + y) * ww + xx) * c;
  };
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < h2; ++oy) {
      const detail::UpTap ty = detail::up_tap(oy, h);
      for (int ox = 0; ox < w2; ++ox) {
        const detail::UpTap tx = detail::up_tap(ox, w);
        double* dst = out.data.data() + at(b, oy, ox, h2, w2);
        const double* a = xt.data.data() + at(b, ty.i0, tx.i0, h, w);
        const double* bb = xt.data.data() + at(b, ty.i0, tx.i1, h, w);
        const double* cc = xt.data.data() + at(b, ty.i1, tx.i0, h, w);
        const double* d = xt.data.data() + at(b, ty.i1, tx.i1, h, w);
        for (int k = 0; k < c; ++k)
          dst[k] = ty.w0 * (tx.w0 * a[k] + tx.w1 * bb[k]) + ty.w1 * (tx.w0 * cc[k] + tx.w1 * d[k]);
      }
    }
  const int xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, n, h, w, c](Tape& tp, int self) {
    const Tensor& gy = tp.grad(self);
    Tensor& gx = tp.grad(xi);
    const int h2 = 2 * h, w2 = 2 * w;
    for (int b = 0; b < n; ++b)
      for (int oy = 0; oy < h2; ++oy) {
        const detail::UpTap ty = detail::up_tap(oy, h);
        for (int ox = 0; ox < w2; ++ox) {
          const detail::UpTap tx = detail::up_tap(ox, w);
          const double* src = gy.data.data() + (static_cast<std::size_t>(b * h2 + oy) * w2 + ox) * c;
          auto idx = [&](int y, int xx) { return (static_cast<std::size_t>(b * h + y) * w + xx) * c; };
          double* a = gx.data.data() + idx(ty.i0, tx.i0);
          double* bb = gx.data.data() + idx(ty.i0, tx.i1);
          double* cc = gx.data.data() + idx(ty.i1, tx.i0);
          double* d = gx.data.data() + idx(ty.i1, tx.i1);
          for (int k = 0; k < c; ++k) {
            a[k] += ty.w0 * tx.w0 * src[k];
            bb[k] += ty.w0 * tx.w1 * src[k];
            cc[k] += ty.w1 * tx.w0 * src[k];
            d[k] += ty.w1 * tx.w1 * src[k];
          }
        }
      }
  });
}

/// 2x2 mean pooling.
inline Var avg_downsample(Var x, int factor = 2) {
  if (factor != 2) throw InputError("avg_downsample: only factor 2 is supported");
  const Tensor& xt = x.value();
  detail::need_rank4(xt, "avg_downsample");
  const int n = xt.dim(0), h = xt.dim(1), w = xt.dim(2), c = xt.dim(3);
  if (h % 2 || w % 2) throw InputError("avg_downsample: H and W must be divisible by 2, got " + shape_str(xt.shape));
  const int h2 = h / 2, w2 = w / 2;
  Tensor out({n, h2, w2, c});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h2; ++y)
      for (int xx = 0; xx < w2; ++xx) {
        double* dst = out.data.data() + (static_cast<std::size_t>(b * h2 + y) * w2 + xx) * c;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const double* src = xt.data.data() + (static_cast<std::size_t>(b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
            for (int k = 0; k < c; ++k) dst[k] += 0.25 * src[k];
          }
      }
  const int xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, n, h, w, c](Tape& tp, int self) {
    const Tensor& gy = tp.grad(self);
    Tensor& gx = tp.grad(xi);
    const int h2 = h / 2, w2 = w / 2;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double* src = gy.data.data() + (static_cast<std::size_t>(b * h2 + y / 2) * w2 + xx / 2) * c;
          double* dst = gx.data.data() + (static_cast<std::size_t>(b * h + y) * w + xx) * c;
          for (int k = 0; k < c; ++k) dst[k] += 0.25 * src[k];
        }
  });
}

namespace detail {

// Elementwise op with derivative expressed through input x and output y.
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(xt.data[i]);
  const int xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, dfdx](Tape& tp, int self) {
    const std::vector<double>& xv = tp.value(xi).data;
    const std::vector<double>& yv = tp.value(self).data;
    const std::vector<double>& gy = tp.grad(self).data;
    std::vector<double>& gx = tp.grad(xi).data;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx(xv[i], yv[i]);
  });
}

inline double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var leaky_relu(Var x, double slope = 0.1) {
  return detail::unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

inline Var sigmoid(Var x) {
  return detail::unary(x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var square(Var x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var scale(Var x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var hadamard(Var a, Var b) {
  detail::need_same_shape(a.value(), b.value(), "hadamard");
  Tensor out(a.value().shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape& tp, int self) {
    const std::vector<double>& gy = tp.grad(self).data;
    if (tp.requires_grad(ai)) {
      const std::vector<double>& bv = tp.value(bi).data;
      std::vector<double>& ga = tp.grad(ai).data;
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      const std::vector<double>& av = tp.value(ai).data;
      std::vector<double>& gb = tp.grad(bi).data;
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

namespace detail {

inline Var add_scaled(Var a, Var b, double sb, const char* op) {
  need_same_shape(a.value(), b.value(), op);
  Tensor out(a.value().shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + sb * b.value().data[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, sb](Tape& tp, int self) {
    const std::vector<double>& gy = tp.grad(self).data;
    if (tp.requires_grad(ai)) {
      std::vector<double>& ga = tp.grad(ai).data;
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (tp.requires_grad(bi)) {
      std::vector<double>& gb = tp.grad(bi).data;
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sb * gy[i];
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) { return detail::add_scaled(a, b, 1.0, "add"); }
inline Var sub(Var a, Var b) { return detail::add_scaled(a, b, -1.0, "sub"); }

/// Stacks channels of a then b. Batch and spatial dims must agree.
inline Var concat_channels(Var a, Var b) {
  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  detail::need_rank4(at, "concat_channels");
  detail::need_rank4(bt, "concat_channels");
  if (at.dim(0) != bt.dim(0) || at.dim(1) != bt.dim(1) || at.dim(2) != bt.dim(2))
    throw InputError("concat_channels: shape mismatch " + shape_str(at.shape) + " vs " + shape_str(bt.shape));
  const int ca = at.dim(3), cb = bt.dim(3);
  const std::size_t pixels = at.size() / ca;
  Tensor out({at.dim(0), at.dim(1), at.dim(2), ca + cb});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(at.data.data() + p * ca, ca, out.data.data() + p * (ca + cb));
    std::copy_n(bt.data.data() + p * cb, cb, out.data.data() + p * (ca + cb) + ca);
  }
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi, ca, cb, pixels](Tape& tp, int self) {
    const double* gy = tp.grad(self).data.data();
    const int c = ca + cb;
    if (tp.requires_grad(ai)) {
      double* ga = tp.grad(ai).data.data();
      for (std::size_t p = 0; p < pixels; ++p)
        for (int k = 0; k < ca; ++k) ga[p * ca + k] += gy[p * c + k];
    }
    if (tp.requires_grad(bi)) {
      double* gb = tp.grad(bi).data.data();
      for (std::size_t p = 0; p < pixels; ++p)
        for (int k = 0; k < cb; ++k) gb[p * cb + k] += gy[p * c + ca + k];
    }
  });
}

/// Per-sample, per-channel normalisation over H x W (no affine part).
inline Var instance_norm(Var x, double eps = 1e-5) {
  const Tensor& xt = x.value();
  detail::need_rank4(xt, "instance_norm");
  const int n = xt.dim(0), c = xt.dim(3);
  const int hw = xt.dim(1) * xt.dim(2);
  Tensor out(xt.shape);
  std::vector<double> inv_std(static_cast<std::size_t>(n) * c);
  for (int b = 0; b < n; ++b) {
    const double* src = xt.data.data() + static_cast<std::size_t>(b) * hw * c;
    double* dst = out.data.data() + static_cast<std::size_t>(b) * hw * c;
    for (int k = 0; k < c; ++k) {
      double mean = 0.0;
      for (int p = 0; p < hw; ++p) mean += src[p * c + k];
      mean /= hw;
      double var = 0.0;
      for (int p = 0; p < hw; ++p) var += (src[p * c + k] - mean) * (src[p * c + k] - mean);
      var /= hw;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(b) * c + k] = is;
      for (int p = 0; p < hw; ++p) dst[p * c + k] = (src[p * c + k] - mean) * is;
    }
  }
  const int xi = x.id;
  return x.tape->record(std::move(out), {x}, [xi, n, c, hw, inv_std = std::move(inv_std)](Tape& tp, int self) {
    // dx = (dy - mean(dy) - y * mean(dy * y)) / sigma
    const double* y = tp.value(self).data.data();
    const double* gy = tp.grad(self).data.data();
    double* gx = tp.grad(xi).data.data();
    for (int b = 0; b < n; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * hw * c;
      for (int k = 0; k < c; ++k) {
        double m1 = 0.0, m2 = 0.0;
        for (int p = 0; p < hw; ++p) {
          m1 += gy[base + p * c + k];
          m2 += gy[base + p * c + k] * y[base + p * c + k];
        }
        m1 /= hw;
        m2 /= hw;
        const double is = inv_std[static_cast<std::size_t>(b) * c + k];
        for (int p = 0; p < hw; ++p) {
          const std::size_t i = base + p * c + k;
          gx[i] += is * (gy[i] - m1 - y[i] * m2);
        }
      }
    }
  });
}

/// Scalar: sum of all elements.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const int xi = x.id;
  return x.tape->record(Tensor::scalar(s), {x}, [xi](Tape& tp, int self) {
    const double g = tp.grad(self).data[0];
    for (double& v : tp.grad(xi).data) v += g;
  });
}

/// Scalar: mean of all elements.
inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Scalar: per-image pixel mean, summed over the batch and channels.
inline Var pixel_mean(Var x) {
  const Tensor& xt = x.value();
  detail::need_rank4(xt, "pixel_mean");
  return scale(sum(x), 1.0 / (static_cast<double>(xt.dim(1)) * xt.dim(2)));
}

/// Scalar: per-image pixel mean of w * x, with w a constant of x's shape.
inline Var weighted_pixel_mean(Var x, const Tensor& w) {
  detail::need_same_shape(x.value(), w, "weighted_pixel_mean");
  Var wc = x.tape->constant(w);
  return pixel_mean(hadamard(x, wc));
}

/// Scalar: per-image pixel mean of g * sqrt(ux^2 + uy^2 + eps) for a
/// single-channel u, forward differences with zero flux at the far edges.
inline Var smooth_tv(Var u, const Tensor& g, double eps = 1e-8) {
  const Tensor& ut = u.value();
  detail::need_rank4(ut, "smooth_tv");
  if (ut.dim(3) != 1) throw InputError("smooth_tv: u must have one channel");
  detail::need_same_shape(ut, g, "smooth_tv");
  const int n = ut.dim(0), h = ut.dim(1), w = ut.dim(2);
  const double inv_hw = 1.0 / (static_cast<double>(h) * w);
  // a = g / (|grad u|_eps * H * W), kept for the backward pass.
  std::vector<double> a(ut.size());
  double total = 0.0;
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(b) * h + y) * w + x;
        const double ux = x + 1 < w ? ut.data[i + 1] - ut.data[i] : 0.0;
        const double uy = y + 1 < h ? ut.data[i + w] - ut.data[i] : 0.0;
        const double s = std::sqrt(ux * ux + uy * uy + eps);
        total += g.data[i] * s;
        a[i] = g.data[i] / s * inv_hw;
      }
  const int ui = u.id;
  return u.tape->record(Tensor::scalar(total * inv_hw), {u}, [ui, n, h, w, a = std::move(a)](Tape& tp, int self) {
    const double gs = tp.grad(self).data[0];
    const std::vector<double>& uv = tp.value(ui).data;
    std::vector<double>& gu = tp.grad(ui).data;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::size_t i = (static_cast<std::size_t>(b) * h + y) * w + x;
          if (x + 1 < w) {
            const double d = gs * a[i] * (uv[i + 1] - uv[i]);
            gu[i + 1] += d;
            gu[i] -= d;
          }
          if (y + 1 < h) {
            const double d = gs * a[i] * (uv[i + w] - uv[i]);
            gu[i + w] += d;
            gu[i] -= d;
          }
        }
  });
}

// ---------------------------------------------------------------- Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  long step = 0;
  std::vector<Tensor> m, v;
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
inline void adam_step(std::span<Parameter* const> params, AdamState& st) {
  if (st.m.empty()) {
    for (const Parameter* p : params) {
      st.m.emplace_back(p->value.shape);
      st.v.emplace_back(p->value.shape);
    }
  }
  if (st.m.size() != params.size()) throw InputError("adam_step: state was built for a different parameter list");
  for (std::size_t j = 0; j < params.size(); ++j)
    if (params[j]->grad.shape != params[j]->value.shape || st.m[j].shape != params[j]->value.shape)
      throw InputError("adam_step: shape mismatch for " + params[j]->name);

  ++st.step;
  const AdamConfig& c = st.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t j = 0; j < params.size(); ++j) {
    std::vector<double>& p = params[j]->value.data;
    const std::vector<double>& g = params[j]->grad.data;
    std::vector<double>& m = st.m[j].data;
    std::vector<double>& v = st.v[j].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

// ---------------------------------------------------------- checkpoints

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

struct Reader {
  std::string_view buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw InputError("checkpoint: truncated file");
  }
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  double f64() { return std::bit_cast<double>(le(8)); }
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::string out = "SSEG";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) detail::put_f64(out, v);
  }
  return out;
}

inline NamedTensors decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "SSEG") throw InputError("checkpoint: bad magic");
  detail::Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw InputError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    r.need(len);
    std::string name(bytes.substr(r.pos, len));
    r.pos += len;
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw InputError("checkpoint: bad rank for " + name);
    Shape shape;
    std::size_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      if (d == 0) throw InputError("checkpoint: zero dimension in " + name);
      shape.push_back(static_cast<int>(d));
      total *= d;
    }
    if (total > (bytes.size() - r.pos) / 8) throw InputError("checkpoint: truncated file");
    std::vector<double> data(total);
    for (double& v : data) v = r.f64();
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != bytes.size()) throw InputError("checkpoint: trailing bytes");
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("checkpoint: write failed for " + path.string());
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace selseg::ad
