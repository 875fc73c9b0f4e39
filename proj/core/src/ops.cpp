#include "segcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace segcaps::ops {

using detail::Node;

namespace {

std::vector<double>* grad_of(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

enum class Bcast { none, lhs_scalar, rhs_scalar };

Bcast check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) throw Error(std::string(op) + ": undefined operand");
  if (a.shape() == b.shape()) return Bcast::none;
  if (a.rank() == 0) return Bcast::lhs_scalar;
  if (b.rank() == 0) return Bcast::rhs_scalar;
  throw ShapeError(op, a.shape(), b.shape());
}

// f(x, y) is the value, dx(x, y) and dy(x, y) the partials.
template <class F, class DX, class DY>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DX dx, DY dy) {
  const Bcast mode = check_binary(op, a, b);
  const Shape shape = mode == Bcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t as = mode == Bcast::lhs_scalar ? 0 : 1;
  const std::size_t bs = mode == Bcast::rhs_scalar ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * as], bv[i * bs]);
  return make_result(op, shape, std::move(out), {a, b}, [=](Node& self) {
    const auto& A = self.inputs[0]->value;
    const auto& B = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i * as] += g[i] * dx(A[i * as], B[i * bs]);
    }
    if (auto* gb = grad_of(self.inputs[1])) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i * bs] += g[i] * dy(A[i * as], B[i * bs]);
    }
  });
}

// df(x, y) is the derivative given input x and output y.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  if (!a.defined()) throw Error(std::string(op) + ": undefined operand");
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [=](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * df(x[i], self.value[i]);
    }
  });
}

// Splits a shape around one axis into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError(op, s, Shape{axis}, "axis out of range");
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct ConvGeom {
  std::size_t ci, h, w, co, oh, ow, kh, kw, stride, pad_top, pad_left;
};

ConvGeom conv_geom(const char* op, const Shape& in, const Shape& k, const Conv2dOptions& opt) {
  if (in.size() != 3 || k.size() != 4) throw ShapeError(op, in, k, "expected input [C,H,W] and kernel [Co,Ci,kh,kw]");
  if (in[0] != k[1]) throw ShapeError(op, in, k, "input channels differ from kernel C_in");
  if (opt.stride == 0) throw Error(std::string(op) + ": stride must be positive");
  ConvGeom g{};
  g.ci = in[0];
  g.h = in[1];
  g.w = in[2];
  g.co = k[0];
  g.kh = k[2];
  g.kw = k[3];
  g.stride = opt.stride;
  if (opt.padding == Padding::same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError(op, in, k, "same padding requires odd kernel dims");
    g.pad_top = same_pad_before(g.h, g.kh, g.stride);
    g.pad_left = same_pad_before(g.w, g.kw, g.stride);
  } else {
    if (g.kh > g.h || g.kw > g.w) throw ShapeError(op, in, k, "valid conv kernel larger than input");
  }
  g.oh = conv_output_size(g.h, g.kh, g.stride, opt.padding);
  g.ow = conv_output_size(g.w, g.kw, g.stride, opt.padding);
  return g;
}

// Range of output coordinates o with 0 <= o*stride + tap - pad < n.
void valid_range(std::size_t n, std::size_t out, std::size_t stride, std::size_t tap,
                 std::size_t pad, std::size_t& lo, std::size_t& hi) {
  const long long t = static_cast<long long>(tap) - static_cast<long long>(pad);
  const long long s = static_cast<long long>(stride);
  long long l = 0;
  if (t < 0) l = (-t + s - 1) / s;
  long long h = (static_cast<long long>(n) - 1 - t);
  h = h < 0 ? -1 : h / s;
  h = std::min<long long>(h, static_cast<long long>(out) - 1);
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);
}

// out[co, oy, ox] += k[co, ci, i, j] * x[ci, oy*s + i - pt, ox*s + j - pl]
void conv_forward(const ConvGeom& g, const double* x, const double* k, double* out) {
  for (std::size_t co = 0; co < g.co; ++co) {
    double* o = out + co * g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.ci; ++ci) {
      const double* xc = x + ci * g.h * g.w;
      for (std::size_t i = 0; i < g.kh; ++i) {
        std::size_t y0, y1;
        valid_range(g.h, g.oh, g.stride, i, g.pad_top, y0, y1);
        for (std::size_t j = 0; j < g.kw; ++j) {
          const double wv = k[((co * g.ci + ci) * g.kh + i) * g.kw + j];
          std::size_t x0, x1;
          valid_range(g.w, g.ow, g.stride, j, g.pad_left, x0, x1);
          if (x0 >= x1) continue;
          const std::size_t cnt = x1 - x0;
          const std::size_t col0 = x0 * g.stride + j - g.pad_left;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* row = xc + (oy * g.stride + i - g.pad_top) * g.w + col0;
            double* orow = o + oy * g.ow + x0;
            if (g.stride == 1) {
              for (std::size_t t = 0; t < cnt; ++t) orow[t] += wv * row[t];
            } else {
              for (std::size_t t = 0; t < cnt; ++t) orow[t] += wv * row[t * g.stride];
            }
          }
        }
      }
    }
  }
}

// gx[ci, iy, ix] += k[co, ci, i, j] * gy[co, oy, ox]  (adjoint of conv_forward)
void conv_adjoint(const ConvGeom& g, const double* gy, const double* k, double* gx) {
  for (std::size_t co = 0; co < g.co; ++co) {
    const double* go = gy + co * g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.ci; ++ci) {
      double* xc = gx + ci * g.h * g.w;
      for (std::size_t i = 0; i < g.kh; ++i) {
        std::size_t y0, y1;
        valid_range(g.h, g.oh, g.stride, i, g.pad_top, y0, y1);
        for (std::size_t j = 0; j < g.kw; ++j) {
          const double wv = k[((co * g.ci + ci) * g.kh + i) * g.kw + j];
          std::size_t x0, x1;
          valid_range(g.w, g.ow, g.stride, j, g.pad_left, x0, x1);
          if (x0 >= x1) continue;
          const std::size_t cnt = x1 - x0;
          const std::size_t col0 = x0 * g.stride + j - g.pad_left;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            double* row = xc + (oy * g.stride + i - g.pad_top) * g.w + col0;
            const double* grow = go + oy * g.ow + x0;
            if (g.stride == 1) {
              for (std::size_t t = 0; t < cnt; ++t) row[t] += wv * grow[t];
            } else {
              for (std::size_t t = 0; t < cnt; ++t) row[t * g.stride] += wv * grow[t];
            }
          }
        }
      }
    }
  }
}

// gk[co, ci, i, j] += sum gy[co, oy, ox] * x[ci, oy*s + i - pt, ox*s + j - pl]
void conv_kernel_grad(const ConvGeom& g, const double* x, const double* gy, double* gk) {
  std::vector<double> lane(g.ow);
  for (std::size_t co = 0; co < g.co; ++co) {
    const double* go = gy + co * g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.ci; ++ci) {
      const double* xc = x + ci * g.h * g.w;
      for (std::size_t i = 0; i < g.kh; ++i) {
        std::size_t y0, y1;
        valid_range(g.h, g.oh, g.stride, i, g.pad_top, y0, y1);
        for (std::size_t j = 0; j < g.kw; ++j) {
          std::size_t x0, x1;
          valid_range(g.w, g.ow, g.stride, j, g.pad_left, x0, x1);
          if (x0 >= x1) continue;
          const std::size_t cnt = x1 - x0;
          const std::size_t col0 = x0 * g.stride + j - g.pad_left;
          // Column-wise partial sums keep the inner loop free of a serial
          // reduction so it vectorizes.
          std::fill_n(lane.begin(), cnt, 0.0);
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* row = xc + (oy * g.stride + i - g.pad_top) * g.w + col0;
            const double* grow = go + oy * g.ow + x0;
            if (g.stride == 1) {
              for (std::size_t t = 0; t < cnt; ++t) lane[t] += grow[t] * row[t];
            } else {
              for (std::size_t t = 0; t < cnt; ++t) lane[t] += grow[t] * row[t * g.stride];
            }
          }
          double acc = 0.0;
          for (std::size_t t = 0; t < cnt; ++t) acc += lane[t];
          gk[((co * g.ci + ci) * g.kh + i) * g.kw + j] += acc;
        }
      }
    }
  }
}

void check_bias(const char* op, const Tensor& bias, std::size_t channels) {
  if (bias.rank() != 1 || bias.dim(0) != channels) {
    throw ShapeError(op, bias.shape(), Shape{channels}, "bias must be [C_out]");
  }
}

Tensor conv2d_impl(const Tensor& input, const Tensor& kernel, const Tensor* bias, Conv2dOptions opt) {
  const ConvGeom g = conv_geom("conv2d", input.shape(), kernel.shape(), opt);
  if (bias) check_bias("conv2d", *bias, g.co);
  std::vector<double> out(g.co * g.oh * g.ow, 0.0);
  if (bias) {
    for (std::size_t c = 0; c < g.co; ++c) {
      std::fill_n(out.begin() + c * g.oh * g.ow, g.oh * g.ow, (*bias)[c]);
    }
  }
  conv_forward(g, input.data().data(), kernel.data().data(), out.data());
  std::vector<Tensor> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result("conv2d", Shape{g.co, g.oh, g.ow}, std::move(out), std::move(inputs), [g](Node& self) {
    const double* gy = self.grad.data();
    if (auto* gx = grad_of(self.inputs[0])) conv_adjoint(g, gy, self.inputs[1]->value.data(), gx->data());
    if (auto* gk = grad_of(self.inputs[1])) conv_kernel_grad(g, self.inputs[0]->value.data(), gy, gk->data());
    if (self.inputs.size() > 2) {
      if (auto* gb = grad_of(self.inputs[2])) {
        for (std::size_t c = 0; c < g.co; ++c) {
          double acc = 0.0;
          for (std::size_t p = 0; p < g.oh * g.ow; ++p) acc += gy[c * g.oh * g.ow + p];
          (*gb)[c] += acc;
        }
      }
    }
  });
}

Tensor conv2d_transpose_impl(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                             Conv2dOptions opt, std::size_t out_h, std::size_t out_w) {
  const Shape& ys = input.shape();
  const Shape& ks = kernel.shape();
  if (ys.size() != 3 || ks.size() != 4) throw ShapeError("conv2d_transpose", ys, ks, "expected input [C,H,W] and kernel [Co,Ci,kh,kw]");
  if (ys[0] != ks[0]) throw ShapeError("conv2d_transpose", ys, ks, "input channels differ from kernel C_out");
  if (opt.stride == 0) throw Error("conv2d_transpose: stride must be positive");
  if (out_h == 0) out_h = opt.padding == Padding::same ? ys[1] * opt.stride : (ys[1] - 1) * opt.stride + ks[2];
  if (out_w == 0) out_w = opt.padding == Padding::same ? ys[2] * opt.stride : (ys[2] - 1) * opt.stride + ks[3];
  const ConvGeom g = conv_geom("conv2d_transpose", Shape{ks[1], out_h, out_w}, ks, opt);
  if (g.oh != ys[1] || g.ow != ys[2]) {
    throw ShapeError("conv2d_transpose", ys, Shape{ks[1], out_h, out_w}, "requested output size is not a conv2d preimage of the input");
  }
  if (bias) check_bias("conv2d_transpose", *bias, g.ci);
  std::vector<double> out(g.ci * g.h * g.w, 0.0);
  if (bias) {
    for (std::size_t c = 0; c < g.ci; ++c) std::fill_n(out.begin() + c * g.h * g.w, g.h * g.w, (*bias)[c]);
  }
  conv_adjoint(g, input.data().data(), kernel.data().data(), out.data());
  std::vector<Tensor> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result("conv2d_transpose", Shape{g.ci, g.h, g.w}, std::move(out), std::move(inputs), [g](Node& self) {
    const double* gx = self.grad.data();
    if (auto* gy = grad_of(self.inputs[0])) conv_forward(g, gx, self.inputs[1]->value.data(), gy->data());
    if (auto* gk = grad_of(self.inputs[1])) conv_kernel_grad(g, gx, self.inputs[0]->value.data(), gk->data());
    if (self.inputs.size() > 2) {
      if (auto* gb = grad_of(self.inputs[2])) {
        for (std::size_t c = 0; c < g.ci; ++c) {
          double acc = 0.0;
          for (std::size_t p = 0; p < g.h * g.w; ++p) acc += gx[c * g.h * g.w + p];
          (*gb)[c] += acc;
        }
      }
    }
  });
}

Tensor reduce_sum(const char* op, const Tensor& a, std::vector<std::size_t> axes, double scale) {
  const Shape& s = a.shape();
  std::vector<bool> reduced(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size()) throw ShapeError(op, s, Shape{ax}, "axis out of range");
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(s[i]);
  }
  // Map each input index to its output index.
  const std::size_t n = a.numel();
  std::vector<std::size_t> target(n);
  {
    std::vector<std::size_t> idx(s.size(), 0);
    const auto ostr = strides_of(out_shape);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t o = 0, oa = 0;
      for (std::size_t d = 0; d < s.size(); ++d) {
        if (!reduced[d]) o += idx[d] * ostr[oa++];
      }
      target[flat] = o;
      for (std::size_t d = s.size(); d-- > 0;) {
        if (++idx[d] < s[d]) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[target[i]] += av[i];
  if (scale != 1.0) {
    for (auto& v : out) v *= scale;
  }
  return make_result(op, out_shape, std::move(out), {a},
                     [target = std::move(target), scale](Node& self) {
                       if (auto* ga = grad_of(self.inputs[0])) {
                         for (std::size_t i = 0; i < target.size(); ++i) (*ga)[i] += scale * self.grad[target[i]];
                       }
                     });
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (kernel > in) return 0;
  return (in - kernel) / stride + 1;
}

std::size_t same_pad_before(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const long long total = static_cast<long long>((out - 1) * stride + kernel) - static_cast<long long>(in);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double s) {
  return unary("mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  }
  return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& g = self.grad;
    const auto& A = self.inputs[0]->value;
    const auto& B = self.inputs[1]->value;
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (auto* gb = grad_of(self.inputs[1])) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions opt) {
  return conv2d_impl(input, kernel, nullptr, opt);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Conv2dOptions opt) {
  return conv2d_impl(input, kernel, &bias, opt);
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, Conv2dOptions opt,
                        std::size_t out_h, std::size_t out_w) {
  return conv2d_transpose_impl(input, kernel, nullptr, opt, out_h, out_w);
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        Conv2dOptions opt, std::size_t out_h, std::size_t out_w) {
  return conv2d_transpose_impl(input, kernel, &bias, opt, out_h, out_w);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape, "element count differs");
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

Tensor permute(const Tensor& a, std::vector<std::size_t> axes) {
  const Shape& s = a.shape();
  if (axes.size() != s.size()) throw ShapeError("permute", s, Shape(axes.begin(), axes.end()), "axis count differs from rank");
  std::vector<bool> used(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size() || used[ax]) throw ShapeError("permute", s, Shape(axes.begin(), axes.end()), "not a permutation");
    used[ax] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  const auto in_str = strides_of(s);
  // source[i] = input flat index read by output flat index i
  const std::size_t n = a.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < s.size(); ++d) src += idx[d] * in_str[axes[d]];
    source[flat] = src;
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[source[i]];
  return make_result("permute", out_shape, std::move(out), {a}, [source = std::move(source)](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < source.size(); ++i) (*ga)[source[i]] += self.grad[i];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit sp = split_at("slice", a.shape(), axis);
  if (begin > end || end > sp.len) throw ShapeError("slice", a.shape(), Shape{begin, end}, "range out of bounds");
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(sp.outer * len * sp.inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.begin() + (o * sp.len + begin) * sp.inner, len * sp.inner, out.begin() + o * len * sp.inner);
  return make_result("slice", out_shape, std::move(out), {a}, [sp, begin, len](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < len * sp.inner; ++i)
          (*ga)[(o * sp.len + begin) * sp.inner + i] += self.grad[o * len * sp.inner + i];
    }
  });
}

Tensor pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after, double value) {
  const AxisSplit sp = split_at("pad", a.shape(), axis);
  Shape out_shape = a.shape();
  const std::size_t len = sp.len + before + after;
  out_shape[axis] = len;
  std::vector<double> out(sp.outer * len * sp.inner, value);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.begin() + o * sp.len * sp.inner, sp.len * sp.inner, out.begin() + (o * len + before) * sp.inner);
  return make_result("pad", out_shape, std::move(out), {a}, [sp, before, len](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.len * sp.inner; ++i)
          (*ga)[o * sp.len * sp.inner + i] += self.grad[(o * len + before) * sp.inner + i];
    }
  });
}

Tensor sum(const Tensor& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum("sum", a, std::move(axes), 1.0);
}

Tensor sum(const Tensor& a, std::vector<std::size_t> axes) { return reduce_sum("sum", a, std::move(axes), 1.0); }

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw Error("mean: empty tensor");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum("mean", a, std::move(axes), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::vector<std::size_t> axes) {
  std::size_t count = 1;
  for (auto ax : axes) count *= ax < a.rank() ? a.dim(ax) : 1;
  if (count == 0) throw Error("mean: empty reduction");
  return reduce_sum("mean", a, std::move(axes), 1.0 / static_cast<double>(count));
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit sp = split_at("softmax", a.shape(), axis);
  const auto av = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = av[base];
      for (std::size_t k = 1; k < sp.len; ++k) mx = std::max(mx, av[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const double e = std::exp(av[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= z;
    }
  return make_result("softmax", a.shape(), std::move(out), {a}, [sp](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      const auto& y = self.value;
      const auto& g = self.grad;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          double s = 0.0;
          for (std::size_t k = 0; k < sp.len; ++k) s += y[base + k * sp.inner] * g[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.len; ++k) {
            const std::size_t i = base + k * sp.inner;
            (*ga)[i] += y[i] * (g[i] - s);
          }
        }
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor l2_norm(const Tensor& a, std::size_t axis) {
  const AxisSplit sp = split_at("l2_norm", a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  const auto av = a.data();
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      double s = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const double v = av[(o * sp.len + k) * sp.inner + in];
        s += v * v;
      }
      out[o * sp.inner + in] = std::sqrt(s);
    }
  return make_result("l2_norm", out_shape, std::move(out), {a}, [sp](Node& self) {
    if (auto* ga = grad_of(self.inputs[0])) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const double nrm = self.value[o * sp.inner + in];
          if (nrm == 0.0) continue;
          const double g = self.grad[o * sp.inner + in] / nrm;
          for (std::size_t k = 0; k < sp.len; ++k) {
            const std::size_t i = (o * sp.len + k) * sp.inner + in;
            (*ga)[i] += g * x[i];
          }
        }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const AxisSplit sp0 = split_at("concat", s0, axis);
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat", s0, s, "rank differs");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) throw ShapeError("concat", s0, s, "non-concatenated dims differ");
    }
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(sp0.outer * total * sp0.inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const std::size_t chunk = lens[p] * sp0.inner;
    for (std::size_t o = 0; o < sp0.outer; ++o)
      std::copy_n(pv.begin() + o * chunk, chunk, out.begin() + (o * total + offset) * sp0.inner);
    offset += lens[p];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat", out_shape, std::move(out), std::move(inputs),
                     [lens, total, outer = sp0.outer, inner = sp0.inner](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < lens.size(); ++p) {
                         const std::size_t chunk = lens[p] * inner;
                         if (auto* gp = grad_of(self.inputs[p])) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < chunk; ++i)
                               (*gp)[o * chunk + i] += self.grad[(o * total + offset) * inner + i];
                         }
                         offset += lens[p];
                       }
                     });
}

Tensor stack(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw Error("stack: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis > s0.size()) throw ShapeError("stack", s0, Shape{axis}, "axis out of range");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != s0) throw ShapeError("stack", s0, p.shape(), "stacked tensors must share a shape");
    Shape s = s0;
    s.insert(s.begin() + static_cast<long>(axis), 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, axis);
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot", a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return s;
}

}  // namespace segcaps::ops
