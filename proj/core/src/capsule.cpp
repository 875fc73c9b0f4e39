#include "segcaps/capsule.hpp"

#include <cmath>

#include "segcaps/ops.hpp"

namespace segcaps::caps {

using detail::Node;

namespace {

std::vector<double>* grad_of(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

// Scale factor f(|p|) with squash(p) = f * p.
inline double squash_factor(double norm) {
  return norm * norm / ((1.0 + norm * norm) * (norm + kSquashEpsilon));
}

void squash_vec(const double* p, double* v, std::size_t z) {
  double s = 0.0;
  for (std::size_t a = 0; a < z; ++a) s += p[a] * p[a];
  const double f = squash_factor(std::sqrt(s));
  for (std::size_t a = 0; a < z; ++a) v[a] = f * p[a];
}

// gp += J^T gv with J = f I + (f'(n)/n) p p^T.
void squash_vec_backward(const double* p, const double* gv, double* gp, std::size_t z) {
  double s = 0.0, pg = 0.0;
  for (std::size_t a = 0; a < z; ++a) {
    s += p[a] * p[a];
    pg += p[a] * gv[a];
  }
  const double n = std::sqrt(s);
  const double den = (1.0 + s) * (n + kSquashEpsilon);
  const double f = s / den;
  const double dden = 2.0 * n * (n + kSquashEpsilon) + (1.0 + s);
  const double fprime_over_n = (2.0 * den - n * dden) / (den * den);
  const double c = fprime_over_n * pg;
  for (std::size_t a = 0; a < z; ++a) gp[a] += f * gv[a] + c * p[a];
}

// Child coordinate read by output coordinate o through kernel tap t, or -1.
std::vector<long> tap_table(std::size_t child_extent, std::size_t out_extent, std::size_t kernel,
                            const CapsLayerSpec& spec) {
  std::vector<long> table(out_extent * kernel, -1);
  const long s = static_cast<long>(spec.stride);
  if (spec.kind == CapsKind::conv) {
    const long pad = static_cast<long>(ops::same_pad_before(child_extent, kernel, spec.stride));
    for (std::size_t o = 0; o < out_extent; ++o)
      for (std::size_t t = 0; t < kernel; ++t) {
        const long src = static_cast<long>(o) * s + static_cast<long>(t) - pad;
        if (src >= 0 && src < static_cast<long>(child_extent)) table[o * kernel + t] = src;
      }
  } else {
    // Interleaved grid of extent s*h holds child c at position c*s.
    const long pad = static_cast<long>(kernel) - 1 -
                     static_cast<long>(ops::same_pad_before(out_extent, kernel, spec.stride));
    for (std::size_t o = 0; o < out_extent; ++o)
      for (std::size_t t = 0; t < kernel; ++t) {
        const long q = static_cast<long>(o) + static_cast<long>(t) - pad;
        if (q >= 0 && q < static_cast<long>(out_extent) && q % s == 0) table[o * kernel + t] = q / s;
      }
  }
  return table;
}

Tensor predict(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec) {
  spec.validate();
  const GridDims in = grid_dims(children, spec.name);
  const Shape expected = transform_shape(in.types, in.atoms, spec);
  if (transform.shape() != expected) {
    throw ShapeError(spec.name + " predict", children.shape(), transform.shape(),
                     "transform stack must be " + shape_str(expected));
  }
  const std::size_t oh = output_extent(in.h, spec);
  const std::size_t ow = output_extent(in.w, spec);
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t ti_n = in.types, za = in.atoms;
  const std::size_t tz = spec.types * spec.atoms;
  const auto rows = tap_table(in.h, oh, kh, spec);
  const auto cols = tap_table(in.w, ow, kw, spec);

  const auto C = children.data();
  const auto M = transform.data();
  std::vector<double> out(oh * ow * ti_n * kh * kw * tz, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t ti = 0; ti < ti_n; ++ti)
        for (std::size_t i = 0; i < kh; ++i) {
          const long sy = rows[y * kh + i];
          if (sy < 0) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long sx = cols[x * kw + j];
            if (sx < 0) continue;
            const double* c = &C[((static_cast<std::size_t>(sy) * in.w + static_cast<std::size_t>(sx)) * ti_n + ti) * za];
            const double* m = &M[((ti * kh + i) * kw + j) * za * tz];
            double* u = &out[((((y * ow + x) * ti_n + ti) * kh + i) * kw + j) * tz];
            for (std::size_t a = 0; a < za; ++a) {
              const double ca = c[a];
              const double* ma = m + a * tz;
              for (std::size_t q = 0; q < tz; ++q) u[q] += ca * ma[q];
            }
          }
        }

  Shape shape{oh, ow, ti_n, kh, kw, spec.types, spec.atoms};
  const char* op = spec.kind == CapsKind::conv ? "predict_conv" : "predict_deconv";
  return make_result(op, std::move(shape), std::move(out), {children, transform},
                     [=](Node& self) {
                       const auto& Cv = self.inputs[0]->value;
                       const auto& Mv = self.inputs[1]->value;
                       auto* gc = grad_of(self.inputs[0]);
                       auto* gm = grad_of(self.inputs[1]);
                       const auto& g = self.grad;
                       for (std::size_t y = 0; y < oh; ++y)
                         for (std::size_t x = 0; x < ow; ++x)
                           for (std::size_t ti = 0; ti < ti_n; ++ti)
                             for (std::size_t i = 0; i < kh; ++i) {
                               const long sy = rows[y * kh + i];
                               if (sy < 0) continue;
                               for (std::size_t j = 0; j < kw; ++j) {
                                 const long sx = cols[x * kw + j];
                                 if (sx < 0) continue;
                                 const std::size_t coff = ((static_cast<std::size_t>(sy) * in.w + static_cast<std::size_t>(sx)) * ti_n + ti) * za;
                                 const std::size_t moff = ((ti * kh + i) * kw + j) * za * tz;
                                 const double* gu = &g[((((y * ow + x) * ti_n + ti) * kh + i) * kw + j) * tz];
                                 for (std::size_t a = 0; a < za; ++a) {
                                   if (gc) {
                                     const double* ma = &Mv[moff + a * tz];
                                     double acc = 0.0;
                                     for (std::size_t q = 0; q < tz; ++q) acc += gu[q] * ma[q];
                                     (*gc)[coff + a] += acc;
                                   }
                                   if (gm) {
                                     const double ca = Cv[coff + a];
                                     double* gma = &(*gm)[moff + a * tz];
                                     for (std::size_t q = 0; q < tz; ++q) gma[q] += ca * gu[q];
                                   }
                                 }
                               }
                             }
                     });
}

}  // namespace

void CapsLayerSpec::validate() const {
  if (kernel_h == 0 || kernel_w == 0) throw ConfigError(name + ": kernel dims must be positive");
  if (types == 0 || atoms == 0) throw ConfigError(name + ": capsule types and atoms must be positive");
  if (routing == 0) throw ConfigError(name + ": routing iterations must be >= 1");
  if (stride == 0) throw ConfigError(name + ": stride must be positive");
  if (kind == CapsKind::conv && stride == 1 && (kernel_h % 2 == 0 || kernel_w % 2 == 0)) {
    throw ConfigError(name + ": stride-1 conv capsules need odd kernel dims");
  }
  if (kind == CapsKind::deconv && stride < 2) throw ConfigError(name + ": deconv upscale factor must be >= 2");
}

GridDims grid_dims(const Tensor& grid, std::string_view what) {
  if (grid.rank() != 4) {
    throw ShapeError(std::string(what), grid.shape(), Shape{0, 0, 0, 0}, "capsule grid must be [h, w, types, atoms]");
  }
  const auto& s = grid.shape();
  if (s[0] == 0 || s[1] == 0 || s[2] == 0 || s[3] == 0) {
    throw ShapeError(std::string(what), s, Shape{1, 1, 1, 1}, "capsule grid dims must be >= 1");
  }
  return {s[0], s[1], s[2], s[3]};
}

Shape transform_shape(std::size_t child_types, std::size_t child_atoms, const CapsLayerSpec& spec) {
  return {child_types, spec.kernel_h, spec.kernel_w, child_atoms, spec.types, spec.atoms};
}

std::size_t output_extent(std::size_t extent, const CapsLayerSpec& spec) {
  return spec.kind == CapsKind::conv ? (extent + spec.stride - 1) / spec.stride : extent * spec.stride;
}

Tensor squash(const Tensor& p) {
  if (p.rank() == 0) throw ShapeError("squash", p.shape(), Shape{1}, "needs at least one axis");
  const std::size_t z = p.shape().back();
  const std::size_t n = z == 0 ? 0 : p.numel() / z;
  const auto pv = p.data();
  std::vector<double> out(p.numel());
  for (std::size_t k = 0; k < n; ++k) squash_vec(&pv[k * z], &out[k * z], z);
  return make_result("squash", p.shape(), std::move(out), {p}, [n, z](Node& self) {
    if (auto* gp = grad_of(self.inputs[0])) {
      const auto& pv = self.inputs[0]->value;
      for (std::size_t k = 0; k < n; ++k) squash_vec_backward(&pv[k * z], &self.grad[k * z], &(*gp)[k * z], z);
    }
  });
}

Tensor predict_conv(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec) {
  if (spec.kind != CapsKind::conv) throw ConfigError(spec.name + ": predict_conv needs a conv layer spec");
  return predict(children, transform, spec);
}

Tensor predict_deconv(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec) {
  if (spec.kind != CapsKind::deconv) throw ConfigError(spec.name + ": predict_deconv needs a deconv layer spec");
  return predict(children, transform, spec);
}

Tensor route(const Tensor& predictions, std::size_t iterations, RoutingTrace* trace) {
  if (iterations == 0) throw ConfigError("route: routing iterations must be >= 1");
  if (predictions.rank() != 7) {
    throw ShapeError("route", predictions.shape(), Shape{0, 0, 0, 0, 0, 0, 0},
                     "predictions must be [oh, ow, T_in, k_h, k_w, T_out, z_out]");
  }
  const Shape& s = predictions.shape();
  const std::size_t positions = s[0] * s[1];
  const std::size_t slots = s[2] * s[3] * s[4];
  const std::size_t J = s[5], Z = s[6];
  const std::size_t d = iterations;
  const auto U = predictions.data();

  // Per-iteration state kept for the backward sweep.
  std::vector<double> r_all(d * positions * slots * J);
  std::vector<double> p_all(d * positions * J * Z);
  std::vector<double> v_all(d * positions * J * Z);
  std::vector<double> b(slots * J);
  if (trace) {
    trace->slot_shape = Shape{s[0], s[1], s[2], s[3], s[4], J};
    trace->logits.assign(d, std::vector<double>(positions * slots * J));
    trace->coefficients.assign(d, std::vector<double>(positions * slots * J));
  }

  for (std::size_t pos = 0; pos < positions; ++pos) {
    const double* u = &U[pos * slots * J * Z];
    std::fill(b.begin(), b.end(), 0.0);
    for (std::size_t k = 0; k < d; ++k) {
      double* r = &r_all[(k * positions + pos) * slots * J];
      double* p = &p_all[(k * positions + pos) * J * Z];
      double* v = &v_all[(k * positions + pos) * J * Z];
      if (trace) std::copy(b.begin(), b.end(), trace->logits[k].begin() + static_cast<long>(pos * slots * J));
      for (std::size_t n = 0; n < slots; ++n) {
        const double* bn = &b[n * J];
        double mx = bn[0];
        for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, bn[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
          r[n * J + j] = std::exp(bn[j] - mx);
          z += r[n * J + j];
        }
        for (std::size_t j = 0; j < J; ++j) r[n * J + j] /= z;
      }
      if (trace) std::copy(r, r + slots * J, trace->coefficients[k].begin() + static_cast<long>(pos * slots * J));
      std::fill(p, p + J * Z, 0.0);
      for (std::size_t n = 0; n < slots; ++n)
        for (std::size_t j = 0; j < J; ++j) {
          const double rj = r[n * J + j];
          const double* unj = &u[(n * J + j) * Z];
          double* pj = &p[j * Z];
          for (std::size_t a = 0; a < Z; ++a) pj[a] += rj * unj[a];
        }
      for (std::size_t j = 0; j < J; ++j) squash_vec(&p[j * Z], &v[j * Z], Z);
      if (k + 1 < d) {
        for (std::size_t n = 0; n < slots; ++n)
          for (std::size_t j = 0; j < J; ++j) {
            const double* unj = &u[(n * J + j) * Z];
            const double* vj = &v[j * Z];
            double agree = 0.0;
            for (std::size_t a = 0; a < Z; ++a) agree += unj[a] * vj[a];
            b[n * J + j] += agree;
          }
      }
    }
  }

  std::vector<double> out(v_all.end() - static_cast<long>(positions * J * Z), v_all.end());
  return make_result(
      "route", Shape{s[0], s[1], J, Z}, std::move(out), {predictions},
      [=, r_all = std::move(r_all), p_all = std::move(p_all), v_all = std::move(v_all)](Node& self) {
        auto* gU = grad_of(self.inputs[0]);
        if (!gU) return;
        const auto& Uv = self.inputs[0]->value;
        std::vector<double> gb(slots * J), gr(slots * J), gv(J * Z), gp(J * Z);
        for (std::size_t pos = 0; pos < positions; ++pos) {
          const double* u = &Uv[pos * slots * J * Z];
          double* gu = &(*gU)[pos * slots * J * Z];
          std::fill(gb.begin(), gb.end(), 0.0);
          for (std::size_t kk = d; kk-- > 0;) {
            const double* r = &r_all[(kk * positions + pos) * slots * J];
            const double* p = &p_all[(kk * positions + pos) * J * Z];
            const double* v = &v_all[(kk * positions + pos) * J * Z];
            if (kk + 1 == d) {
              std::copy_n(&self.grad[pos * J * Z], J * Z, gv.begin());
            } else {
              std::fill(gv.begin(), gv.end(), 0.0);
              // b_{k+1} = b_k + u . v_k
              for (std::size_t n = 0; n < slots; ++n)
                for (std::size_t j = 0; j < J; ++j) {
                  const double g = gb[n * J + j];
                  if (g == 0.0) continue;
                  const double* unj = &u[(n * J + j) * Z];
                  const double* vj = &v[j * Z];
                  double* gunj = &gu[(n * J + j) * Z];
                  double* gvj = &gv[j * Z];
                  for (std::size_t a = 0; a < Z; ++a) {
                    gvj[a] += g * unj[a];
                    gunj[a] += g * vj[a];
                  }
                }
            }
            std::fill(gp.begin(), gp.end(), 0.0);
            for (std::size_t j = 0; j < J; ++j) squash_vec_backward(&p[j * Z], &gv[j * Z], &gp[j * Z], Z);
            // p_k = sum_n r_k u
            for (std::size_t n = 0; n < slots; ++n)
              for (std::size_t j = 0; j < J; ++j) {
                const double rj = r[n * J + j];
                const double* unj = &u[(n * J + j) * Z];
                const double* gpj = &gp[j * Z];
                double* gunj = &gu[(n * J + j) * Z];
                double dotp = 0.0;
                for (std::size_t a = 0; a < Z; ++a) {
                  gunj[a] += rj * gpj[a];
                  dotp += unj[a] * gpj[a];
                }
                gr[n * J + j] = dotp;
              }
            if (kk == 0) break;  // b_0 is the constant zero
            // r_k = softmax(b_k) over parent types
            for (std::size_t n = 0; n < slots; ++n) {
              double sdot = 0.0;
              for (std::size_t j = 0; j < J; ++j) sdot += r[n * J + j] * gr[n * J + j];
              for (std::size_t j = 0; j < J; ++j) gb[n * J + j] += r[n * J + j] * (gr[n * J + j] - sdot);
            }
          }
        }
      });
}

Tensor caps_conv_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                       RoutingTrace* trace) {
  return route(predict_conv(children, transform, spec), spec.routing, trace);
}

Tensor caps_deconv_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                         RoutingTrace* trace) {
  return route(predict_deconv(children, transform, spec), spec.routing, trace);
}

Tensor caps_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                  RoutingTrace* trace) {
  return spec.kind == CapsKind::conv ? caps_conv_layer(children, transform, spec, trace)
                                     : caps_deconv_layer(children, transform, spec, trace);
}

Tensor capsule_length(const Tensor& grid) {
  grid_dims(grid, "capsule_length");
  return ops::l2_norm(grid, 3);
}

}  // namespace segcaps::caps
