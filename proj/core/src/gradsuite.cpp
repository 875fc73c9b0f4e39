#include "segcaps/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "segcaps/capsule.hpp"
#include "segcaps/ops.hpp"

namespace segcaps {

namespace {

using Fn = std::function<Tensor(std::span<const Tensor>)>;

Tensor uniform(const Shape& s, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

// |x| in [lo, hi] with random sign.
Tensor signed_band(const Shape& s, CounterRng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

Shape rand_shape(CounterRng& rng, std::size_t rank, std::size_t max_dim = 4) {
  Shape s(rank);
  for (auto& d : s) d = 1 + rng.below(max_dim);
  return s;
}

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

FdReport check(const Fn& f, std::vector<Tensor> xs, const FdOptions& fd) { return fd_check(f, xs, fd); }

using Runner = std::function<FdReport(CounterRng&, const FdOptions&, double&)>;

GradCase prim(std::string name, std::function<FdReport(CounterRng&, const FdOptions&)> body) {
  return {std::move(name), "primitive",
          [body = std::move(body)](CounterRng& rng, const FdOptions& fd, double&) { return body(rng, fd); }};
}

GradCase unary(std::string name, std::function<Tensor(const Tensor&)> op,
               std::function<Tensor(const Shape&, CounterRng&)> gen) {
  return prim(name, [op, gen](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3));
    return check([op](std::span<const Tensor> x) { return op(x[0]); }, {gen(s, rng)}, fd);
  });
}

GradCase binary(std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                std::function<Tensor(const Shape&, CounterRng&)> gen_b) {
  return prim(name, [op, gen_b](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3));
    const bool scalar_rhs = rng.below(4) == 0;
    Tensor a = uniform(s, rng);
    Tensor b = gen_b(scalar_rhs ? Shape{} : s, rng);
    return check([op](std::span<const Tensor> x) { return op(x[0], x[1]); }, {a, b}, fd);
  });
}

caps::CapsLayerSpec random_caps_spec(CounterRng& rng, caps::CapsKind kind, std::size_t routing) {
  caps::CapsLayerSpec spec;
  spec.name = kind == caps::CapsKind::conv ? "gradcheck_conv" : "gradcheck_deconv";
  spec.kind = kind;
  spec.types = pick(rng, 1, 3);
  spec.atoms = pick(rng, 2, 4);
  spec.routing = routing;
  if (kind == caps::CapsKind::conv) {
    spec.stride = pick(rng, 1, 2);
    spec.kernel_h = spec.kernel_w = 1 + 2 * rng.below(2);
  } else {
    spec.stride = 2;
    spec.kernel_h = spec.kernel_w = pick(rng, 2, 4);
  }
  return spec;
}

double routing_norm_error(const caps::RoutingTrace& trace) {
  const std::size_t J = trace.slot_shape.back();
  double worst = 0.0;
  for (const auto& r : trace.coefficients)
    for (std::size_t n = 0; n < r.size(); n += J) {
      double s = 0.0;
      for (std::size_t j = 0; j < J; ++j) s += r[n + j];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  return worst;
}

GradCase caps_case(std::string name, caps::CapsKind kind, std::size_t routing_lo, std::size_t routing_hi,
                   bool route_only) {
  return {std::move(name), "capsule",
          [=](CounterRng& rng, const FdOptions& fd, double& norm_err) {
            const std::size_t d = pick(rng, routing_lo, routing_hi);
            const auto spec = random_caps_spec(rng, kind, d);
            const std::size_t h = pick(rng, 1, 3), w = pick(rng, 1, 3);
            const std::size_t t_in = pick(rng, 1, 2), z_in = pick(rng, 2, 4);
            const Tensor children = uniform({h, w, t_in, z_in}, rng, -0.8, 0.8);
            const Tensor M = uniform(caps::transform_shape(t_in, z_in, spec), rng, -0.8, 0.8);
            caps::RoutingTrace trace;
            {
              NoGradGuard g;
              caps::caps_layer(children, M, spec, &trace);
            }
            norm_err = std::max(norm_err, routing_norm_error(trace));
            if (route_only) {
              Tensor u;
              {
                NoGradGuard g;
                u = kind == caps::CapsKind::conv ? caps::predict_conv(children, M, spec)
                                                 : caps::predict_deconv(children, M, spec);
              }
              return check([d](std::span<const Tensor> x) { return caps::route(x[0], d); }, {u}, fd);
            }
            return check([spec](std::span<const Tensor> x) { return caps::caps_layer(x[0], x[1], spec); },
                         {children, M}, fd);
          }};
}

std::vector<GradCase> build_cases() {
  std::vector<GradCase> c;
  const auto any = [](const Shape& s, CounterRng& r) { return uniform(s, r); };
  const auto positive = [](const Shape& s, CounterRng& r) { return uniform(s, r, 0.5, 2.0); };
  const auto kinkless = [](const Shape& s, CounterRng& r) { return signed_band(s, r, 0.05, 1.0); };

  c.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); }, any));
  c.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); }, any));
  c.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); }, any));
  c.push_back(binary("div", [](const Tensor& a, const Tensor& b) { return ops::div(a, b); }, positive));
  c.push_back(unary("add_scalar", [](const Tensor& a) { return ops::add(a, 0.7); }, any));
  c.push_back(unary("mul_scalar", [](const Tensor& a) { return ops::mul(a, -1.3); }, any));
  c.push_back(unary("neg", [](const Tensor& a) { return ops::neg(a); }, any));
  c.push_back(prim("matmul", [](CounterRng& rng, const FdOptions& fd) {
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return check([](std::span<const Tensor> x) { return ops::matmul(x[0], x[1]); },
                 {uniform({m, k}, rng), uniform({k, n}, rng)}, fd);
  }));
  c.push_back(prim("conv2d", [](CounterRng& rng, const FdOptions& fd) {
    const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    const std::size_t k = 1 + 2 * rng.below(2);
    const ops::Conv2dOptions opt{.stride = pick(rng, 1, 2),
                                 .padding = rng.below(2) ? ops::Padding::same : ops::Padding::valid};
    return check([opt](std::span<const Tensor> x) { return ops::conv2d(x[0], x[1], x[2], opt); },
                 {uniform({ci, h, w}, rng), uniform({co, ci, k, k}, rng), uniform({co}, rng)}, fd);
  }));
  c.push_back(prim("conv2d_transpose", [](CounterRng& rng, const FdOptions& fd) {
    const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    const std::size_t k = 1 + 2 * rng.below(2);
    const ops::Conv2dOptions opt{.stride = pick(rng, 1, 2)};
    return check([opt](std::span<const Tensor> x) { return ops::conv2d_transpose(x[0], x[1], x[2], opt); },
                 {uniform({co, h, w}, rng), uniform({co, ci, k, k}, rng), uniform({ci}, rng)}, fd);
  }));
  c.push_back(prim("reshape", [](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, 3);
    return check([s](std::span<const Tensor> x) { return ops::reshape(x[0], Shape{s[2], s[0] * s[1]}); },
                 {uniform(s, rng)}, fd);
  }));
  c.push_back(prim("permute", [](CounterRng& rng, const FdOptions& fd) {
    const std::size_t rank = pick(rng, 2, 4);
    std::vector<std::size_t> axes(rank);
    std::iota(axes.begin(), axes.end(), 0);
    for (std::size_t i = rank; i > 1; --i) std::swap(axes[i - 1], axes[rng.below(i)]);
    return check([axes](std::span<const Tensor> x) { return ops::permute(x[0], axes); },
                 {uniform(rand_shape(rng, rank), rng)}, fd);
  }));
  c.push_back(prim("slice", [](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3), 5);
    const std::size_t axis = rng.below(s.size());
    const std::size_t b = rng.below(s[axis]);
    const std::size_t e = b + 1 + rng.below(s[axis] - b);
    return check([=](std::span<const Tensor> x) { return ops::slice(x[0], axis, b, e); }, {uniform(s, rng)}, fd);
  }));
  c.push_back(prim("pad", [](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3));
    const std::size_t axis = rng.below(s.size()), before = rng.below(3), after = rng.below(3);
    return check([=](std::span<const Tensor> x) { return ops::pad(x[0], axis, before, after, 0.25); },
                 {uniform(s, rng)}, fd);
  }));
  const auto reduce = [](bool mean) {
    return [mean](CounterRng& rng, const FdOptions& fd) {
      const Shape s = rand_shape(rng, pick(rng, 1, 3));
      std::vector<std::size_t> axes;
      for (std::size_t a = 0; a < s.size(); ++a)
        if (rng.below(2)) axes.push_back(a);
      return check([=](std::span<const Tensor> x) { return mean ? ops::mean(x[0], axes) : ops::sum(x[0], axes); },
                   {uniform(s, rng)}, fd);
    };
  };
  c.push_back(prim("sum", reduce(false)));
  c.push_back(prim("mean", reduce(true)));
  c.push_back(prim("softmax", [](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3));
    const std::size_t axis = rng.below(s.size());
    return check([axis](std::span<const Tensor> x) { return ops::softmax(x[0], axis); },
                 {uniform(s, rng, -2.0, 2.0)}, fd);
  }));
  c.push_back(unary("sigmoid", [](const Tensor& a) { return ops::sigmoid(a); },
                    [](const Shape& s, CounterRng& r) { return uniform(s, r, -3.0, 3.0); }));
  c.push_back(unary("relu", [](const Tensor& a) { return ops::relu(a); }, kinkless));
  c.push_back(unary("sqrt", [](const Tensor& a) { return ops::sqrt(a); }, positive));
  c.push_back(unary("log", [](const Tensor& a) { return ops::log(a); }, positive));
  c.push_back(unary("exp", [](const Tensor& a) { return ops::exp(a); }, any));
  c.push_back(unary("square", [](const Tensor& a) { return ops::square(a); }, any));
  c.push_back(unary("clamp", [](const Tensor& a) { return ops::clamp(a, -0.5, 0.5); },
                    [](const Shape& s, CounterRng& r) {
                      // Keep samples off the clamp boundaries.
                      std::vector<double> v(shape_numel(s));
                      for (auto& x : v) {
                        const double u = r.uniform(0.05, 0.45);
                        const std::uint64_t band = r.below(3);
                        x = band == 0 ? -0.5 - u : band == 1 ? u - 0.25 : 0.5 + u;
                      }
                      return Tensor(s, std::move(v));
                    }));
  c.push_back(prim("l2_norm", [](CounterRng& rng, const FdOptions& fd) {
    const Shape s = rand_shape(rng, pick(rng, 1, 3));
    const std::size_t axis = rng.below(s.size());
    return check([axis](std::span<const Tensor> x) { return ops::l2_norm(x[0], axis); },
                 {signed_band(s, rng, 0.1, 1.0)}, fd);
  }));
  const auto joiner = [](bool stack) {
    return [stack](CounterRng& rng, const FdOptions& fd) {
      Shape s = rand_shape(rng, pick(rng, 1, 3));
      const std::size_t axis = rng.below(s.size() + (stack ? 1 : 0));
      const std::size_t parts = pick(rng, 2, 3);
      std::vector<Tensor> xs;
      for (std::size_t p = 0; p < parts; ++p) {
        Shape sp = s;
        if (!stack) sp[axis] = pick(rng, 1, 3);
        xs.push_back(uniform(sp, rng));
      }
      return check([=](std::span<const Tensor> x) { return stack ? ops::stack(x, axis) : ops::concat(x, axis); },
                   xs, fd);
    };
  };
  c.push_back(prim("stack", joiner(true)));
  c.push_back(prim("concat", joiner(false)));

  c.push_back({"squash", "capsule", [](CounterRng& rng, const FdOptions& fd, double&) {
                 // Norms spread over [0.1, 3] so both the small- and large-norm regimes are hit.
                 const std::size_t z = pick(rng, 2, 8);
                 const std::size_t n = pick(rng, 1, 4);
                 std::vector<double> v(n * z);
                 for (std::size_t k = 0; k < n; ++k) {
                   double s = 0.0;
                   for (std::size_t a = 0; a < z; ++a) {
                     v[k * z + a] = rng.normal();
                     s += v[k * z + a] * v[k * z + a];
                   }
                   const double target = rng.uniform(0.1, 3.0) / std::sqrt(s);
                   for (std::size_t a = 0; a < z; ++a) v[k * z + a] *= target;
                 }
                 return check([](std::span<const Tensor> x) { return caps::squash(x[0]); },
                              {Tensor(Shape{n, z}, v)}, fd);
               }});
  c.push_back(caps_case("route_d1", caps::CapsKind::conv, 1, 1, true));
  c.push_back(caps_case("route_d2", caps::CapsKind::conv, 2, 2, true));
  c.push_back(caps_case("route_d3", caps::CapsKind::conv, 3, 3, true));
  c.push_back(caps_case("caps_conv_layer", caps::CapsKind::conv, 1, 3, false));
  c.push_back(caps_case("caps_deconv_layer", caps::CapsKind::deconv, 1, 3, false));
  return c;
}

}  // namespace

void append_model_gradient_cases(std::vector<GradCase>& cases);

const std::vector<GradCase>& gradient_cases() {
  static const std::vector<GradCase> cases = [] {
    auto c = build_cases();
    append_model_gradient_cases(c);
    return c;
  }();
  return cases;
}

std::vector<GradCaseResult> run_gradient_suite(const GradSuiteOptions& opt) {
  std::vector<GradCaseResult> results;
  std::uint64_t stream = 0;
  for (const auto& gc : gradient_cases()) {
    ++stream;
    if (!opt.only.empty() &&
        std::find_if(opt.only.begin(), opt.only.end(),
                     [&](const std::string& s) { return s == gc.name || s == gc.group; }) == opt.only.end()) {
      continue;
    }
    GradCaseResult r{gc.name, gc.group};
    CounterRng rng(opt.seed, stream);
    for (std::size_t i = 0; i < opt.instances; ++i) {
      const FdReport rep = gc.run(rng, opt.fd, r.max_routing_norm_error);
      ++r.instances;
      if (!rep.passed) ++r.failures;
      if (rep.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = rep.max_rel_error;
        r.worst = rep.summary();
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace segcaps
