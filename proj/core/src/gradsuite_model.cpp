#include <algorithm>

#include "segcaps/gradsuite.hpp"
#include "segcaps/losses.hpp"
#include "segcaps/model.hpp"
#include "segcaps/ops.hpp"

// End-to-end cases: the reconstruction head, the losses and whole networks
// small enough that every parameter can be perturbed.
namespace segcaps {

namespace {

using model::NetSpec;

Tensor uniform_t(const Shape& s, CounterRng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

Tensor binary_mask(std::size_t h, std::size_t w, CounterRng& rng) {
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.below(2) ? 1.0 : 0.0;
  v[rng.below(v.size())] = 1.0;
  return Tensor(Shape{h, w}, std::move(v));
}

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Parameters of `spec` as a list in parameter_shapes order, and back.
std::vector<Tensor> flatten(const NetSpec& spec, const model::ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& [name, shape] : model::parameter_shapes(spec)) out.push_back(p.at(name));
  return out;
}

model::ModelParams unflatten(const NetSpec& spec, std::span<const Tensor> xs) {
  model::ModelParams p;
  std::size_t i = 0;
  for (const auto& [name, shape] : model::parameter_shapes(spec)) p.tensors.emplace(name, xs[i++]);
  return p;
}

// SegCaps wiring with every width shrunk so that a full finite-difference
// sweep over all parameters stays cheap.
NetSpec micro_segcaps(std::size_t routing) {
  model::SegCapsOptions o;
  o.height = o.width = 8;
  o.routing = routing;
  o.recon_widths = {3, 3};
  NetSpec s = model::build_segcaps(o);
  for (auto& l : s.layers) {
    if (l.kind == model::LayerKind::conv) l.channels = 3;
    if (l.is_capsule()) {
      l.atoms = 3;
      l.types = l.name == "seg_caps" || l.name == "deconv3" ? 1 : std::min<std::size_t>(l.types, 2);
      l.kernel = std::min<std::size_t>(l.kernel, 3);
      if (l.kind == model::LayerKind::caps_deconv) l.kernel = 2;
    }
  }
  s.name = "segcaps_micro";
  model::validate(s);
  return s;
}

// Relu kinks and near-zero capsule norms put finite-difference noise of
// roughly 1e-10 on entries whose gradient is itself ~1e-9; those are judged
// against the instance's gradient scale instead.
constexpr double kNetworkScaleFloor = 1e-3;

FdReport check_network(const NetSpec& spec, CounterRng& rng, const FdOptions& fd) {
  model::InitOptions init;
  init.seed = rng.next_u64();
  const auto params = model::init_params(spec, init);
  // Random biases so no layer sits at an all-zero operating point.
  std::vector<Tensor> xs;
  for (const auto& t : flatten(spec, params)) xs.push_back(t.rank() == 1 ? uniform_t(t.shape(), rng, -0.3, 0.3) : t);
  xs.push_back(uniform_t({spec.height, spec.width}, rng, 0.0, 1.0));
  const auto f = [spec](std::span<const Tensor> x) {
    const auto p = unflatten(spec, x.first(x.size() - 1));
    return model::forward_segment(spec, p, x.back());
  };
  FdOptions opt = fd;
  opt.scale_floor = std::max(opt.scale_floor, kNetworkScaleFloor);
  return fd_check(f, xs, opt);
}

}  // namespace

void append_model_gradient_cases(std::vector<GradCase>& c) {
  c.push_back({"recon_head", "model", [](CounterRng& rng, const FdOptions& fd, double&) {
                 NetSpec spec;
                 spec.height = pick(rng, 2, 4);
                 spec.width = pick(rng, 2, 4);
                 spec.recon_widths = {pick(rng, 2, 4), pick(rng, 2, 4)};
                 const std::size_t z = pick(rng, 2, 5);
                 // Only the head's tensors matter here; build them directly.
                 std::vector<std::pair<std::string, Shape>> shapes;
                 std::size_t in = z;
                 for (std::size_t i = 0; i <= spec.recon_widths.size(); ++i) {
                   const std::size_t out = i < spec.recon_widths.size() ? spec.recon_widths[i] : 1;
                   const std::string p = "recon." + std::to_string(i);
                   shapes.push_back({p + ".weight", Shape{out, in, 1, 1}});
                   shapes.push_back({p + ".bias", Shape{out}});
                   in = out;
                 }
                 std::vector<Tensor> xs{uniform_t({spec.height, spec.width, 1, z}, rng, -0.8, 0.8)};
                 for (const auto& [name, shape] : shapes) xs.push_back(uniform_t(shape, rng, -0.8, 0.8));
                 const Tensor mask = binary_mask(spec.height, spec.width, rng);
                 return fd_check(
                     [spec, shapes, mask](std::span<const Tensor> x) {
                       model::ModelParams p;
                       for (std::size_t i = 0; i < shapes.size(); ++i) p.tensors.emplace(shapes[i].first, x[i + 1]);
                       return model::reconstruct(spec, p, x[0], mask);
                     },
                     xs, fd);
               }});

  c.push_back({"weighted_bce", "loss", [](CounterRng& rng, const FdOptions& fd, double&) {
                 const std::size_t h = pick(rng, 1, 5), w = pick(rng, 1, 5);
                 const Tensor target = binary_mask(h, w, rng);
                 const double pw = rng.uniform(0.5, 5.0);
                 return fd_check([=](std::span<const Tensor> x) { return loss::weighted_bce(x[0], target, pw); },
                                 std::vector<Tensor>{uniform_t({h, w}, rng, 0.05, 0.95)}, fd);
               }});

  c.push_back({"masked_recon_loss", "loss", [](CounterRng& rng, const FdOptions& fd, double&) {
                 const std::size_t h = pick(rng, 1, 5), w = pick(rng, 1, 5);
                 const Tensor target = binary_mask(h, w, rng);
                 const double gamma = rng.uniform(0.1, 2.0);
                 const auto domain = rng.below(2) ? loss::ReconDomain::all : loss::ReconDomain::positive_only;
                 return fd_check(
                     [=](std::span<const Tensor> x) { return loss::masked_recon_loss(x[0], target, x[1], gamma, domain); },
                     std::vector<Tensor>{uniform_t({h, w}, rng, 0.0, 1.0), uniform_t({h, w}, rng, 0.0, 1.0)}, fd);
               }});

  c.push_back({"total_loss", "loss", [](CounterRng& rng, const FdOptions& fd, double&) {
                 const std::size_t h = pick(rng, 1, 5), w = pick(rng, 1, 5);
                 const Tensor target = binary_mask(h, w, rng);
                 loss::LossConfig cfg;
                 cfg.gamma = rng.uniform(0.1, 2.0);
                 cfg.recon_domain = rng.below(2) ? loss::ReconDomain::all : loss::ReconDomain::positive_only;
                 const double pw = rng.uniform(0.5, 5.0);
                 std::vector<Tensor> xs{uniform_t({h, w}, rng, 0.05, 0.95), uniform_t({h, w}, rng, 0.0, 1.0),
                                        uniform_t({h, w}, rng, 0.05, 0.95)};
                 return fd_check(
                     [=](std::span<const Tensor> x) { return loss::total_loss(x[0], target, x[1], x[2], pw, cfg); }, xs,
                     fd);
               }});

  c.push_back({"segcaps_micro", "model", [](CounterRng& rng, const FdOptions& fd, double&) {
                 return check_network(micro_segcaps(pick(rng, 1, 3)), rng, fd);
               }});

  c.push_back({"baseline_caps_micro", "model", [](CounterRng& rng, const FdOptions& fd, double&) {
                 model::BaselineCapsOptions o;
                 o.height = o.width = pick(rng, 4, 6);
                 o.conv_channels = 3;
                 o.conv_kernel = 3;
                 o.primary_types = 2;
                 o.primary_atoms = 3;
                 o.primary_kernel = 3;
                 o.caps_kernel = 3;
                 o.caps_atoms = 3;
                 o.routing = pick(rng, 1, 3);
                 return check_network(model::build_baseline_caps(o), rng, fd);
               }});

  c.push_back({"mini_cnn", "model", [](CounterRng& rng, const FdOptions& fd, double&) {
                 model::MiniCnnOptions o;
                 o.height = o.width = 8;
                 o.base_channels = 2;
                 o.levels = 2;
                 return check_network(model::build_mini_cnn(o), rng, fd);
               }});
}

}  // namespace segcaps
