#include "segcaps/model.hpp"

#include <cmath>
#include <set>

#include "json.hpp"
#include "segcaps/ops.hpp"
#include "segcaps/rng.hpp"

namespace segcaps::model {

using nlohmann::json;

std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::primary_caps: return "primary_caps";
    case LayerKind::caps_conv: return "caps_conv";
    case LayerKind::caps_deconv: return "caps_deconv";
  }
  return "?";
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

caps::CapsLayerSpec LayerSpec::caps_spec() const {
  caps::CapsLayerSpec s;
  s.name = name;
  s.kind = kind == LayerKind::caps_deconv ? caps::CapsKind::deconv : caps::CapsKind::conv;
  s.kernel_h = s.kernel_w = kernel;
  s.stride = stride;
  s.types = types;
  s.atoms = atoms;
  s.routing = routing;
  return s;
}

bool NetSpec::capsule_output() const { return !layers.empty() && layers.back().is_capsule(); }

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) { throw ConfigError(where + ": " + msg); }

ValueDims concat_dims(const ValueDims& a, const ValueDims& b, const std::string& where) {
  if (a.h != b.h || a.w != b.w) {
    fail(where, "skip joins grids " + std::to_string(a.h) + "x" + std::to_string(a.w) + " and " +
                    std::to_string(b.h) + "x" + std::to_string(b.w) + " of different spatial size");
  }
  ValueDims out;
  out.h = a.h;
  out.w = a.w;
  if (!a.capsules && !b.capsules) {
    out.channels = a.channels + b.channels;
    return out;
  }
  if (a.as_atoms() != b.as_atoms()) {
    fail(where, "skip joins capsules of " + std::to_string(a.as_atoms()) + " and " + std::to_string(b.as_atoms()) +
                    " atoms; atom dims must match");
  }
  out.capsules = true;
  out.types = a.as_types() + b.as_types();
  out.atoms = a.as_atoms();
  return out;
}

caps::Count count_of(const Shape& s) {
  caps::Count c = 1;
  for (auto d : s) c = caps::checked_mul(c, d);
  return c;
}

}  // namespace

std::vector<LayerInfo> analyze(const NetSpec& spec) {
  if (spec.height == 0 || spec.width == 0 || spec.channels == 0) fail(spec.name, "input dims must be positive");
  if (spec.layers.empty()) fail(spec.name, "no layers");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& name = spec.layers[i].name;
    if (name.empty()) fail(spec.name, "layer " + std::to_string(i) + " has no name");
    if (!index.emplace(name, i).second) fail(name, "duplicate layer name");
  }
  for (const auto& s : spec.skips) {
    const auto f = index.find(s.from), t = index.find(s.to);
    if (f == index.end()) fail("skip " + s.from + "->" + s.to, "unknown source layer");
    if (t == index.end()) fail("skip " + s.from + "->" + s.to, "unknown destination layer");
    if (f->second + 1 >= t->second) fail("skip " + s.from + "->" + s.to, "source must precede the destination's input layer");
  }

  std::size_t down = 1;
  for (const auto& l : spec.layers)
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::primary_caps || l.kind == LayerKind::caps_conv) && l.stride > 1)
      down *= l.stride;
  if (spec.height % down != 0 || spec.width % down != 0) {
    fail(spec.name, "input " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                        " not divisible by total downsample factor " + std::to_string(down));
  }

  std::vector<LayerInfo> infos;
  ValueDims cur;
  cur.h = spec.height;
  cur.w = spec.width;
  cur.channels = spec.channels;
  for (const auto& l : spec.layers) {
    LayerInfo info;
    info.name = l.name;
    ValueDims in = cur;
    for (const auto& s : spec.skips)
      if (s.to == l.name) in = concat_dims(in, infos[index.at(s.from)].output, "skip " + s.from + "->" + s.to);
    info.input = in;
    if (l.stride == 0) fail(l.name, "stride must be positive");
    if (l.kernel == 0) fail(l.name, "kernel must be positive");
    ValueDims out;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::primary_caps: {
        if (in.capsules) fail(l.name, std::string(to_string(l.kind)) + " needs a feature-map input, got capsules");
        if (l.kernel % 2 == 0) fail(l.name, "plain conv kernels must be odd");
        const std::size_t co = l.kind == LayerKind::conv ? l.channels : l.types * l.atoms;
        if (co == 0) fail(l.name, "output width must be positive");
        info.tensors.push_back({l.name + ".weight", Shape{co, in.channels, l.kernel, l.kernel}});
        info.tensors.push_back({l.name + ".bias", Shape{co}});
        out.h = (in.h + l.stride - 1) / l.stride;
        out.w = (in.w + l.stride - 1) / l.stride;
        if (l.kind == LayerKind::conv) {
          out.channels = co;
        } else {
          out.capsules = true;
          out.types = l.types;
          out.atoms = l.atoms;
        }
        break;
      }
      case LayerKind::conv_transpose: {
        if (in.capsules) fail(l.name, "conv_transpose needs a feature-map input, got capsules");
        if (l.kernel % 2 == 0) fail(l.name, "plain conv kernels must be odd");
        if (l.channels == 0) fail(l.name, "output width must be positive");
        info.tensors.push_back({l.name + ".weight", Shape{in.channels, l.channels, l.kernel, l.kernel}});
        info.tensors.push_back({l.name + ".bias", Shape{l.channels}});
        out.h = in.h * l.stride;
        out.w = in.w * l.stride;
        out.channels = l.channels;
        break;
      }
      case LayerKind::caps_conv:
      case LayerKind::caps_deconv: {
        const auto cs = l.caps_spec();
        try {
          cs.validate();
        } catch (const ConfigError& e) {
          fail(l.name, e.what());
        }
        info.tensors.push_back({l.name + ".M", caps::transform_shape(in.as_types(), in.as_atoms(), cs)});
        out.capsules = true;
        out.h = caps::output_extent(in.h, cs);
        out.w = caps::output_extent(in.w, cs);
        out.types = l.types;
        out.atoms = l.atoms;
        break;
      }
    }
    for (const auto& [n, s] : info.tensors) info.params = caps::checked_add(info.params, count_of(s));
    info.output = out;
    cur = out;
    infos.push_back(std::move(info));
  }

  if (cur.h != spec.height || cur.w != spec.width) {
    fail(spec.name, "output grid " + std::to_string(cur.h) + "x" + std::to_string(cur.w) +
                        " does not match input " + std::to_string(spec.height) + "x" + std::to_string(spec.width));
  }
  if (cur.capsules) {
    if (cur.types != 1) fail(spec.layers.back().name, "final capsule layer must have a single type");
  } else {
    if (cur.channels != 1) fail(spec.layers.back().name, "final conv layer must have one channel");
    if (spec.layers.back().activation != Activation::sigmoid) fail(spec.layers.back().name, "final conv layer must use sigmoid");
  }
  if (!spec.recon_widths.empty() && !cur.capsules) fail(spec.name, "reconstruction head needs a capsule output");
  for (auto w : spec.recon_widths)
    if (w == 0) fail(spec.name, "reconstruction widths must be positive");
  return infos;
}

void validate(const NetSpec& spec) { analyze(spec); }

namespace {

std::vector<std::pair<std::string, Shape>> recon_shapes(const NetSpec& spec, std::size_t atoms) {
  std::vector<std::pair<std::string, Shape>> out;
  if (spec.recon_widths.empty()) return out;
  std::size_t in = atoms;
  for (std::size_t i = 0; i <= spec.recon_widths.size(); ++i) {
    const std::size_t o = i < spec.recon_widths.size() ? spec.recon_widths[i] : 1;
    out.push_back({"recon." + std::to_string(i) + ".weight", Shape{o, in, 1, 1}});
    out.push_back({"recon." + std::to_string(i) + ".bias", Shape{o}});
    in = o;
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const NetSpec& spec) {
  const auto infos = analyze(spec);
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& i : infos) out.insert(out.end(), i.tensors.begin(), i.tensors.end());
  const auto rs = recon_shapes(spec, infos.back().output.as_atoms());
  out.insert(out.end(), rs.begin(), rs.end());
  return out;
}

ParamBreakdown count_params(const NetSpec& spec) {
  const auto infos = analyze(spec);
  ParamBreakdown b;
  for (const auto& i : infos) {
    b.per_layer.push_back({i.name, i.params});
    b.total = caps::checked_add(b.total, i.params);
  }
  const auto rs = recon_shapes(spec, infos.back().output.as_atoms());
  if (!rs.empty()) {
    caps::Count head = 0;
    for (const auto& [n, s] : rs) head = caps::checked_add(head, count_of(s));
    b.per_layer.push_back({"recon_head", head});
    b.total = caps::checked_add(b.total, head);
  }
  return b;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, t] : tensors) n += t.numel();
  return n;
}

void ModelParams::set_requires_grad(bool on) {
  for (auto& [k, t] : tensors) t.set_requires_grad(on);
}

void ModelParams::zero_grad() {
  for (auto& [k, t] : tensors) t.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  for (const auto& [k, t] : tensors) {
    Tensor c = t.detach();
    if (t.requires_grad()) c.set_requires_grad();
    p.tensors.emplace(k, c);
  }
  return p;
}

ModelParams init_params(const NetSpec& spec, const InitOptions& opt) {
  ModelParams p;
  std::uint64_t stream = 0;
  for (const auto& [name, shape] : parameter_shapes(spec)) {
    ++stream;
    std::vector<double> v(shape_numel(shape), 0.0);
    const bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (!opt.zero && !is_bias) {
      const bool transform = name.size() > 2 && name.compare(name.size() - 2, 2, ".M") == 0;
      // Fan-in: everything except the output axes.
      std::size_t fan_in = 1;
      if (transform) {
        fan_in = shape[0] * shape[1] * shape[2] * shape[3];
      } else {
        fan_in = shape[1] * shape[2] * shape[3];
      }
      const double sd = (transform ? opt.transform_gain : opt.gain) * std::sqrt(2.0 / static_cast<double>(fan_in));
      CounterRng rng(opt.seed, hash_string(name) ^ stream);
      for (auto& x : v) x = sd * rng.normal();
    }
    p.tensors.emplace(name, Tensor(shape, std::move(v)));
  }
  return p;
}

namespace {

Tensor to_capsules(const Tensor& x, const ValueDims& d) {
  if (d.capsules) return x;
  // [C, H, W] -> [H, W, 1, C]
  return ops::reshape(ops::permute(x, {1, 2, 0}), Shape{d.h, d.w, 1, d.channels});
}

Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu: return ops::relu(x);
    case Activation::sigmoid: return ops::sigmoid(x);
    case Activation::none: break;
  }
  return x;
}

Tensor as_image(const NetSpec& spec, const Tensor& image) {
  if (image.rank() == 2 && spec.channels == 1 && image.dim(0) == spec.height && image.dim(1) == spec.width) {
    return ops::reshape(image, Shape{1, spec.height, spec.width});
  }
  if (image.shape() == Shape{spec.channels, spec.height, spec.width}) return image;
  throw ShapeError(spec.name + " forward", image.shape(), Shape{spec.channels, spec.height, spec.width},
                   "image does not match network input");
}

}  // namespace

ForwardResult forward(const NetSpec& spec, const ModelParams& params, const Tensor& image,
                      std::vector<caps::RoutingTrace>* traces) {
  const auto infos = analyze(spec);
  std::map<std::string, std::pair<Tensor, ValueDims>> outputs;
  Tensor cur = as_image(spec, image);
  ValueDims cur_dims;
  cur_dims.h = spec.height;
  cur_dims.w = spec.width;
  cur_dims.channels = spec.channels;
  if (traces) traces->clear();

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const auto& info = infos[i];
    std::vector<Tensor> parts{cur};
    std::vector<ValueDims> part_dims{cur_dims};
    for (const auto& s : spec.skips) {
      if (s.to != l.name) continue;
      const auto& [t, d] = outputs.at(s.from);
      parts.push_back(t);
      part_dims.push_back(d);
    }
    Tensor in = cur;
    if (parts.size() > 1) {
      if (info.input.capsules) {
        for (std::size_t k = 0; k < parts.size(); ++k) parts[k] = to_capsules(parts[k], part_dims[k]);
        in = ops::concat(parts, 2);
      } else {
        in = ops::concat(parts, 0);
      }
    }

    Tensor out;
    switch (l.kind) {
      case LayerKind::conv:
        out = activate(ops::conv2d(in, params.at(l.name + ".weight"), params.at(l.name + ".bias"), {.stride = l.stride}),
                       l.activation);
        break;
      case LayerKind::conv_transpose:
        out = activate(ops::conv2d_transpose(in, params.at(l.name + ".weight"), params.at(l.name + ".bias"),
                                             {.stride = l.stride}, info.output.h, info.output.w),
                       l.activation);
        break;
      case LayerKind::primary_caps: {
        const Tensor y = ops::conv2d(in, params.at(l.name + ".weight"), params.at(l.name + ".bias"), {.stride = l.stride});
        out = caps::squash(ops::reshape(ops::permute(y, {1, 2, 0}), Shape{info.output.h, info.output.w, l.types, l.atoms}));
        break;
      }
      case LayerKind::caps_conv:
      case LayerKind::caps_deconv: {
        caps::RoutingTrace* trace = nullptr;
        if (traces) trace = &traces->emplace_back();
        out = caps::caps_layer(to_capsules(in, info.input), params.at(l.name + ".M"), l.caps_spec(), trace);
        break;
      }
    }
    cur = out;
    cur_dims = info.output;
    outputs[l.name] = {out, cur_dims};
  }

  ForwardResult r;
  if (cur_dims.capsules) {
    r.final_caps = cur;
    r.scores = ops::reshape(caps::capsule_length(cur), Shape{spec.height, spec.width});
  } else {
    r.scores = ops::reshape(cur, Shape{spec.height, spec.width});
  }
  return r;
}

Tensor forward_segment(const NetSpec& spec, const ModelParams& params, const Tensor& image) {
  return forward(spec, params, image).scores;
}

Tensor reconstruct(const NetSpec& spec, const ModelParams& params, const Tensor& final_caps, const Tensor& mask) {
  if (spec.recon_widths.empty()) throw ConfigError(spec.name + ": no reconstruction head configured");
  const auto d = caps::grid_dims(final_caps, "reconstruct");
  if (d.types != 1 || d.h != spec.height || d.w != spec.width) {
    throw ShapeError("reconstruct", final_caps.shape(), Shape{spec.height, spec.width, 1, d.atoms});
  }
  if (mask.shape() != Shape{d.h, d.w}) throw ShapeError("reconstruct", mask.shape(), Shape{d.h, d.w}, "mask");
  std::vector<double> m(final_caps.numel());
  const auto mv = mask.data();
  for (std::size_t p = 0; p < d.h * d.w; ++p)
    for (std::size_t a = 0; a < d.atoms; ++a) m[p * d.atoms + a] = mv[p] != 0.0 ? 1.0 : 0.0;
  const Tensor masked = ops::mul(final_caps, Tensor(final_caps.shape(), std::move(m)));
  Tensor x = ops::permute(ops::reshape(masked, Shape{d.h, d.w, d.atoms}), {2, 0, 1});
  const std::size_t n = spec.recon_widths.size();
  for (std::size_t i = 0; i <= n; ++i) {
    const std::string p = "recon." + std::to_string(i);
    x = ops::conv2d(x, params.at(p + ".weight"), params.at(p + ".bias"));
    x = i < n ? ops::relu(x) : ops::sigmoid(x);
  }
  return ops::reshape(x, Shape{d.h, d.w});
}

std::vector<double> perturbation_deltas(std::size_t count, double lo, double hi) {
  std::vector<double> d(count);
  for (std::size_t i = 0; i < count; ++i) {
    d[i] = count == 1 ? 0.0 : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  // Snap the midpoint to an exact zero so it reproduces plain reconstruction.
  for (auto& x : d)
    if (std::abs(x) < 1e-15) x = 0.0;
  return d;
}

std::vector<std::vector<Tensor>> perturb_and_reconstruct(const NetSpec& spec, const ModelParams& params,
                                                         const Tensor& final_caps, const Tensor& mask,
                                                         const std::vector<std::size_t>& dims,
                                                         const std::vector<double>& deltas) {
  const auto d = caps::grid_dims(final_caps, "perturb_and_reconstruct");
  for (auto k : dims)
    if (k >= d.atoms) throw ConfigError("perturb: dim " + std::to_string(k) + " out of range for " + std::to_string(d.atoms) + " atoms");
  NoGradGuard guard;
  std::vector<std::vector<Tensor>> grid;
  const auto mv = mask.data();
  for (auto k : dims) {
    std::vector<Tensor> row;
    for (double delta : deltas) {
      std::vector<double> v(final_caps.data().begin(), final_caps.data().end());
      for (std::size_t p = 0; p < d.h * d.w; ++p)
        if (mv[p] != 0.0) v[p * d.atoms + k] += delta;
      row.push_back(reconstruct(spec, params, Tensor(final_caps.shape(), std::move(v)), mask));
    }
    grid.push_back(std::move(row));
  }
  return grid;
}

namespace {

LayerSpec conv_layer(std::string name, std::size_t channels, std::size_t kernel, std::size_t stride, Activation act) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.channels = channels;
  l.kernel = kernel;
  l.stride = stride;
  l.activation = act;
  return l;
}

LayerSpec caps_layer(std::string name, LayerKind kind, std::size_t kernel, std::size_t stride, std::size_t types,
                     std::size_t atoms, std::size_t routing) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = kind;
  l.kernel = kernel;
  l.stride = stride;
  l.types = types;
  l.atoms = atoms;
  l.routing = routing;
  return l;
}

}  // namespace

NetSpec build_segcaps(const SegCapsOptions& o) {
  NetSpec s;
  s.height = o.height;
  s.width = o.width;
  s.recon_widths = o.recon_widths;
  const std::size_t d = o.routing;
  const auto C = LayerKind::caps_conv;
  const auto D = LayerKind::caps_deconv;
  // Per-size widths: {types, atoms, kernel} for each stage.
  struct Stage {
    std::size_t types, atoms, kernel;
  };
  Stage primary, e2_1, e2_2, e3_1, e3_2, e4_1, u1, u1f, u2, u2f, u3;
  if (o.size == SegCapsSize::full) {
    s.name = "segcaps_full";
    primary = {2, 16, 5};
    e2_1 = {4, 16, 5};
    e2_2 = {4, 32, 5};
    e3_1 = {4, 32, 3};
    e3_2 = {4, 32, 3};
    e4_1 = {4, 32, 3};
    u1 = {4, 32, 4};
    u1f = {4, 32, 3};
    u2 = {4, 16, 4};
    u2f = {4, 16, 3};
    u3 = {2, 16, 4};
  } else {
    s.name = "segcaps_desk";
    primary = {2, 8, 5};
    e2_1 = {2, 8, 3};
    e2_2 = {4, 8, 3};
    e3_1 = {4, 8, 3};
    e3_2 = {4, 8, 3};
    e4_1 = {4, 8, 3};
    u1 = {4, 8, 4};
    u1f = {4, 8, 3};
    u2 = {2, 8, 4};
    u2f = {2, 8, 3};
    u3 = {1, 16, 4};
  }
  s.layers.push_back(conv_layer("conv1", 16, 5, 1, Activation::relu));
  auto p = caps_layer("primary", C, primary.kernel, 2, primary.types, primary.atoms, 1);
  p.fixed_routing = true;
  s.layers.push_back(p);
  s.layers.push_back(caps_layer("caps2_1", C, e2_1.kernel, 1, e2_1.types, e2_1.atoms, d));
  s.layers.push_back(caps_layer("caps2_2", C, e2_2.kernel, 2, e2_2.types, e2_2.atoms, d));
  s.layers.push_back(caps_layer("caps3_1", C, e3_1.kernel, 1, e3_1.types, e3_1.atoms, d));
  s.layers.push_back(caps_layer("caps3_2", C, e3_2.kernel, 2, e3_2.types, e3_2.atoms, d));
  s.layers.push_back(caps_layer("caps4_1", C, e4_1.kernel, 1, e4_1.types, e4_1.atoms, d));
  s.layers.push_back(caps_layer("deconv1", D, u1.kernel, 2, u1.types, u1.atoms, d));
  s.layers.push_back(caps_layer("caps_up1", C, u1f.kernel, 1, u1f.types, u1f.atoms, d));
  s.layers.push_back(caps_layer("deconv2", D, u2.kernel, 2, u2.types, u2.atoms, d));
  s.layers.push_back(caps_layer("caps_up2", C, u2f.kernel, 1, u2f.types, u2f.atoms, d));
  s.layers.push_back(caps_layer("deconv3", D, u3.kernel, 2, u3.types, u3.atoms, d));
  s.layers.push_back(caps_layer("seg_caps", C, 1, 1, 1, 16, d));
  if (o.skips) s.skips = {{"caps3_1", "caps_up1"}, {"caps2_1", "caps_up2"}, {"conv1", "seg_caps"}};
  validate(s);
  return s;
}

NetSpec build_baseline_caps(const BaselineCapsOptions& o) {
  NetSpec s;
  s.name = "baseline_caps";
  s.height = o.height;
  s.width = o.width;
  s.recon_widths = o.recon_widths;
  s.layers.push_back(conv_layer("conv1", o.conv_channels, o.conv_kernel, 1, Activation::relu));
  auto p = caps_layer("primary", LayerKind::primary_caps, o.primary_kernel, 1, o.primary_types, o.primary_atoms, 1);
  p.fixed_routing = true;
  s.layers.push_back(p);
  s.layers.push_back(caps_layer("seg_caps", LayerKind::caps_conv, o.caps_kernel, 1, 1, o.caps_atoms, o.routing));
  validate(s);
  return s;
}

NetSpec build_mini_cnn(const MiniCnnOptions& o) {
  if (o.levels == 0) throw ConfigError("mini_cnn: levels must be >= 1");
  NetSpec s;
  s.name = "mini_cnn";
  s.height = o.height;
  s.width = o.width;
  const std::size_t c = o.base_channels;
  auto width_at = [&](std::size_t level) { return c << std::min<std::size_t>(level, 2); };
  s.layers.push_back(conv_layer("enc0", c, 3, 1, Activation::relu));
  for (std::size_t l = 1; l <= o.levels; ++l) {
    s.layers.push_back(conv_layer("down" + std::to_string(l), width_at(l), 3, 2, Activation::relu));
  }
  for (std::size_t l = o.levels; l >= 1; --l) {
    LayerSpec up;
    up.name = "up" + std::to_string(l);
    up.kind = LayerKind::conv_transpose;
    up.kernel = 3;
    up.stride = 2;
    up.channels = width_at(l - 1);
    up.activation = Activation::relu;
    s.layers.push_back(up);
    s.layers.push_back(conv_layer("fuse" + std::to_string(l), width_at(l - 1), 3, 1, Activation::relu));
    s.skips.push_back({l == 1 ? "enc0" : "down" + std::to_string(l - 1), "fuse" + std::to_string(l)});
  }
  s.layers.push_back(conv_layer("out", 1, 1, 1, Activation::sigmoid));
  validate(s);
  return s;
}

void set_routing(NetSpec& spec, std::size_t d) {
  for (auto& l : spec.layers)
    if ((l.kind == LayerKind::caps_conv || l.kind == LayerKind::caps_deconv) && !l.fixed_routing) l.routing = d;
}

void set_mixed_routing(NetSpec& spec, std::size_t same_res, std::size_t changing_res) {
  for (auto& l : spec.layers) {
    if ((l.kind != LayerKind::caps_conv && l.kind != LayerKind::caps_deconv) || l.fixed_routing) continue;
    const bool changes = l.kind == LayerKind::caps_deconv || l.stride > 1;
    l.routing = changes ? changing_res : same_res;
  }
}

namespace {

LayerKind kind_from(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::conv_transpose, LayerKind::primary_caps, LayerKind::caps_conv, LayerKind::caps_deconv})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}

Activation activation_from(const std::string& s) {
  for (auto a : {Activation::none, Activation::relu, Activation::sigmoid})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown activation '" + s + "'");
}

}  // namespace

std::string to_json(const NetSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["channels"] = spec.channels;
  j["recon_widths"] = spec.recon_widths;
  j["layers"] = json::array();
  for (const auto& l : spec.layers) {
    json jl{{"name", l.name}, {"kind", to_string(l.kind)}, {"kernel", l.kernel}, {"stride", l.stride}};
    if (l.is_capsule()) {
      jl["types"] = l.types;
      jl["atoms"] = l.atoms;
      jl["routing"] = l.routing;
      if (l.fixed_routing) jl["fixed_routing"] = true;
    } else {
      jl["channels"] = l.channels;
      jl["activation"] = to_string(l.activation);
    }
    j["layers"].push_back(jl);
  }
  j["skips"] = json::array();
  for (const auto& s : spec.skips) j["skips"].push_back({{"from", s.from}, {"to", s.to}});
  return j.dump(2);
}

NetSpec netspec_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("network spec: ") + e.what());
  }
  try {
    NetSpec s;
    s.name = j.value("name", "net");
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.channels = j.value("channels", std::size_t{1});
    s.recon_widths = j.value("recon_widths", std::vector<std::size_t>{});
    for (const auto& jl : j.at("layers")) {
      LayerSpec l;
      l.name = jl.at("name").get<std::string>();
      l.kind = kind_from(jl.at("kind").get<std::string>());
      l.kernel = jl.value("kernel", std::size_t{3});
      l.stride = jl.value("stride", std::size_t{1});
      l.channels = jl.value("channels", std::size_t{0});
      l.activation = activation_from(jl.value("activation", std::string("none")));
      l.types = jl.value("types", std::size_t{1});
      l.atoms = jl.value("atoms", std::size_t{16});
      l.routing = jl.value("routing", std::size_t{3});
      l.fixed_routing = jl.value("fixed_routing", false);
      s.layers.push_back(std::move(l));
    }
    if (j.contains("skips"))
      for (const auto& js : j.at("skips")) s.skips.push_back({js.at("from").get<std::string>(), js.at("to").get<std::string>()});
    validate(s);
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("network spec: ") + e.what());
  }
}

}  // namespace segcaps::model
