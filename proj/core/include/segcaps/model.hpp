#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "segcaps/capsule.hpp"
#include "segcaps/params.hpp"
#include "segcaps/tensor.hpp"

namespace segcaps::model {

enum class LayerKind {
  conv,            // plain 2D conv on a feature map, optional activation
  conv_transpose,  // plain transposed conv (upsampling by stride)
  primary_caps,    // conv to types*atoms channels, reshape to capsules, squash
  caps_conv,       // locally-constrained conv capsules with routing
  caps_deconv,     // deconvolutional capsules with routing
};

enum class Activation { none, relu, sigmoid };

std::string_view to_string(LayerKind k);
std::string_view to_string(Activation a);

// One layer. Spatial kernels are square. Plain layers use `channels`;
// capsule layers use `types`, `atoms` and `routing`.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t kernel = 3;
  std::size_t stride = 1;  // upscale factor for caps_deconv / conv_transpose
  std::size_t channels = 0;
  Activation activation = Activation::none;
  std::size_t types = 1;
  std::size_t atoms = 16;
  std::size_t routing = 3;
  // Routing-ablation overrides leave fixed layers alone (primary capsule
  // layers route once by construction).
  bool fixed_routing = false;

  bool is_capsule() const { return kind == LayerKind::primary_caps || kind == LayerKind::caps_conv || kind == LayerKind::caps_deconv; }
  caps::CapsLayerSpec caps_spec() const;
};

// Layer `to` receives the previous layer's output concatenated with the
// output of layer `from` (capsule-type axis for capsule grids, channel axis
// for feature maps).
struct SkipSpec {
  std::string from;
  std::string to;
};

struct NetSpec {
  std::string name = "net";
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 1;
  std::vector<LayerSpec> layers;
  std::vector<SkipSpec> skips;
  // Hidden widths of the 1x1 reconstruction head; empty disables it.
  std::vector<std::size_t> recon_widths;

  // True when the output is a single capsule type whose length is the score.
  bool capsule_output() const;
};

// Value representation flowing between layers.
struct ValueDims {
  bool capsules = false;
  std::size_t h = 0, w = 0;
  std::size_t types = 0, atoms = 0;  // capsule grids
  std::size_t channels = 0;          // feature maps

  // Capsule view of a feature map is a single type with `channels` atoms.
  std::size_t as_types() const { return capsules ? types : 1; }
  std::size_t as_atoms() const { return capsules ? atoms : channels; }
};

struct LayerInfo {
  std::string name;
  ValueDims input;   // after skip concatenation
  ValueDims output;
  caps::Count params = 0;
  std::vector<std::pair<std::string, Shape>> tensors;
};

// Shape inference and validation. Throws ConfigError naming the offending
// layer or skip on any wiring violation.
std::vector<LayerInfo> analyze(const NetSpec& spec);
void validate(const NetSpec& spec);

// Names and shapes of every parameter tensor, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const NetSpec& spec);

struct ParamBreakdown {
  std::vector<std::pair<std::string, caps::Count>> per_layer;  // includes "recon_head"
  caps::Count total = 0;
};

ParamBreakdown count_params(const NetSpec& spec);

// Parameter store: name -> tensor, deterministic order.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t scalar_count() const;
  void set_requires_grad(bool on = true);
  void zero_grad();
  ModelParams clone() const;
};

struct InitOptions {
  std::uint64_t seed = 1;
  // Standard deviation = gain * sqrt(2 / fan_in).
  double gain = 1.0;
  double transform_gain = 1.0;
  bool zero = false;
};

ModelParams init_params(const NetSpec& spec, const InitOptions& opt = {});

struct ForwardResult {
  Tensor scores;       // [H, W] in [0, 1)
  Tensor final_caps;   // [H, W, 1, atoms] for capsule nets, undefined otherwise
};

// image is [H, W] (single channel) or [C, H, W].
ForwardResult forward(const NetSpec& spec, const ModelParams& params, const Tensor& image,
                      std::vector<caps::RoutingTrace>* traces = nullptr);
Tensor forward_segment(const NetSpec& spec, const ModelParams& params, const Tensor& image);

// Masks final capsules by `mask` ([H, W], 0/1) and decodes them through the
// 1x1 head: hidden layers with relu, final single channel with sigmoid.
// Returns [H, W].
Tensor reconstruct(const NetSpec& spec, const ModelParams& params, const Tensor& final_caps, const Tensor& mask);

// Adds each delta to atom `dim` of every capsule where mask == 1 and
// reconstructs. Result [dims.size()][deltas.size()] of [H, W] images.
std::vector<double> perturbation_deltas(std::size_t count = 11, double lo = -0.25, double hi = 0.25);
std::vector<std::vector<Tensor>> perturb_and_reconstruct(const NetSpec& spec, const ModelParams& params,
                                                         const Tensor& final_caps, const Tensor& mask,
                                                         const std::vector<std::size_t>& dims,
                                                         const std::vector<double>& deltas = perturbation_deltas());

// ---- builders -------------------------------------------------------------

enum class SegCapsSize { desk, full };

struct SegCapsOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  SegCapsSize size = SegCapsSize::desk;
  // Routing iterations for routed layers (primary layer is fixed at 1).
  std::size_t routing = 3;
  bool skips = true;
  std::vector<std::size_t> recon_widths{64, 128};
};

NetSpec build_segcaps(const SegCapsOptions& opt = {});

struct BaselineCapsOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t conv_channels = 16;
  std::size_t conv_kernel = 5;
  std::size_t primary_types = 2;
  std::size_t primary_atoms = 8;
  std::size_t primary_kernel = 5;
  std::size_t caps_kernel = 5;
  std::size_t caps_atoms = 16;
  std::size_t routing = 3;
  std::vector<std::size_t> recon_widths{64, 128};
};

NetSpec build_baseline_caps(const BaselineCapsOptions& opt = {});

struct MiniCnnOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t base_channels = 16;
  std::size_t levels = 3;
};

NetSpec build_mini_cnn(const MiniCnnOptions& opt = {});

// Routing ablation: every non-fixed routed layer uses `d`; in mixed mode
// resolution-preserving layers use `same_res` and resolution-changing ones
// use `changing_res`.
void set_routing(NetSpec& spec, std::size_t d);
void set_mixed_routing(NetSpec& spec, std::size_t same_res, std::size_t changing_res);

std::string to_json(const NetSpec& spec);
NetSpec netspec_from_json(std::string_view text);

}  // namespace segcaps::model
