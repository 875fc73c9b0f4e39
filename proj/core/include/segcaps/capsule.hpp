#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "segcaps/tensor.hpp"

// Capsule grids are tensors shaped [h, w, types, atoms]. A layer's transform
// stack is shaped [T_in, k_h, k_w, z_in, T_out, z_out]: one matrix per child
// type, kernel offset and parent type, shared by every grid position.
namespace segcaps::caps {

inline constexpr double kSquashEpsilon = 1e-7;

enum class CapsKind { conv, deconv };

struct CapsLayerSpec {
  std::string name = "caps";
  CapsKind kind = CapsKind::conv;
  std::size_t kernel_h = 5;
  std::size_t kernel_w = 5;
  // Stride for conv layers; upscale factor for deconv layers.
  std::size_t stride = 1;
  std::size_t types = 1;
  std::size_t atoms = 16;
  std::size_t routing = 3;

  // Throws ConfigError. Stride-1 conv layers need odd kernels so the window
  // is centred; deconv layers need an upscale factor of at least 2.
  void validate() const;
};

struct GridDims {
  std::size_t h, w, types, atoms;
};

GridDims grid_dims(const Tensor& grid, std::string_view what = "capsule grid");

Shape transform_shape(std::size_t child_types, std::size_t child_atoms, const CapsLayerSpec& spec);

// Output grid size of a layer applied to an h x w child grid.
std::size_t output_extent(std::size_t extent, const CapsLayerSpec& spec);

// v = (|p|^2 / (1 + |p|^2)) * p / (|p| + eps) along the last axis.
Tensor squash(const Tensor& p);

// Prediction vectors for every output position, child type, kernel offset
// and parent type: shape [oh, ow, T_in, k_h, k_w, T_out, z_out]. Kernel taps
// that fall outside the child grid yield zero vectors.
Tensor predict_conv(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec);

// As predict_conv, but children are first zero-interleaved to an
// (s*h, s*w) grid (transposed-convolution formation), so the output grid is
// (s*h, s*w). Summed over child types and taps, the predictions equal the
// adjoint of a stride-s conv layer whose kernel is spatially flipped with
// child/parent roles swapped.
Tensor predict_deconv(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec);

// Routing state captured per iteration: logits b entering iteration k and the
// coefficients r = softmax over parent types, both shaped
// [oh, ow, T_in, k_h, k_w, T_out].
struct RoutingTrace {
  Shape slot_shape;
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<double>> coefficients;
};

// Locally-constrained dynamic routing over a prediction tensor. Logits start
// at zero on every call; gradients flow through all unrolled iterations.
// Returns parent capsules [oh, ow, T_out, z_out].
Tensor route(const Tensor& predictions, std::size_t iterations, RoutingTrace* trace = nullptr);

// predict_conv / predict_deconv followed by route.
Tensor caps_conv_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                       RoutingTrace* trace = nullptr);
Tensor caps_deconv_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                         RoutingTrace* trace = nullptr);
Tensor caps_layer(const Tensor& children, const Tensor& transform, const CapsLayerSpec& spec,
                  RoutingTrace* trace = nullptr);

// Capsule lengths along the atom axis: [h, w, T, z] -> [h, w, T].
Tensor capsule_length(const Tensor& grid);

}  // namespace segcaps::caps
