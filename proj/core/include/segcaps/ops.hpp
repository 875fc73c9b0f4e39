#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "segcaps/tensor.hpp"

// Differentiable primitives. Elementwise binary ops require identical shapes
// unless one operand is a rank-0 scalar; there is no other broadcasting.
namespace segcaps::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

enum class Padding { same, valid };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

// input [C_in, H, W], kernel [C_out, C_in, kh, kw], optional bias [C_out].
// Same padding gives ceil(H / stride) outputs with zero-filled borders and
// requires odd kernel dims.
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions opt = {});
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Conv2dOptions opt = {});

// Adjoint of conv2d with the same kernel and options: maps [C_out, Ho, Wo]
// back to [C_in, out_h, out_w]. Zero out_h/out_w selects the natural size
// (Ho * stride for same padding, (Ho - 1) * stride + kh for valid).
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, Conv2dOptions opt = {},
                        std::size_t out_h = 0, std::size_t out_w = 0);
Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        Conv2dOptions opt = {}, std::size_t out_h = 0, std::size_t out_w = 0);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::vector<std::size_t> axes);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after, double value = 0.0);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::vector<std::size_t> axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::vector<std::size_t> axes);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Euclidean norm along one axis (the axis is removed). The gradient at a
// zero vector is taken to be zero.
Tensor l2_norm(const Tensor& a, std::size_t axis);

Tensor stack(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

double dot(const Tensor& a, const Tensor& b);

// Output spatial size of conv2d for one axis.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);
// Leading (top/left) zero padding of a same-padded conv along one axis.
std::size_t same_pad_before(std::size_t in, std::size_t kernel, std::size_t stride);

}  // namespace segcaps::ops
