#pragma once

#include <cstddef>
#include <string>

#include "segcaps/capsule.hpp"

// Exact parameter and memory arithmetic for capsule layers. Counts use
// unsigned 128-bit integers with overflow checks, so naive dense costs of
// larger grids or memory in bytes stay exact where doubles would round.
namespace segcaps::caps {

using Count = unsigned __int128;

// Throws Error on 128-bit overflow.
Count checked_mul(Count a, Count b);
Count checked_add(Count a, Count b);

std::string to_string(Count v);

// Scalars in one transform stack: T_in * k_h * k_w * z_in * T_out * z_out.
Count transform_params(std::size_t child_types, std::size_t kernel_h, std::size_t kernel_w,
                       std::size_t child_atoms, std::size_t parent_types, std::size_t parent_atoms);

Count layer_params(std::size_t child_types, std::size_t child_atoms, const CapsLayerSpec& spec);

// A child grid fully connected to a parent grid with one matrix per
// (child type, parent type) pair shared across positions: the kernel spans
// the whole child grid and the output is 1 x 1.
Count shared_dense_params(std::size_t h, std::size_t w, std::size_t child_types, std::size_t child_atoms,
                          std::size_t parent_types, std::size_t parent_atoms);

// Unshared fully-connected capsule layer: one matrix per (child capsule,
// parent capsule) pair, h*w*T_in*z_in*h'*w'*T_out*z_out.
Count naive_dense_cost(std::size_t h, std::size_t w, std::size_t child_types, std::size_t child_atoms,
                       std::size_t out_h, std::size_t out_w, std::size_t parent_types, std::size_t parent_atoms);

}  // namespace segcaps::caps
