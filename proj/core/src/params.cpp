#include "segcaps/params.hpp"

#include <algorithm>
#include <initializer_list>
#include <limits>

namespace segcaps::caps {

Count checked_mul(Count a, Count b) {
  if (a != 0 && b > std::numeric_limits<Count>::max() / a) throw Error("parameter count overflows 128 bits");
  return a * b;
}

Count checked_add(Count a, Count b) {
  if (b > std::numeric_limits<Count>::max() - a) throw Error("parameter count overflows 128 bits");
  return a + b;
}

std::string to_string(Count v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

namespace {

Count product(std::initializer_list<std::size_t> dims) {
  Count p = 1;
  for (auto d : dims) p = checked_mul(p, d);
  return p;
}

}  // namespace

Count transform_params(std::size_t child_types, std::size_t kernel_h, std::size_t kernel_w,
                       std::size_t child_atoms, std::size_t parent_types, std::size_t parent_atoms) {
  return product({child_types, kernel_h, kernel_w, child_atoms, parent_types, parent_atoms});
}

Count layer_params(std::size_t child_types, std::size_t child_atoms, const CapsLayerSpec& spec) {
  return transform_params(child_types, spec.kernel_h, spec.kernel_w, child_atoms, spec.types, spec.atoms);
}

Count shared_dense_params(std::size_t h, std::size_t w, std::size_t child_types, std::size_t child_atoms,
                          std::size_t parent_types, std::size_t parent_atoms) {
  return transform_params(child_types, h, w, child_atoms, parent_types, parent_atoms);
}

Count naive_dense_cost(std::size_t h, std::size_t w, std::size_t child_types, std::size_t child_atoms,
                       std::size_t out_h, std::size_t out_w, std::size_t parent_types, std::size_t parent_atoms) {
  return product({h, w, child_types, child_atoms, out_h, out_w, parent_types, parent_atoms});
}

}  // namespace segcaps::caps
