#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "segcaps/tensor.hpp"

namespace segcaps {

struct FdOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Seed of the fixed random projection that reduces f(x) to a scalar.
  std::uint64_t projection_seed = 0x5EEDULL;
  // Denominator floor as a fraction of the largest analytic gradient
  // magnitude. Whole-network checks use it so entries many orders below the
  // gradient scale are judged against that scale rather than their own.
  double scale_floor = 0.0;
};

struct FdReport {
  bool passed = true;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  // Worst offender: which input, flat index, coordinates, both derivatives.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::vector<std::size_t> worst_coords;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string summary() const;
};

using TensorFn = std::function<Tensor(const Tensor&)>;
using MultiTensorFn = std::function<Tensor(std::span<const Tensor>)>;

// Compares reverse-mode gradients of <w, f(x)> (w a fixed random projection)
// with central differences. Relative error per element is
// |a - n| / max(|a|, |n|, 1e-8, scale_floor * max|a|).
FdReport fd_check(const TensorFn& f, const Tensor& x, const FdOptions& opt = {});
FdReport fd_check(const MultiTensorFn& f, std::span<const Tensor> xs, const FdOptions& opt = {});

double relative_error(double analytic, double numeric, double floor = 1e-8);

}  // namespace segcaps
