#pragma once

#include <gtest/gtest.h>

#include <vector>

#include "segcaps/gradcheck.hpp"
#include "segcaps/rng.hpp"
#include "segcaps/tensor.hpp"

namespace segcaps::testing {

inline Tensor random_tensor(const Shape& shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

// Values with |x| in [lo, hi] and random sign; keeps kinks (relu, abs) and
// singularities away from the finite-difference stencil.
inline Tensor random_away_from_zero(const Shape& shape, CounterRng& rng, double lo = 0.1, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

inline Shape random_shape(CounterRng& rng, std::size_t rank, std::size_t max_dim = 4) {
  Shape s(rank);
  for (auto& d : s) d = 1 + rng.below(max_dim);
  return s;
}

}  // namespace segcaps::testing

#define EXPECT_FD_PASS(report) \
  do {                                          \
    const auto& r_ = (report);                  \
    EXPECT_TRUE(r_.passed) << r_.summary();     \
  } while (0)
