#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segcaps/gradcheck.hpp"
#include "segcaps/rng.hpp"

// Finite-difference gradient suite over every differentiable building block.
// Each case draws fresh random shapes and values per instance.
namespace segcaps {

struct GradCase {
  std::string name;
  std::string group;  // "primitive", "capsule", "model", "loss"
  // Runs one random instance. Routing cases also report the largest
  // deviation of sum-over-parents of routing coefficients from 1.
  std::function<FdReport(CounterRng&, const FdOptions&, double& routing_norm_error)> run;
};

struct GradCaseResult {
  std::string name;
  std::string group;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  double max_routing_norm_error = 0.0;
  std::string worst;  // summary of the worst instance
  bool passed() const { return failures == 0 && instances > 0; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 2024;
  std::size_t instances = 20;
  FdOptions fd{};
  // Empty = all cases; otherwise case names or group names to run.
  std::vector<std::string> only;
};

const std::vector<GradCase>& gradient_cases();

std::vector<GradCaseResult> run_gradient_suite(const GradSuiteOptions& opt = {});

}  // namespace segcaps
