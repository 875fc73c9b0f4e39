#include "segcaps/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "segcaps/ops.hpp"
#include "segcaps/rng.hpp"

namespace segcaps {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::string FdReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " checked=" << checked << " max_rel_err=" << max_rel_error;
  if (checked > 0) {
    os << " worst=input" << worst_input << shape_str(worst_coords) << " analytic=" << worst_analytic
       << " numeric=" << worst_numeric;
  }
  return os.str();
}

namespace {

std::vector<std::size_t> unravel(std::size_t flat, const Shape& shape) {
  std::vector<std::size_t> coords(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    coords[d] = flat % shape[d];
    flat /= shape[d];
  }
  return coords;
}

double projected(const MultiTensorFn& f, std::span<const Tensor> xs, const std::vector<double>& w) {
  NoGradGuard guard;
  const Tensor y = f(xs);
  const auto yv = y.data();
  double s = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) s += w[i] * yv[i];
  return s;
}

}  // namespace

FdReport fd_check(const TensorFn& f, const Tensor& x, const FdOptions& opt) {
  const Tensor xs[] = {x};
  return fd_check([&](std::span<const Tensor> in) { return f(in[0]); }, xs, opt);
}

FdReport fd_check(const MultiTensorFn& f, std::span<const Tensor> xs, const FdOptions& opt) {
  std::vector<Tensor> leaves;
  leaves.reserve(xs.size());
  for (const auto& x : xs) {
    Tensor leaf = x.detach();
    leaf.set_requires_grad();
    leaves.push_back(leaf);
  }

  const Tensor y = f(leaves);
  CounterRng rng(opt.projection_seed, 0);
  std::vector<double> w(y.numel());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  const Tensor weights(y.shape(), w);
  const Tensor loss = ops::sum(ops::mul(y, weights));
  backward(loss);

  double gmax = 0.0;
  for (const auto& l : leaves)
    for (double g : l.grad()) gmax = std::max(gmax, std::abs(g));
  const double floor = std::max(1e-8, opt.scale_floor * gmax);

  FdReport report;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const std::vector<double> analytic(leaves[k].grad().begin(), leaves[k].grad().end());
    // Perturb copies so the leaves used above stay untouched.
    std::vector<Tensor> probe;
    for (const auto& l : leaves) probe.push_back(l.detach());
    auto values = probe[k].data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double up = projected(f, probe, w);
      values[i] = orig - opt.step;
      const double down = projected(f, probe, w);
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[i], numeric, floor);
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) {
          report.worst_input = k;
          report.worst_index = i;
          report.worst_coords = unravel(i, leaves[k].shape());
          report.worst_analytic = analytic[i];
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace segcaps
