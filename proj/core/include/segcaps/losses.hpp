#pragma once

#include <span>
#include <vector>

#include "segcaps/tensor.hpp"

namespace segcaps::loss {

inline constexpr double kClampEpsilon = 1e-7;

enum class PosWeightMode { auto_from_train, fixed };

// Which pixels the reconstruction error is taken over: every pixel of the
// masked target, or only pixels where S == 1.
enum class ReconDomain { all, positive_only };

struct LossConfig {
  double gamma = 1.0;
  PosWeightMode pos_weight_mode = PosWeightMode::auto_from_train;
  double pos_weight = 1.0;  // used when mode == fixed
  double clamp_eps = kClampEpsilon;
  ReconDomain recon_domain = ReconDomain::all;

  void validate() const;
};

// Throws ConfigError unless every value is exactly 0 or 1.
void require_binary(const Tensor& mask, const char* what);

// #background / #foreground over a set of masks. Throws when a split has
// no foreground at all.
double auto_pos_weight(std::span<const Tensor> masks);

// mean over pixels of -[w S log(c) + (1 - S) log(1 - c)], c = clamp(scores, eps, 1 - eps).
Tensor weighted_bce(const Tensor& scores, const Tensor& target, double pos_weight, double eps = kClampEpsilon);

// R = I * S; loss = (gamma / (X Y)) * sum (R - O)^2 over all pixels, or the
// mean of (I - O)^2 over S == 1 pixels (times gamma) in positive_only mode.
Tensor masked_recon_loss(const Tensor& image, const Tensor& target, const Tensor& recon, double gamma,
                         ReconDomain domain = ReconDomain::all);

// weighted_bce + masked_recon_loss; recon may be undefined when gamma == 0
// or the network has no head.
Tensor total_loss(const Tensor& scores, const Tensor& target, const Tensor& image, const Tensor& recon,
                  double pos_weight, const LossConfig& cfg);

}  // namespace segcaps::loss
