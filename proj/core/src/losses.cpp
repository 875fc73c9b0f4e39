#include "segcaps/losses.hpp"

#include "segcaps/ops.hpp"

namespace segcaps::loss {

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("loss: gamma must be >= 0");
  if (pos_weight_mode == PosWeightMode::fixed && !(pos_weight > 0.0)) throw ConfigError("loss: pos_weight must be > 0");
  if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) throw ConfigError("loss: clamp_eps must be in (0, 0.5)");
}

void require_binary(const Tensor& mask, const char* what) {
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ConfigError(std::string(what) + ": mask must be binary, found " + std::to_string(v));
}

double auto_pos_weight(std::span<const Tensor> masks) {
  double fg = 0.0, total = 0.0;
  for (const auto& m : masks) {
    require_binary(m, "auto_pos_weight");
    for (double v : m.data()) fg += v;
    total += static_cast<double>(m.numel());
  }
  if (fg == 0.0) throw ConfigError("auto_pos_weight: training masks contain no foreground");
  return (total - fg) / fg;
}

Tensor weighted_bce(const Tensor& scores, const Tensor& target, double pos_weight, double eps) {
  if (scores.shape() != target.shape()) throw ShapeError("weighted_bce", scores.shape(), target.shape());
  require_binary(target, "weighted_bce");
  if (!(pos_weight > 0.0)) throw ConfigError("weighted_bce: pos_weight must be > 0");
  const Tensor c = ops::clamp(scores, eps, 1.0 - eps);
  const Tensor pos = ops::mul(ops::mul(target, pos_weight), ops::log(c));
  const Tensor neg = ops::mul(ops::add(ops::neg(target), 1.0), ops::log(ops::add(ops::neg(c), 1.0)));
  return ops::neg(ops::mean(ops::add(pos, neg)));
}

Tensor masked_recon_loss(const Tensor& image, const Tensor& target, const Tensor& recon, double gamma,
                         ReconDomain domain) {
  if (image.shape() != target.shape()) throw ShapeError("masked_recon_loss", image.shape(), target.shape());
  if (recon.shape() != image.shape()) throw ShapeError("masked_recon_loss", recon.shape(), image.shape());
  const Tensor r = ops::mul(image, target);
  if (domain == ReconDomain::all) {
    const double scale = gamma / static_cast<double>(image.numel());
    return ops::mul(ops::sum(ops::square(ops::sub(r, recon))), scale);
  }
  double count = 0.0;
  for (double v : target.data()) count += v;
  const Tensor err = ops::mul(ops::square(ops::sub(r, recon)), target);
  return ops::mul(ops::sum(err), count > 0.0 ? gamma / count : 0.0);
}

Tensor total_loss(const Tensor& scores, const Tensor& target, const Tensor& image, const Tensor& recon,
                  double pos_weight, const LossConfig& cfg) {
  Tensor l = weighted_bce(scores, target, pos_weight, cfg.clamp_eps);
  if (cfg.gamma > 0.0 && recon.defined()) l = ops::add(l, masked_recon_loss(image, target, recon, cfg.gamma, cfg.recon_domain));
  return l;
}

}  // namespace segcaps::loss
