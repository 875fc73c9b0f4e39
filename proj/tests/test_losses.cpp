#include <gtest/gtest.h>

#include <cmath>

#include "segcaps/losses.hpp"
#include "support.hpp"

namespace segcaps {
namespace {

Tensor binary(std::size_t h, std::size_t w, CounterRng& rng) {
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.below(2) ? 1.0 : 0.0;
  v[0] = 1.0;
  v[1] = 0.0;
  return Tensor({h, w}, v);
}

TEST(WeightedBce, HalfScoresBalancedIsLn2) {
  const Tensor s = Tensor::full({4, 4}, 0.5);
  std::vector<double> m(16);
  for (std::size_t i = 0; i < 16; ++i) m[i] = i % 2 ? 1.0 : 0.0;
  EXPECT_NEAR(loss::weighted_bce(s, Tensor({4, 4}, m), 1.0).item(), std::log(2.0), 1e-12);
}

TEST(WeightedBce, NonNegativeAndMinimalAtTarget) {
  CounterRng rng(1, 1);
  for (int k = 0; k < 50; ++k) {
    const Tensor t = binary(5, 6, rng);
    const Tensor s = testing::random_tensor({5, 6}, rng, 0.0, 1.0);
    const double w = rng.uniform(0.2, 5.0);
    const double l = loss::weighted_bce(s, t, w).item();
    EXPECT_GE(l, 0.0);
    // Scores equal to the target clamp to eps / 1-eps: loss ~ eps.
    const double at_target = loss::weighted_bce(t, t, w).item();
    EXPECT_LE(at_target, std::max(1.0, w) * 1.01e-7);
    EXPECT_LT(at_target, l);
  }
}

TEST(WeightedBce, PositiveWeightScalesForegroundTerm) {
  // One foreground pixel with score 0.25 and one background pixel with 0.5:
  // -(w log 0.25 + log 0.5) / 2.
  const Tensor s({1, 2}, {0.25, 0.5});
  const Tensor t({1, 2}, {1.0, 0.0});
  EXPECT_NEAR(loss::weighted_bce(s, t, 3.0).item(), -(3.0 * std::log(0.25) + std::log(0.5)) / 2.0, 1e-15);
}

TEST(WeightedBce, RejectsNonBinaryTargets) {
  EXPECT_THROW(loss::weighted_bce(Tensor::full({2, 2}, 0.5), Tensor::full({2, 2}, 0.5), 1.0), ConfigError);
  EXPECT_THROW(loss::weighted_bce(Tensor::full({2, 2}, 0.5), Tensor::full({2, 3}, 1.0), 1.0), ShapeError);
}

TEST(ReconLoss, GammaLinearityIsExact) {
  CounterRng rng(2, 2);
  for (int k = 0; k < 100; ++k) {
    const Tensor t = binary(4, 7, rng);
    const Tensor img = testing::random_tensor({4, 7}, rng, 0, 1);
    const Tensor rec = testing::random_tensor({4, 7}, rng, 0, 1);
    const double g = rng.uniform(0.001, 3.0);
    for (auto dom : {loss::ReconDomain::all, loss::ReconDomain::positive_only}) {
      EXPECT_EQ(loss::masked_recon_loss(img, t, rec, 2.0 * g, dom).item(),
                2.0 * loss::masked_recon_loss(img, t, rec, g, dom).item());
    }
  }
}

TEST(ReconLoss, HandComputedDomains) {
  // I = [0.2, 0.8], S = [0, 1], O = [0.1, 0.5]; R = I*S = [0, 0.8].
  const Tensor img({1, 2}, {0.2, 0.8});
  const Tensor s({1, 2}, {0.0, 1.0});
  const Tensor o({1, 2}, {0.1, 0.5});
  // all: (0.1^2 + 0.3^2) / 2; positive_only: 0.3^2 / 1.
  EXPECT_NEAR(loss::masked_recon_loss(img, s, o, 1.0).item(), (0.01 + 0.09) / 2.0, 1e-15);
  EXPECT_NEAR(loss::masked_recon_loss(img, s, o, 1.0, loss::ReconDomain::positive_only).item(), 0.09, 1e-15);
  EXPECT_EQ(loss::masked_recon_loss(img, s, o, 0.0).item(), 0.0);
}

TEST(TotalLoss, SumOfParts) {
  CounterRng rng(3, 3);
  const Tensor t = binary(3, 3, rng);
  const Tensor sc = testing::random_tensor({3, 3}, rng, 0.1, 0.9);
  const Tensor img = testing::random_tensor({3, 3}, rng, 0, 1);
  const Tensor rec = testing::random_tensor({3, 3}, rng, 0, 1);
  loss::LossConfig cfg;
  cfg.gamma = 0.7;
  const double total = loss::total_loss(sc, t, img, rec, 2.5, cfg).item();
  const double parts = loss::weighted_bce(sc, t, 2.5).item() + loss::masked_recon_loss(img, t, rec, 0.7).item();
  EXPECT_NEAR(total, parts, 1e-15);
  cfg.gamma = 0.0;
  EXPECT_EQ(loss::total_loss(sc, t, img, Tensor(), 2.5, cfg).item(), loss::weighted_bce(sc, t, 2.5).item());
}

TEST(PosWeight, BackgroundOverForeground) {
  const std::vector<Tensor> masks{Tensor({2, 2}, {1, 0, 0, 0}), Tensor({2, 2}, {1, 1, 0, 0})};
  EXPECT_DOUBLE_EQ(loss::auto_pos_weight(masks), 5.0 / 3.0);
  const std::vector<Tensor> empty{Tensor::zeros({2, 2})};
  EXPECT_THROW(loss::auto_pos_weight(empty), ConfigError);
}

TEST(LossConfig, Validation) {
  loss::LossConfig c;
  c.gamma = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace segcaps
