#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "segcaps/model.hpp"
#include "segcaps/ops.hpp"
#include "support.hpp"

namespace segcaps {
namespace {

using model::LayerKind;
using model::NetSpec;

// Independent ledger for the full configuration: each capsule layer holds
// T_in * k * k * z_in * T_out * z_out transform scalars, where T_in/z_in come
// from the previous stage (plus skip inputs concatenated along types).
TEST(ModelParams, FullConfigLedgerMatchesHandCount) {
  model::SegCapsOptions o;
  o.size = model::SegCapsSize::full;
  o.height = o.width = 512;
  const auto b = model::count_params(model::build_segcaps(o));
  const auto M = [](std::size_t ti, std::size_t k, std::size_t zi, std::size_t to, std::size_t zo) {
    return ti * k * k * zi * to * zo;
  };
  const std::map<std::string, std::size_t> expected{
      {"conv1", 5 * 5 * 1 * 16 + 16},
      {"primary", M(1, 5, 16, 2, 16)},
      {"caps2_1", M(2, 5, 16, 4, 16)},
      {"caps2_2", M(4, 5, 16, 4, 32)},
      {"caps3_1", M(4, 3, 32, 4, 32)},
      {"caps3_2", M(4, 3, 32, 4, 32)},
      {"caps4_1", M(4, 3, 32, 4, 32)},
      {"deconv1", M(4, 4, 32, 4, 32)},
      {"caps_up1", M(4 + 4, 3, 32, 4, 32)},  // skip from caps3_1
      {"deconv2", M(4, 4, 32, 4, 16)},
      {"caps_up2", M(4 + 4, 3, 16, 4, 16)},  // skip from caps2_1
      {"deconv3", M(4, 4, 16, 2, 16)},
      {"seg_caps", M(2 + 1, 1, 16, 1, 16)},  // skip from conv1 as one 16-atom type
      {"recon_head", (16 * 64 + 64) + (64 * 128 + 128) + (128 + 1)},
  };
  std::size_t total = 0;
  for (const auto& [name, n] : b.per_layer) {
    ASSERT_TRUE(expected.count(name)) << name;
    EXPECT_EQ(caps::to_string(n), std::to_string(expected.at(name))) << name;
    total += expected.at(name);
  }
  EXPECT_EQ(b.per_layer.size(), expected.size());
  EXPECT_EQ(caps::to_string(b.total), std::to_string(total));
  EXPECT_EQ(total, 1516513u);
  // Same order as the reported 1.4 M for the full network.
  EXPECT_GE(total, 1200000u);
  EXPECT_LE(total, 1600000u);
}

TEST(ModelParams, ShapesAgreeWithCounts) {
  for (auto spec : {model::build_segcaps(), model::build_baseline_caps(), model::build_mini_cnn()}) {
    std::size_t n = 0;
    for (const auto& [name, shape] : model::parameter_shapes(spec)) n += shape_numel(shape);
    EXPECT_EQ(caps::to_string(model::count_params(spec).total), std::to_string(n)) << spec.name;
    EXPECT_EQ(model::init_params(spec).scalar_count(), n) << spec.name;
  }
}

TEST(ModelParams, CountsDoNotDependOnResolution) {
  model::SegCapsOptions a, b;
  a.height = a.width = 32;
  b.height = 64;
  b.width = 128;
  EXPECT_EQ(caps::to_string(model::count_params(model::build_segcaps(a)).total),
            caps::to_string(model::count_params(model::build_segcaps(b)).total));
}

TEST(ModelInit, DeterministicAndSeeded) {
  const auto spec = model::build_segcaps();
  model::InitOptions o;
  const auto a = model::init_params(spec, o);
  const auto b = model::init_params(spec, o);
  o.seed = 2;
  const auto c = model::init_params(spec, o);
  bool differs = false;
  for (const auto& [name, t] : a.tensors) {
    const auto va = t.data(), vb = b.at(name).data(), vc = c.at(name).data();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << name;
    if (!std::equal(va.begin(), va.end(), vc.begin())) differs = true;
  }
  EXPECT_TRUE(differs);
}

TEST(ModelInit, BiasesZeroAndWeightScale) {
  const auto spec = model::build_segcaps();
  const auto p = model::init_params(spec);
  for (const auto& [name, t] : p.tensors) {
    if (name.size() > 5 && name.substr(name.size() - 5) == ".bias") {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    }
  }
  // He normal: std = sqrt(2 / fan_in); fan_in of M excludes the parent axes.
  const Tensor& m = p.at("deconv1.M");
  const auto& s = m.shape();
  const double expected = std::sqrt(2.0 / static_cast<double>(s[0] * s[1] * s[2] * s[3]));
  double ss = 0.0;
  for (double v : m.data()) ss += v * v;
  const double sd = std::sqrt(ss / static_cast<double>(m.numel()));
  EXPECT_NEAR(sd / expected, 1.0, 0.05);
}

TEST(ModelForward, ScoresShapeAndRange) {
  model::SegCapsOptions o;
  o.height = o.width = 32;
  for (auto spec : {model::build_segcaps(o), model::build_baseline_caps({32, 32}), model::build_mini_cnn({32, 32})}) {
    const auto p = model::init_params(spec);
    CounterRng rng(1, 1);
    const Tensor img = testing::random_tensor({32, 32}, rng, 0.0, 1.0);
    const auto fr = model::forward(spec, p, img);
    ASSERT_EQ(fr.scores.shape(), (Shape{32, 32})) << spec.name;
    for (double v : fr.scores.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    if (spec.capsule_output()) {
      ASSERT_EQ(fr.final_caps.shape(), (Shape{32, 32, 1, 16}));
      // Scores are capsule lengths.
      const Tensor len = caps::capsule_length(fr.final_caps);
      for (std::size_t i = 0; i < 32 * 32; ++i) EXPECT_EQ(len[i], fr.scores[i]);
    }
  }
}

TEST(ModelForward, RoutingTracesCoverRoutedLayers) {
  model::SegCapsOptions o;
  o.height = o.width = 16;
  const auto spec = model::build_segcaps(o);
  std::vector<caps::RoutingTrace> traces;
  CounterRng rng(3, 3);
  model::forward(spec, model::init_params(spec), testing::random_tensor({16, 16}, rng, 0, 1), &traces);
  std::size_t caps_layers = 0;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::caps_conv || l.kind == LayerKind::caps_deconv) ++caps_layers;
  ASSERT_EQ(traces.size(), caps_layers);
  for (const auto& t : traces) {
    const std::size_t J = t.slot_shape.back();
    for (const auto& c : t.coefficients) {
      for (std::size_t s = 0; s < c.size() / J; ++s) {
        double sum = 0.0;
        for (std::size_t j = 0; j < J; ++j) sum += c[s * J + j];
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(ModelRecon, MaskedCapsulesDoNotAffectReconstruction) {
  model::SegCapsOptions o;
  o.height = o.width = 16;
  const auto spec = model::build_segcaps(o);
  const auto p = model::init_params(spec);
  CounterRng rng(4, 4);
  const Tensor caps = testing::random_tensor({16, 16, 1, 16}, rng);
  std::vector<double> m(256);
  for (auto& v : m) v = rng.below(2) ? 1.0 : 0.0;
  const Tensor mask({16, 16}, m);
  const Tensor r1 = model::reconstruct(spec, p, caps, mask);
  // Change capsules only where the mask is off.
  auto v = std::vector<double>(caps.data().begin(), caps.data().end());
  for (std::size_t px = 0; px < 256; ++px)
    if (m[px] == 0.0)
      for (std::size_t a = 0; a < 16; ++a) v[px * 16 + a] += rng.uniform(-5, 5);
  const Tensor r2 = model::reconstruct(spec, p, Tensor(caps.shape(), v), mask);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(r1[i], r2[i]);
  // An all-off mask reconstructs a constant image.
  const Tensor r0 = model::reconstruct(spec, p, caps, Tensor::zeros({16, 16}));
  for (std::size_t i = 1; i < 256; ++i) EXPECT_EQ(r0[i], r0[0]);
}

TEST(ModelRecon, PerturbationGridShape) {
  model::SegCapsOptions o;
  o.height = o.width = 16;
  const auto spec = model::build_segcaps(o);
  const auto p = model::init_params(spec);
  CounterRng rng(5, 5);
  const Tensor caps = testing::random_tensor({16, 16, 1, 16}, rng);
  const auto deltas = model::perturbation_deltas();
  ASSERT_EQ(deltas.size(), 11u);
  EXPECT_DOUBLE_EQ(deltas.front(), -0.25);
  EXPECT_DOUBLE_EQ(deltas.back(), 0.25);
  EXPECT_DOUBLE_EQ(deltas[5], 0.0);
  const auto g = model::perturb_and_reconstruct(spec, p, caps, Tensor::full({16, 16}, 1.0), {0, 3});
  ASSERT_EQ(g.size(), 2u);
  ASSERT_EQ(g[0].size(), 11u);
  // Zero delta reproduces the plain reconstruction.
  const Tensor base = model::reconstruct(spec, p, caps, Tensor::full({16, 16}, 1.0));
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(g[1][5][i], base[i]);
}

TEST(ModelSpec, JsonRoundTrip) {
  for (auto spec : {model::build_segcaps(), model::build_baseline_caps(), model::build_mini_cnn()}) {
    const auto text = model::to_json(spec);
    const auto back = model::netspec_from_json(text);
    EXPECT_EQ(model::to_json(back), text);
  }
}

TEST(ModelSpec, ValidationNamesTheOffender) {
  auto spec = model::build_segcaps();
  spec.skips.push_back({"nope", "seg_caps"});
  try {
    model::validate(spec);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos) << e.what();
  }
  model::SegCapsOptions o;
  o.height = 36;  // not divisible by the total downsampling factor 8
  EXPECT_THROW(model::build_segcaps(o), ConfigError);
  auto bad = model::build_segcaps();
  bad.layers[0].kernel = 4;  // plain conv kernels must be odd
  EXPECT_THROW(model::validate(bad), ConfigError);
  EXPECT_THROW(model::netspec_from_json("{"), ConfigError);
  EXPECT_THROW(model::netspec_from_json(R"({"height":8,"width":8,"layers":[{"name":"a","kind":"warp"}]})"), ConfigError);
}

TEST(ModelSpec, RoutingOverridesSkipFixedLayers) {
  auto spec = model::build_segcaps();
  model::set_routing(spec, 4);
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::caps_conv && l.kind != LayerKind::caps_deconv) continue;
    EXPECT_EQ(l.routing, l.fixed_routing ? 1u : 4u) << l.name;
  }
  model::set_mixed_routing(spec, 1, 3);
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::caps_conv && l.kind != LayerKind::caps_deconv) continue;
    if (l.fixed_routing) continue;
    const bool changes = l.kind == LayerKind::caps_deconv || l.stride > 1;
    EXPECT_EQ(l.routing, changes ? 3u : 1u) << l.name;
  }
}

TEST(ModelForward, MiniCnnGradientsReachEveryParameter) {
  const auto spec = model::build_mini_cnn({32, 32, 4, 2});
  auto p = model::init_params(spec);
  p.set_requires_grad();
  CounterRng rng(6, 6);
  const Tensor s = model::forward_segment(spec, p, testing::random_tensor({32, 32}, rng, 0, 1));
  backward(ops::sum(s));
  for (const auto& [name, t] : p.tensors) EXPECT_TRUE(t.has_grad()) << name;
}

}  // namespace
}  // namespace segcaps
