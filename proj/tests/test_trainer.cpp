#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "segcaps/config.hpp"
#include "segcaps/ops.hpp"
#include "segcaps/trainer.hpp"
#include "support.hpp"

namespace segcaps {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("segcaps_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

const data::Dataset& tiny_data() {
  static const data::Dataset d = [] {
    data::SynthConfig c;
    c.height = c.width = 32;
    return data::generate(c, 20);
  }();
  return d;
}

model::NetSpec tiny_cnn() { return model::build_mini_cnn({32, 32, 4, 2}); }

train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.lr = 1e-2;
  c.max_iterations = 24;
  c.eval_interval = 4;
  c.decay_patience = 4;
  c.early_stop_patience = 1000;
  c.smoothing_window = 2;
  c.val_limit = 2;
  return c;
}

TEST(Adam, FirstStepWithUnitGradient) {
  // With g = 1 the bias-corrected moments are m_hat = 1, v_hat = 1, so the
  // update is exactly -lr / (1 + eps).
  model::ModelParams p;
  p.tensors.emplace("w", Tensor({3}, {0.5, -1.0, 2.0}));
  p.set_requires_grad();
  backward(ops::sum(p.at("w")));
  auto st = train::make_adam(p);
  train::adam_step(p, st, 0.1);
  const double step = 0.1 / (1.0 + 1e-8);
  EXPECT_EQ(p.at("w")[0], 0.5 - step);
  EXPECT_EQ(p.at("w")[1], -1.0 - step);
  EXPECT_EQ(p.at("w")[2], 2.0 - step);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  model::ModelParams p;
  p.tensors.emplace("w", Tensor({2}, {0.25, 4.0}));
  p.set_requires_grad();
  auto st = train::make_adam(p);
  for (int k = 0; k < 5; ++k) train::adam_step(p, st, 1.0);
  EXPECT_EQ(p.at("w")[0], 0.25);
  EXPECT_EQ(p.at("w")[1], 4.0);
}

TEST(Adam, MatchesScalarReference) {
  // Scalar oracle over a fixed gradient sequence.
  model::ModelParams p;
  p.tensors.emplace("w", Tensor({1}, {1.0}));
  p.set_requires_grad();
  auto st = train::make_adam(p);
  double w = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999;
  for (int t = 1; t <= 20; ++t) {
    p.zero_grad();
    // loss = w^3 / 3 -> grad w^2
    const Tensor& x = p.at("w");
    backward(ops::mul(ops::sum(ops::mul(ops::mul(x, x), x)), 1.0 / 3.0));
    const double g = w * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + 1e-8);
    train::adam_step(p, st, lr);
    EXPECT_NEAR(p.at("w")[0], w, 1e-14) << t;
  }
}

TEST(Adam, NonFiniteGradientThrows) {
  model::ModelParams p;
  p.tensors.emplace("w", Tensor({1}, {1.0}));
  p.set_requires_grad();
  auto st = train::make_adam(p);
  p.at("w").node()->grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train::adam_step(p, st, 0.1), train::DivergenceError);
}

TEST(Schedule, LrAfterIsRepeatedMultiplication) {
  train::TrainConfig c;
  c.lr = 1e-3;
  c.decay_factor = 0.05;
  EXPECT_EQ(c.lr_after(0), 1e-3);
  EXPECT_EQ(c.lr_after(1), 1e-3 * 0.05);
  EXPECT_EQ(c.lr_after(3), 1e-3 * (0.05 * 0.05 * 0.05));
}

TEST(Schedule, ReplayOfEvalHistoryMatchesTrainer) {
  auto cfg = tiny_config();
  train::Trainer t(tiny_cnn(), tiny_data(), cfg);
  t.run();
  const auto& ev = t.state().evals;
  ASSERT_EQ(ev.size(), 6u);
  // Independent replay of the decay rule from the recorded val losses.
  std::vector<double> window;
  double best = std::numeric_limits<double>::infinity();
  std::size_t last = 0, decays = 0;
  for (const auto& e : ev) {
    EXPECT_EQ(e.lr, cfg.lr_after(decays)) << e.iteration;
    window.push_back(e.val_loss);
    if (window.size() > cfg.smoothing_window) window.erase(window.begin());
    const double s = std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size());
    if (s < best) {
      best = s;
      last = e.iteration;
    } else if (e.iteration - last >= cfg.decay_patience) {
      ++decays;
      last = e.iteration;
    }
  }
  EXPECT_EQ(t.state().decay_events, decays);
  // Best Dice bookkeeping agrees with the history.
  double bd = -1.0;
  std::size_t bi = 0;
  for (const auto& e : ev)
    if (e.val_dice > bd) {
      bd = e.val_dice;
      bi = e.iteration;
    }
  EXPECT_EQ(t.state().best_val_dice, bd);
  EXPECT_EQ(t.state().best_dice_iteration, bi);
  EXPECT_EQ(t.state().stop_reason, "max_iterations");
}

TEST(Schedule, EarlyStopFiresAfterPatience) {
  auto cfg = tiny_config();
  cfg.early_stop_patience = 4;
  cfg.max_iterations = 400;
  cfg.lr = 1e-9;  // no progress, so Dice stalls
  train::Trainer t(tiny_cnn(), tiny_data(), cfg);
  t.run();
  const auto& s = t.state();
  EXPECT_EQ(s.stop_reason, "early_stop");
  EXPECT_GE(s.iteration - s.best_dice_iteration, cfg.early_stop_patience);
  EXPECT_LT(s.iteration, cfg.max_iterations);
  for (const auto& e : s.evals)
    if (e.iteration > s.best_dice_iteration) EXPECT_LE(e.val_dice, s.best_val_dice);
}

TEST(Training, ZeroIterationsReportsInitialModel) {
  auto cfg = tiny_config();
  cfg.max_iterations = 0;
  const auto r = train::train(tiny_cnn(), tiny_data(), cfg);
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_TRUE(r.evals.empty());
  EXPECT_EQ(r.stop_reason, "max_iterations");
  EXPECT_EQ(r.test.dice.size(), tiny_data().test.size());
}

TEST(Training, DeterministicReruns) {
  const auto cfg = tiny_config();
  const auto a = train::train(tiny_cnn(), tiny_data(), cfg);
  const auto b = train::train(tiny_cnn(), tiny_data(), cfg);
  EXPECT_TRUE(a.same_metrics(b));
  EXPECT_EQ(a.init_hash, b.init_hash);
  auto other = cfg;
  other.seed = 2;
  const auto c = train::train(tiny_cnn(), tiny_data(), other);
  EXPECT_FALSE(a.same_metrics(c));
}

TEST(Training, ResumeIsBitExact) {
  const auto cfg = tiny_config();
  const auto dir = temp_dir("resume");
  train::Trainer straight(tiny_cnn(), tiny_data(), cfg);
  straight.run();

  train::Trainer first(tiny_cnn(), tiny_data(), cfg);
  first.run(10);
  first.save(dir);
  auto resumed = train::Trainer::load(dir, tiny_data());
  resumed.run();
  EXPECT_EQ(train::params_hash(resumed.state().params), train::params_hash(straight.state().params));
  EXPECT_EQ(train::params_hash(resumed.state().best_params), train::params_hash(straight.state().best_params));
  EXPECT_TRUE(resumed.report().same_metrics(straight.report()));
}

TEST(Training, DivergenceWritesDiagnosticCheckpoint) {
  auto cfg = tiny_config();
  cfg.lr = 1e200;
  cfg.augment = false;
  const auto dir = temp_dir("diverge");
  train::Trainer t(tiny_cnn(), tiny_data(), cfg);
  t.set_output_dir(dir);
  EXPECT_THROW(t.run(), train::DivergenceError);
  EXPECT_TRUE(fs::exists(dir / "diverged" / "meta.json"));
}

TEST(Training, RejectsBadInputs) {
  auto cfg = tiny_config();
  cfg.lr = 0.0;
  EXPECT_THROW(train::Trainer(tiny_cnn(), tiny_data(), cfg), ConfigError);
  data::Dataset d = tiny_data();
  d.val.clear();
  EXPECT_THROW(train::Trainer(tiny_cnn(), d, tiny_config()), ConfigError);
  d = tiny_data();
  d.train[0].mask = Tensor::full({32, 32}, 0.5);
  EXPECT_THROW(train::Trainer(tiny_cnn(), d, tiny_config()), ConfigError);
}

TEST(Checkpoint, ModelRoundTripAndMissingDir) {
  const auto dir = temp_dir("model");
  const auto r = train::train(tiny_cnn(), tiny_data(), tiny_config(), dir);
  const auto ck = train::load_model(dir);
  EXPECT_EQ(model::to_json(ck.spec), model::to_json(tiny_cnn()));
  EXPECT_EQ(ck.threshold, r.test.threshold);
  const auto again = train::evaluate(ck.spec, ck.params, tiny_data().test, ck.threshold);
  EXPECT_EQ(again.dice, r.test.dice);
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "evals.tsv"));
  try {
    train::load_model(dir / "nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("checkpoint not found"), std::string::npos);
  }
}

TEST(Config, JsonRoundTripAndStrictKeys) {
  for (const auto& name : config::preset_names()) {
    const auto c = config::preset(name);
    const auto text = config::to_json(c);
    EXPECT_EQ(config::to_json(config::experiment_from_json(text)), text) << name;
    EXPECT_NO_THROW(c.model.build()) << name;
  }
  try {
    config::experiment_from_json(R"({"train": {"foo": 1}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.foo"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config::experiment_from_json(R"({"train": {"lr": "fast"}})"), ConfigError);
  EXPECT_THROW(config::experiment_from_json("{\"train\": "), ParseError);
  EXPECT_THROW(config::load_experiment("no_such_preset"), ConfigError);
}

TEST(Config, ShippedConfigFilesMatchPresets) {
  for (const auto& name : config::preset_names()) {
    const fs::path file = fs::path(SEGCAPS_SOURCE_DIR) / "configs" / (name + ".json");
    ASSERT_TRUE(fs::exists(file)) << file;
    EXPECT_EQ(config::to_json(config::load_experiment(file.string())), config::to_json(config::preset(name))) << name;
  }
}

TEST(Config, FullPresetMatchesReportedTrainingSetup) {
  const auto c = config::preset("segcaps_full");
  EXPECT_EQ(c.model.height, 512u);
  EXPECT_EQ(c.train.lr, 1e-5);
  EXPECT_EQ(c.train.batch_size, 1u);
  EXPECT_EQ(c.train.decay_factor, 0.05);
  EXPECT_EQ(c.train.decay_patience, 50000u);
  EXPECT_EQ(c.train.early_stop_patience, 250000u);
  EXPECT_EQ(c.train.loss.gamma, 1.0);
}

TEST(Config, TrainConfigRoundTrip) {
  auto t = tiny_config();
  t.loss.recon_domain = loss::ReconDomain::positive_only;
  t.loss.pos_weight_mode = loss::PosWeightMode::fixed;
  t.loss.pos_weight = 3.5;
  const auto text = config::train_config_to_json(t);
  EXPECT_EQ(config::train_config_to_json(config::train_config_from_json(text)), text);
}

}  // namespace
}  // namespace segcaps
