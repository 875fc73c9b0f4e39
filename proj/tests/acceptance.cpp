// Acceptance gate: one PASS/FAIL line per criterion. Tolerances and budgets
// are pinned here. Artifacts go to the directory given as argv[1].

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "segcaps/capsule.hpp"
#include "segcaps/config.hpp"
#include "segcaps/experiments.hpp"
#include "segcaps/gradsuite.hpp"
#include "segcaps/io.hpp"
#include "segcaps/losses.hpp"
#include "segcaps/metrics.hpp"
#include "segcaps/params.hpp"
#include "segcaps/rng.hpp"
#include "segcaps/trainer.hpp"

namespace fs = std::filesystem;
using namespace segcaps;

namespace {

// Pinned tolerances and budgets.
constexpr double kParamsBudgetSeconds = 1.0;
constexpr std::size_t kRoutingConfigs = 50;
constexpr double kRoutingTolerance = 1e-10;
constexpr double kRoutingBudgetSeconds = 60.0;
constexpr std::size_t kGradInstances = 20;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 600.0;
constexpr double kLn2Tolerance = 1e-12;
constexpr double kDeskDiceFloor = 0.85;
constexpr std::size_t kDeskMaxIterations = 2000;  // within the 20,000 allowance
constexpr double kDeskBudgetSeconds = 1800.0;
constexpr std::size_t kRotationEpochs = 1000;
constexpr double kRotationLr = 5e-3;
constexpr std::size_t kResumeSteps = 100;
constexpr std::size_t kSquashVectors = 10000;
constexpr double kRoutingSumTolerance = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const Outcome& o, double secs) {
  std::printf("%s criterion %2d: %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void run(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, title, o, seconds_since(t0));
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Tensor random_tensor(const Shape& shape, CounterRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(shape, std::move(v));
}

Outcome params_identities() {
  const auto t0 = Clock::now();
  const auto dense = caps::shared_dense_params(6, 6, 32, 8, 10, 16);
  const auto naive = caps::naive_dense_cost(512, 512, 32, 8, 512, 512, 10, 16);
  const double secs = seconds_since(t0);
  const bool ok = caps::to_string(dense) == "1474560" && caps::to_string(naive) == "2814749767106560";
  return {ok && secs < kParamsBudgetSeconds,
          caps::to_string(dense) + " and " + caps::to_string(naive) + fmt(", %.6f s", secs)};
}

Outcome routing_oracle() {
  const auto t0 = Clock::now();
  CounterRng rng(4242, 0);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < kRoutingConfigs; ++trial) {
    const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4);
    const std::size_t t_in = 1 + rng.below(4), t_out = 1 + rng.below(4);
    const std::size_t z_in = 1 + rng.below(4), z_out = 1 + rng.below(4), d = 1 + rng.below(3);
    caps::CapsLayerSpec spec;
    spec.kind = caps::CapsKind::conv;
    spec.kernel_h = h;
    spec.kernel_w = w;
    spec.stride = std::max<std::size_t>({h, w, 2});
    spec.types = t_out;
    spec.atoms = z_out;
    spec.routing = d;
    const Tensor children = random_tensor({h, w, t_in, z_in}, rng);
    const Tensor M = random_tensor(caps::transform_shape(t_in, z_in, spec), rng);
    const Tensor v = caps::caps_conv_layer(children, M, spec);
    if (v.shape() != Shape{1, 1, t_out, z_out}) return {false, "unexpected output shape"};
    const auto ref = oracle::dense_capsule_layer({children.data().begin(), children.data().end()},
                                                 {M.data().begin(), M.data().end()}, h, w, t_in, z_in, t_out, z_out, d);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - v[i]));
  }
  const double secs = seconds_since(t0);
  return {worst <= kRoutingTolerance && secs < kRoutingBudgetSeconds,
          fmt("%.0f configs, max abs diff %.3g (tol %.0e)", kRoutingConfigs, worst, kRoutingTolerance)};
}

std::vector<GradCaseResult> suite_results;

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  GradSuiteOptions opt;
  opt.instances = kGradInstances;
  opt.fd.tolerance = kGradTolerance;
  suite_results = run_gradient_suite(opt);
  const double secs = seconds_since(t0);
  std::size_t failed = 0;
  double worst = 0.0;
  std::string names;
  for (const auto& r : suite_results) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed() || r.instances < kGradInstances) {
      ++failed;
      names += " " + r.name;
    }
  }
  return {failed == 0 && !suite_results.empty() && secs < kGradBudgetSeconds,
          fmt("%.0f cases x %.0f instances, worst rel err %.3g (tol %.0e)", static_cast<double>(suite_results.size()),
              kGradInstances, worst, kGradTolerance) +
              (failed ? ", failing:" + names : "")};
}

Outcome metric_oracles() {
  using metrics::Mask;
  bool ok = metrics::dice({1, 1, 0, 0}, {1, 1, 0, 0}) == 1.0 && metrics::dice({1, 1, 0, 0}, {0, 0, 1, 1}) == 0.0 &&
            metrics::dice({1, 1, 0, 0}, {1, 0, 0, 0}) == 2.0 / 3.0;
  Mask a(100, 0), b(100, 0);
  a[0] = 1;
  b[3 * 10 + 4] = 1;
  const double h345 = metrics::hausdorff(a, b, {10, 10});
  ok = ok && h345 == 5.0;
  CounterRng rng(77, 0);
  std::size_t mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    Mask x(256), y(256);
    const double px = 0.1 + 0.4 * rng.uniform(), py = 0.1 + 0.4 * rng.uniform();
    for (auto& v : x) v = rng.uniform() < px;
    for (auto& v : y) v = rng.uniform() < py;
    x[rng.below(256)] = 1;
    y[rng.below(256)] = 1;
    const std::vector<int> ix(x.begin(), x.end()), iy(y.begin(), y.end());
    if (metrics::hausdorff(x, y, {16, 16}) != oracle::hausdorff_brute(ix, iy, 16, 16)) ++mismatches;
  }
  ok = ok && mismatches == 0;
  return {ok, fmt("dice hand cases exact, 3-4-5 -> %.17g, %.0f/100 HD mismatches vs brute force", h345,
                  static_cast<double>(mismatches))};
}

Outcome loss_identities() {
  CounterRng rng(99, 0);
  std::size_t inexact = 0;
  for (int k = 0; k < 100; ++k) {
    std::vector<double> s(64), img(64), rec(64);
    for (auto& v : s) v = static_cast<double>(rng.below(2));
    s[0] = 1.0;
    for (auto& v : img) v = rng.uniform();
    for (auto& v : rec) v = rng.uniform();
    const Tensor S({8, 8}, s), I({8, 8}, img), O({8, 8}, rec);
    const double g = rng.uniform(0.001, 2.0);
    if (loss::masked_recon_loss(I, S, O, 2.0 * g).item() != 2.0 * loss::masked_recon_loss(I, S, O, g).item()) ++inexact;
  }
  std::vector<double> m(64);
  for (std::size_t i = 0; i < 64; ++i) m[i] = static_cast<double>(i % 2);
  const double bce = loss::weighted_bce(Tensor::full({8, 8}, 0.5), Tensor({8, 8}, m), 1.0).item();
  const double err = std::abs(bce - std::log(2.0));
  return {inexact == 0 && err <= kLn2Tolerance,
          fmt("gamma-linearity inexact in %.0f/100, |bce - ln 2| = %.3g", static_cast<double>(inexact), err)};
}

Outcome desk_training(const fs::path& out) {
  auto exp = config::preset("segcaps_desk");
  exp.train.max_iterations = kDeskMaxIterations;
  exp.train.val_limit = 20;
  const auto data = exp.data.load();
  const auto r = train::train(exp.model.build(), data, exp.train, out / "desk_training");
  const auto d = r.test.dice_summary();
  const auto h = r.test.hd_summary();
  return {d.mean >= kDeskDiceFloor && r.wall_seconds <= kDeskBudgetSeconds,
          fmt("test Dice %.4f +- %.4f (floor %.2f), HD %.3f", d.mean, d.std, kDeskDiceFloor, h.mean) +
              fmt(", %.0f iterations, %.0f s", static_cast<double>(r.iterations), r.wall_seconds)};
}

Outcome ablation_integrity(const fs::path& out) {
  auto exp = config::preset("segcaps_desk");
  exp.train.max_iterations = 10;
  exp.train.eval_interval = 10;
  exp.train.val_limit = 2;
  const auto data = exp.data.load();
  const auto spec = exp.model.build();
  const auto r1 = exp::ablate_routing(spec, data, exp.train, out / "ablate_routing");
  const auto r2 = exp::ablate_routing(spec, data, exp.train);
  const auto c1 = exp::ablate_recon(spec, data, exp.train, out / "ablate_recon");
  const auto c2 = exp::ablate_recon(spec, data, exp.train);
  bool ok = r1.rows.size() == 5 && c1.rows.size() == 2;
  const char* labels[] = {"1", "2", "3", "4", "1,3"};
  for (std::size_t i = 0; ok && i < 5; ++i) {
    ok = r1.rows[i].label == labels[i] && r1.rows[i].report.init_hash == r1.rows[0].report.init_hash &&
         r1.rows[i].report.same_metrics(r2.rows[i].report) && r1.rows[i].paper_dice.has_value();
  }
  for (std::size_t i = 0; ok && i < 2; ++i) {
    ok = c1.rows[i].report.init_hash == c1.rows[0].report.init_hash && c1.rows[i].report.same_metrics(c2.rows[i].report) &&
         c1.rows[i].paper_dice.has_value();
  }
  ok = ok && fs::exists(out / "ablate_routing" / "ablate_routing.tsv") && fs::exists(out / "ablate_recon" / "ablate_recon.tsv");
  return {ok, "5 + 2 rows, shared init, deterministic reruns; routing: " + r1.desk_direction + "; recon: " +
                  c1.desk_direction};
}

Outcome rotation_harness(const fs::path& out) {
  const auto exp = config::preset("segcaps_desk");
  const auto sample = data::generate_sample(exp.data.synth, 0);
  exp::RotationOptions opt;
  opt.max_epochs = kRotationEpochs;
  opt.lr = kRotationLr;
  const auto cnn = config::preset("mini_cnn").model.build();
  const auto r = exp::rotation_generalization({exp.model.build(), cnn}, sample, opt);
  exp::write_rotation_report(r, out / "rotation");
  bool ok = r.models.size() == 2 && r.transforms.size() == 6;
  for (const auto& m : r.models) ok = ok && m.converged && m.dice.size() == 6;
  for (const auto& m : r.models)
    for (const auto& t : r.transforms) ok = ok && fs::exists(out / "rotation" / "images" / (m.model + "_" + t + ".pgm"));
  std::string detail;
  for (std::size_t i = 0; i < r.models.size(); ++i) {
    const auto& m = r.models[i];
    detail += m.model + (m.converged ? " converged at epoch " : " not converged after ") + std::to_string(m.epochs) +
              fmt(" (train Dice %.4f), rotated mean %.4f; ", m.train_dice, r.rotated_mean(i));
  }
  if (r.models.size() == 2) detail += fmt("capsule - CNN gap %+.4f", r.rotated_mean(0) - r.rotated_mean(1));
  return {ok, detail};
}

Outcome determinism_and_resume(const fs::path& out) {
  auto exp = config::preset("segcaps_desk");
  exp.train.max_iterations = 40;
  exp.train.eval_interval = 20;
  exp.train.val_limit = 4;
  const auto data = exp.data.load();
  const auto spec = exp.model.build();
  const auto a = train::train(spec, data, exp.train);
  const auto b = train::train(spec, data, exp.train);
  const bool rerun = a.same_metrics(b);

  auto cfg = exp.train;
  const std::size_t before = 20;
  cfg.max_iterations = before + kResumeSteps;
  train::Trainer straight(spec, data, cfg);
  straight.run();
  train::Trainer first(spec, data, cfg);
  first.run(before);
  first.save(out / "resume_checkpoint");
  auto resumed = train::Trainer::load(out / "resume_checkpoint", data);
  resumed.run(kResumeSteps);
  const bool same_params = train::params_hash(resumed.state().params) == train::params_hash(straight.state().params);
  const bool same_adam = resumed.state().adam.m == straight.state().adam.m && resumed.state().adam.v == straight.state().adam.v;
  const bool same_report = resumed.report().same_metrics(straight.report());
  return {rerun && same_params && same_adam && same_report && resumed.state().iteration == before + kResumeSteps,
          std::string("reruns ") + (rerun ? "identical" : "differ") + ", resume after " + std::to_string(before) + " + " +
              std::to_string(kResumeSteps) + " steps: params " + (same_params ? "bit-exact" : "differ") + ", moments " +
              (same_adam ? "bit-exact" : "differ") + ", report " + (same_report ? "identical" : "differs")};
}

Outcome squash_and_routing_invariants() {
  CounterRng rng(1234, 0);
  double max_norm = 0.0;
  for (std::size_t k = 0; k < kSquashVectors; ++k) {
    const std::size_t z = 1 + rng.below(16);
    // Magnitudes spanning 1e-6 .. 1e6.
    const double scale = std::pow(10.0, rng.uniform(-6.0, 6.0));
    std::vector<double> v(z);
    for (auto& x : v) x = scale * rng.uniform(-1.0, 1.0);
    const Tensor s = caps::squash(Tensor({1, z}, v));
    double n2 = 0.0;
    for (double x : s.data()) n2 += x * x;
    max_norm = std::max(max_norm, std::sqrt(n2));
  }
  double routing = 0.0;
  std::size_t routed_cases = 0;
  for (const auto& r : suite_results) {
    routing = std::max(routing, r.max_routing_norm_error);
    if (r.max_routing_norm_error > 0.0 || r.group == "capsule") ++routed_cases;
  }
  const bool ok = max_norm < 1.0 && routing <= kRoutingSumTolerance && !suite_results.empty();
  return {ok, fmt("max squash norm %.17g over %.0f vectors, max |sum c - 1| %.3g over %.0f suite cases", max_norm,
                  static_cast<double>(kSquashVectors), routing, static_cast<double>(routed_cases))};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  std::printf("acceptance artifacts: %s\n", out.string().c_str());
  run(1, "parameter identities", params_identities);
  run(2, "routing oracle equivalence", routing_oracle);
  run(3, "gradient suite", gradient_suite);
  run(4, "metric oracles", metric_oracles);
  run(5, "loss identities", loss_identities);
  run(6, "desk-scale training", [&] { return desk_training(out); });
  run(7, "ablation harness integrity", [&] { return ablation_integrity(out); });
  run(8, "rotation generalization harness", [&] { return rotation_harness(out); });
  run(9, "determinism and persistence", [&] { return determinism_and_resume(out); });
  run(10, "squash and routing invariants", squash_and_routing_invariants);
  std::printf("%s: %d of 10 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
