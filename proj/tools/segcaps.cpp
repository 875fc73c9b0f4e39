// segcaps command-line tool: training, evaluation and the experiment harnesses.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "segcaps/config.hpp"
#include "segcaps/experiments.hpp"
#include "segcaps/gradsuite.hpp"
#include "segcaps/io.hpp"
#include "segcaps/params.hpp"
#include "segcaps/trainer.hpp"

namespace fs = std::filesystem;
using namespace segcaps;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Raised for conditions that map to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config = "segcaps_desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> iterations;
  std::optional<double> lr;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  c.out = default_out;
  cmd->add_option("--config", c.config, "Config file or preset (segcaps_desk, segcaps_full, baseline_desk, mini_cnn)")
      ->capture_default_str();
  cmd->add_option("--seed", c.seed, "Training and initialization seed");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
}

void add_schedule(CLI::App* cmd, Common& c) {
  cmd->add_option("--iterations", c.iterations, "Maximum training iterations");
  cmd->add_option("--lr", c.lr, "Initial learning rate");
}

config::ExperimentConfig resolve(const Common& c) {
  auto cfg = config::load_experiment(c.config);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.train.init.seed = *c.seed;
  }
  if (c.iterations) cfg.train.max_iterations = *c.iterations;
  if (c.lr) cfg.train.lr = *c.lr;
  cfg.train.validate();
  return cfg;
}

void save_resolved(const config::ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  io::write_text(out / "config.json", config::to_json(cfg));
}

train::Checkpoint require_model(const std::string& dir) {
  if (dir.empty() || !fs::exists(dir)) throw UsageError("checkpoint not found: '" + dir + "'");
  try {
    return train::load_model(dir);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    if (std::string(e.what()).rfind("checkpoint not found", 0) == 0) throw UsageError(e.what());
    throw;
  }
}

Tensor read_image(const fs::path& p) {
  if (p.extension() == ".caps") return io::read_caps_image(p);
  return io::pgm_to_image(io::read_pgm(p));
}

int cmd_train(const Common& c, const std::string& resume) {
  const auto cfg = resolve(c);
  const fs::path out = c.out;
  save_resolved(cfg, out);
  const auto data = cfg.data.load();
  const auto t0 = std::chrono::steady_clock::now();
  train::RunReport report;
  if (!resume.empty()) {
    if (!fs::exists(fs::path(resume) / "meta.json")) throw UsageError("checkpoint not found: '" + resume + "'");
    auto t = train::Trainer::load(resume, data);
    t.set_output_dir(out);
    t.run();
    report = t.report();
    t.save(out / "checkpoint");
    train::save_model(out / "best", t.spec(), t.state().best_params, t.state().best_threshold);
  } else {
    const auto spec = cfg.model.build();
    train::Trainer t(spec, data, cfg.train);
    t.set_output_dir(out);
    std::cerr << "training " << spec.name << " (" << t.state().params.scalar_count() << " parameters, "
              << data.train.size() << "/" << data.val.size() << "/" << data.test.size() << " samples)\n";
    while (!t.finished()) {
      t.run(cfg.train.eval_interval);
      if (!t.state().evals.empty()) {
        const auto& e = t.state().evals.back();
        std::fprintf(stderr, "iter %zu lr %.3g train_loss %.4f val_loss %.4f val_dice %.4f\n", e.iteration, e.lr,
                     e.train_loss, e.val_loss, e.val_dice);
      }
    }
    report = t.report();
    t.save(out / "checkpoint");
    train::save_model(out / "best", t.spec(), t.state().best_params, t.state().best_threshold);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_text(out / "report.json", report.to_json());
  io::write_text(out / "evals.tsv", report.evals_tsv());
  io::write_text(out / "summary.tsv", report.summary_tsv());
  std::cout << report.summary_tsv();
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::optional<double> threshold, const std::string& split) {
  const auto model = require_model(checkpoint);
  const auto cfg = resolve(c);
  const auto data = cfg.data.load();
  const auto& samples = split == "val" ? data.val : split == "train" ? data.train : data.test;
  const auto r = train::evaluate(model.spec, model.params, samples, threshold.value_or(model.threshold));
  std::vector<std::vector<std::string>> rows;
  const auto hd = r.hd_summary();
  char thr[16];
  std::snprintf(thr, sizeof thr, "%.2f", r.threshold);
  rows.push_back({model.spec.name, split, std::to_string(samples.size()), thr, metrics::format_mean_std(r.dice_summary()),
                  hd.n ? metrics::format_mean_std(hd) : "n/a", std::to_string(r.hd_undefined)});
  const auto table =
      metrics::format_table({"model", "split", "n", "threshold", "dice", "hd", "hd_undefined"}, rows);
  fs::create_directories(c.out);
  io::write_text(fs::path(c.out) / "eval.tsv", table);
  std::cout << table;
  return 0;
}

int cmd_predict(const Common& c, const std::string& checkpoint, const std::string& image, std::optional<double> threshold) {
  const auto model = require_model(checkpoint);
  if (image.empty() || !fs::exists(image)) throw UsageError("image not found: '" + image + "'");
  const Tensor img = read_image(image);
  const Tensor scores = train::predict_scores(model.spec, model.params, img);
  const double t = threshold.value_or(model.threshold);
  const auto mask = metrics::binarize(scores, t);
  std::vector<double> mv(mask.begin(), mask.end());
  const fs::path out = c.out;
  fs::create_directories(out);
  const std::string stem = fs::path(image).stem().string();
  io::write_pgm(out / (stem + "_mask.pgm"), io::mask_to_pgm(Tensor(scores.shape(), std::move(mv))));
  io::write_pgm(out / (stem + "_scores.pgm"), io::image_to_pgm(scores, 255));
  io::write_caps_image(out / (stem + "_scores.caps"), scores);
  std::cout << "wrote " << (out / (stem + "_mask.pgm")).string() << " (threshold " << t << ")\n";
  return 0;
}

int cmd_gradcheck(std::size_t instances, const std::vector<std::string>& only, std::uint64_t seed) {
  GradSuiteOptions opt;
  opt.instances = instances;
  opt.only = only;
  opt.seed = seed;
  const auto results = run_gradient_suite(opt);
  if (results.empty()) throw UsageError("no gradient case matches the --only filter");
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%-4s %-20s %-9s instances=%zu failures=%zu max_rel_err=%.3g", r.passed() ? "PASS" : "FAIL",
                r.name.c_str(), r.group.c_str(), r.instances, r.failures, r.max_rel_error);
    if (r.group == "capsule") std::printf(" routing_norm_err=%.3g", r.max_routing_norm_error);
    std::printf("\n");
    if (!r.passed()) {
      ++failed;
      std::printf("     worst: %s\n", r.worst.c_str());
    }
  }
  std::printf("%zu/%zu cases passed\n", results.size() - failed, results.size());
  return failed ? kExitFailure : 0;
}

int cmd_params(const Common& c) {
  const auto cfg = resolve(c);
  const auto spec = cfg.model.build();
  const auto b = model::count_params(spec);
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, n] : b.per_layer) rows.push_back({name, caps::to_string(n)});
  rows.push_back({"total", caps::to_string(b.total)});
  std::cout << "# " << spec.name << " " << spec.height << "x" << spec.width << "\n";
  std::cout << metrics::format_table({"layer", "parameters"}, rows);

  const auto dense = caps::shared_dense_params(6, 6, 32, 8, 10, 16);
  const auto naive = caps::naive_dense_cost(512, 512, 32, 8, 512, 512, 10, 16);
  const bool ok1 = caps::to_string(dense) == "1474560";
  const bool ok2 = caps::to_string(naive) == "2814749767106560";
  std::cout << (ok1 ? "PASS" : "FAIL") << " fully-connected capsule layer 6x6x32 (8D) -> 10 (16D): "
            << caps::to_string(dense) << " (expected 1474560)\n";
  std::cout << (ok2 ? "PASS" : "FAIL") << " naive dense capsules at 512x512, 32x8D -> 10x16D: " << caps::to_string(naive)
            << " (expected 2814749767106560)\n";
  return ok1 && ok2 ? 0 : kExitFailure;
}

int cmd_gen_data(const Common& c, std::optional<std::size_t> samples) {
  auto cfg = resolve(c);
  if (samples) cfg.data.samples = *samples;
  if (!cfg.data.manifest.empty()) throw UsageError("gen-data needs a synthetic data config, not a manifest");
  const auto d = data::generate(cfg.data.synth, cfg.data.samples);
  io::save_dataset(d, c.out);
  std::cout << "wrote " << d.size() << " samples (" << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
            << ") to " << (fs::path(c.out) / "manifest.tsv").string() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, bool routing) {
  const auto cfg = resolve(c);
  const fs::path out = c.out;
  save_resolved(cfg, out);
  const auto data = cfg.data.load();
  const auto spec = cfg.model.build();
  if (!spec.capsule_output()) throw UsageError("ablations need a capsule network");
  const auto t = routing ? exp::ablate_routing(spec, data, cfg.train, out) : exp::ablate_recon(spec, data, cfg.train, out);
  std::cout << t.to_tsv();
  return 0;
}

int cmd_rotate(const Common& c, const std::string& cnn_config, std::size_t epochs, std::size_t sample_index, double lr) {
  const auto cfg = resolve(c);
  auto cnn_cfg = config::load_experiment(cnn_config);
  cnn_cfg.model.height = cfg.model.height;
  cnn_cfg.model.width = cfg.model.width;
  const auto sample = data::generate_sample(cfg.data.synth, sample_index);
  exp::RotationOptions opt;
  opt.max_epochs = epochs;
  opt.lr = lr;
  opt.seed = cfg.train.init.seed;
  const auto r = exp::rotation_generalization({cfg.model.build(), cnn_cfg.model.build()}, sample, opt);
  exp::write_rotation_report(r, c.out);
  std::cout << r.to_tsv();
  std::printf("# capsule rotated mean %.4f vs cnn %.4f (gap %+.4f)\n", r.rotated_mean(0), r.rotated_mean(1),
              r.rotated_mean(0) - r.rotated_mean(1));
  return 0;
}

int cmd_perturb(const Common& c, const std::string& checkpoint, std::size_t sample_index, std::vector<std::size_t> dims) {
  const auto model = require_model(checkpoint);
  if (!model.spec.capsule_output() || model.spec.recon_widths.empty()) {
    throw UsageError("perturb needs a capsule network with a reconstruction head");
  }
  const auto cfg = resolve(c);
  const auto data = cfg.data.load();
  if (sample_index >= data.test.size()) throw UsageError("sample index out of range for the test split");
  const auto& s = data.test[sample_index];
  NoGradGuard guard;
  const auto fr = model::forward(model.spec, model.params, s.image);
  const Tensor pred = [&] {
    const auto m = metrics::binarize(fr.scores, model.threshold);
    return Tensor(fr.scores.shape(), std::vector<double>(m.begin(), m.end()));
  }();
  const std::size_t atoms = fr.final_caps.dim(3);
  if (dims.empty())
    for (std::size_t d = 0; d < std::min<std::size_t>(atoms, 4); ++d) dims.push_back(d);
  for (auto d : dims)
    if (d >= atoms) throw UsageError("capsule dimension " + std::to_string(d) + " out of range");
  const auto deltas = model::perturbation_deltas();
  const auto grid = model::perturb_and_reconstruct(model.spec, model.params, fr.final_caps, pred, dims, deltas);
  // One montage: a row per dimension, a column per delta.
  const std::size_t h = s.image.dim(0), w = s.image.dim(1);
  std::vector<double> mont(dims.size() * h * deltas.size() * w);
  for (std::size_t r = 0; r < dims.size(); ++r)
    for (std::size_t k = 0; k < deltas.size(); ++k) {
      const auto v = grid[r][k].data();
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) mont[(r * h + y) * deltas.size() * w + k * w + x] = v[y * w + x];
    }
  const fs::path out = c.out;
  fs::create_directories(out);
  io::write_pgm(out / "perturb_montage.pgm", io::image_to_pgm(Tensor(Shape{dims.size() * h, deltas.size() * w}, mont), 255));
  io::write_pgm(out / "input.pgm", io::image_to_pgm(s.image, 255));
  std::cout << "wrote " << (out / "perturb_montage.pgm").string() << " (" << dims.size() << " dims x " << deltas.size()
            << " deltas)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SegCaps capsule segmentation: training, evaluation and experiments"};
  app.require_subcommand(1);

  Common train_c, eval_c, predict_c, params_c, gen_c, abl_r_c, abl_g_c, rot_c, pert_c;
  std::string resume, checkpoint, image, split = "test", cnn_config = "mini_cnn";
  std::optional<double> threshold;
  std::optional<std::size_t> samples;
  std::size_t instances = 20, epochs = 1000, sample_index = 0;
  std::uint64_t grad_seed = 2024;
  double rot_lr = 5e-3;
  std::vector<std::string> only;
  std::vector<std::size_t> dims;

  auto* train = app.add_subcommand("train", "Train a model and report test metrics");
  add_common(train, train_c, "runs/train");
  add_schedule(train, train_c);
  train->add_option("--resume", resume, "Resume from a checkpoint directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained model on a data split");
  add_common(eval, eval_c, "runs/eval");
  eval->add_option("--checkpoint", checkpoint, "Model or training output directory")->required();
  eval->add_option("--threshold", threshold, "Override the stored threshold");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* predict = app.add_subcommand("predict", "Segment one image (PGM or CAPS)");
  add_common(predict, predict_c, "runs/predict");
  predict->add_option("--checkpoint", checkpoint, "Model or training output directory")->required();
  predict->add_option("--image", image, "Input image")->required();
  predict->add_option("--threshold", threshold, "Override the stored threshold");

  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  grad->add_option("--instances", instances, "Random instances per case")->capture_default_str();
  grad->add_option("--only", only, "Case or group names to run");
  grad->add_option("--seed", grad_seed, "Suite seed")->capture_default_str();

  auto* params = app.add_subcommand("params", "Per-layer parameter counts and identity checks");
  add_common(params, params_c, "runs/params");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as PGM files plus a manifest");
  add_common(gen, gen_c, "runs/data");
  gen->add_option("--samples", samples, "Number of samples");

  auto* abl_r = app.add_subcommand("ablate-routing", "Routing-iteration ablation (1, 2, 3, 4 and mixed 1,3)");
  add_common(abl_r, abl_r_c, "runs/ablate_routing");
  add_schedule(abl_r, abl_r_c);

  auto* abl_g = app.add_subcommand("ablate-recon", "Reconstruction ablation (gamma 0 and 1)");
  add_common(abl_g, abl_g_c, "runs/ablate_recon");
  add_schedule(abl_g, abl_g_c);

  auto* rot = app.add_subcommand("rotate-test", "Train on one image, test on rotations and mirrors");
  add_common(rot, rot_c, "runs/rotate");
  rot->add_option("--cnn-config", cnn_config, "Config of the comparison CNN")->capture_default_str();
  rot->add_option("--epochs", epochs, "Epoch cap")->capture_default_str();
  rot->add_option("--sample", sample_index, "Index of the synthetic sample")->capture_default_str();
  rot->add_option("--lr", rot_lr, "Learning rate")->capture_default_str();

  auto* pert = app.add_subcommand("perturb", "Reconstruct under capsule-dimension perturbations");
  add_common(pert, pert_c, "runs/perturb");
  pert->add_option("--checkpoint", checkpoint, "Model or training output directory")->required();
  pert->add_option("--sample", sample_index, "Test-split sample index")->capture_default_str();
  pert->add_option("--dims", dims, "Capsule dimensions to perturb")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_c, resume);
    if (*eval) return cmd_eval(eval_c, checkpoint, threshold, split);
    if (*predict) return cmd_predict(predict_c, checkpoint, image, threshold);
    if (*grad) return cmd_gradcheck(instances, only, grad_seed);
    if (*params) return cmd_params(params_c);
    if (*gen) return cmd_gen_data(gen_c, samples);
    if (*abl_r) return cmd_ablate(abl_r_c, true);
    if (*abl_g) return cmd_ablate(abl_g_c, false);
    if (*rot) return cmd_rotate(rot_c, cnn_config, epochs, sample_index, rot_lr);
    if (*pert) return cmd_perturb(pert_c, checkpoint, sample_index, dims);
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: parse: " << e.what() << " (byte " << e.offset() << ")\n";
    return kExitFailure;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitFailure;
  } catch (const train::DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
