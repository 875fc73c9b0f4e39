#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "segcaps/data.hpp"
#include "segcaps/losses.hpp"
#include "segcaps/metrics.hpp"
#include "segcaps/model.hpp"

namespace segcaps::train {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

AdamState make_adam(const model::ModelParams& params);

// One bias-corrected Adam update from the gradients accumulated in params.
// Parameters without a gradient buffer see a zero gradient.
void adam_step(model::ModelParams& params, AdamState& state, double lr);

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch_size = 1;
  double decay_factor = 0.05;
  // Iterations without a new minimum of the smoothed val loss before decay.
  std::size_t decay_patience = 2000;
  // Iterations without a new best val Dice before stopping.
  std::size_t early_stop_patience = 10000;
  std::size_t max_iterations = 20000;
  std::size_t eval_interval = 250;
  // Val-loss smoothing window, in evaluations.
  std::size_t smoothing_window = 10;
  std::uint64_t seed = 1;
  loss::LossConfig loss;
  bool augment = true;
  data::AugmentPolicy augment_policy = data::AugmentPolicy::standard();
  model::InitOptions init;
  // Evaluate on at most this many validation samples (0 = all).
  std::size_t val_limit = 0;

  void validate() const;
  // initial lr times decay_factor^k, by repeated multiplication.
  double lr_after(std::size_t decay_events) const;
};

struct EvalRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over the iterations since the last evaluation
  double val_loss = 0.0;
  double val_dice = 0.0;    // mean Dice at the swept threshold
  double threshold = 0.5;
};

struct TestResult {
  double threshold = 0.5;
  std::vector<double> dice;
  std::vector<double> hd;        // samples where HD is defined
  std::size_t hd_undefined = 0;  // prediction or ground truth empty
  metrics::Summary dice_summary() const { return metrics::summarize(dice); }
  metrics::Summary hd_summary() const { return metrics::summarize(hd); }
};

struct RunReport {
  std::string model;
  std::string config_hash;
  std::string init_hash;
  std::vector<EvalRecord> evals;
  std::size_t iterations = 0;
  std::size_t decay_events = 0;
  std::string stop_reason;
  double best_val_dice = 0.0;
  std::size_t best_iteration = 0;
  TestResult test;
  double wall_seconds = 0.0;

  // Everything except wall time, compared bit for bit.
  bool same_metrics(const RunReport& other) const;
  std::string evals_tsv() const;
  std::string summary_tsv() const;
  std::string to_json() const;
};

// Total loss for one sample. The reconstruction term is included when the
// network has a head and gamma > 0.
Tensor sample_loss(const model::NetSpec& spec, const model::ModelParams& params, const data::Sample& s,
                   double pos_weight, const loss::LossConfig& cfg, Tensor* scores_out = nullptr);

// Scores for one image, without recording.
Tensor predict_scores(const model::NetSpec& spec, const model::ModelParams& params, const Tensor& image);
TestResult evaluate(const model::NetSpec& spec, const model::ModelParams& params,
                    const std::vector<data::Sample>& samples, double threshold);

// Hex digest of every parameter value, in name order.
std::string params_hash(const model::ModelParams& params);

// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainState {
  model::ModelParams params;
  AdamState adam;
  std::size_t iteration = 0;
  std::size_t decay_events = 0;
  std::vector<double> val_loss_window;
  double best_smoothed_val_loss = std::numeric_limits<double>::infinity();
  std::size_t last_loss_improvement = 0;
  double best_val_dice = -1.0;
  std::size_t best_dice_iteration = 0;
  double best_threshold = 0.5;
  model::ModelParams best_params;
  std::vector<EvalRecord> evals;
  double train_loss_sum = 0.0;
  std::size_t train_loss_count = 0;
  std::string stop_reason;
  std::string init_hash;
};

class Trainer {
 public:
  Trainer(model::NetSpec spec, const data::Dataset& data, TrainConfig cfg);

  // One optimizer iteration over batch_size samples. Throws DivergenceError
  // (after writing a diagnostic checkpoint when an output dir is set) on a
  // non-finite loss or gradient.
  void step();
  // Evaluates on the validation split and updates the schedule.
  void evaluate_now();
  // Trains until finished or `steps` more iterations have run.
  void run(std::size_t steps = std::numeric_limits<std::size_t>::max());
  bool finished() const;

  // Test-split evaluation with the best parameters and threshold.
  RunReport report() const;

  void set_output_dir(std::filesystem::path dir) { out_dir_ = std::move(dir); }
  void save(const std::filesystem::path& dir) const;
  static Trainer load(const std::filesystem::path& dir, const data::Dataset& data);

  const TrainState& state() const { return state_; }
  TrainState& state_mut() { return state_; }
  const model::NetSpec& spec() const { return spec_; }
  const TrainConfig& config() const { return cfg_; }
  double current_lr() const { return cfg_.lr_after(state_.decay_events); }
  double pos_weight() const { return pos_weight_; }

 private:
  model::NetSpec spec_;
  const data::Dataset* data_;
  TrainConfig cfg_;
  double pos_weight_ = 1.0;
  TrainState state_;
  std::filesystem::path out_dir_;
};

// Full protocol: train, keep the best-val checkpoint, report on test.
// Writes checkpoint/, best/ and report files under out_dir when non-empty.
RunReport train(const model::NetSpec& spec, const data::Dataset& data, const TrainConfig& cfg,
                const std::filesystem::path& out_dir = {});

// Best-parameter checkpoint written by train(): spec, params, threshold.
struct Checkpoint {
  model::NetSpec spec;
  model::ModelParams params;
  double threshold = 0.5;
};
void save_model(const std::filesystem::path& dir, const model::NetSpec& spec, const model::ModelParams& params,
                double threshold);
Checkpoint load_model(const std::filesystem::path& dir);

}  // namespace segcaps::train
