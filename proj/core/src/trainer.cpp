#include "segcaps/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "segcaps/archive.hpp"
#include "segcaps/config.hpp"
#include "segcaps/io.hpp"
#include "segcaps/ops.hpp"
#include "segcaps/rng.hpp"

namespace segcaps::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kBatchStream = 0x7472616E73616D70ULL;
constexpr int kCheckpointVersion = 1;

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t hash_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

json eval_to_json(const EvalRecord& e) {
  return {{"iteration", e.iteration}, {"lr", e.lr},           {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},   {"val_dice", e.val_dice}, {"threshold", e.threshold}};
}

EvalRecord eval_from_json(const json& j) {
  EvalRecord e;
  e.iteration = j.at("iteration").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_loss = j.at("val_loss").get<double>();
  e.val_dice = j.at("val_dice").get<double>();
  e.threshold = j.at("threshold").get<double>();
  return e;
}

// JSON has no infinity; the unset minimum is stored as null.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double from_finite_or_null(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

void add_params(TensorArchive& a, const std::string& prefix, const model::ModelParams& p) {
  for (const auto& [name, t] : p.tensors) a.add(prefix + name, t);
}

model::ModelParams read_params(const TensorArchive& a, const std::string& prefix, const model::NetSpec& spec) {
  model::ModelParams p;
  for (const auto& [name, shape] : model::parameter_shapes(spec)) {
    Tensor t = a.get(prefix + name);
    if (t.shape() != shape) throw ShapeError("checkpoint " + prefix + name, t.shape(), shape);
    p.tensors.emplace(name, t);
  }
  return p;
}

}  // namespace

Tensor sample_loss(const model::NetSpec& spec, const model::ModelParams& params, const data::Sample& s,
                   double pos_weight, const loss::LossConfig& cfg, Tensor* scores_out) {
  const auto fr = model::forward(spec, params, s.image);
  Tensor recon;
  if (cfg.gamma > 0.0 && spec.capsule_output() && !spec.recon_widths.empty()) {
    recon = model::reconstruct(spec, params, fr.final_caps, s.mask);
  }
  if (scores_out) *scores_out = fr.scores;
  loss::LossConfig c = cfg;
  if (!recon.defined()) c.gamma = 0.0;
  return loss::total_loss(fr.scores, s.mask, s.image, recon, pos_weight, c);
}

AdamState make_adam(const model::ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.tensors) {
    s.m[name].assign(t.numel(), 0.0);
    s.v[name].assign(t.numel(), 0.0);
  }
  return s;
}

void adam_step(model::ModelParams& params, AdamState& st, double lr) {
  for (const auto& [name, t] : params.tensors) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in '" + name + "'");
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, t] : params.tensors) {
    auto& m = st.m.at(name);
    auto& v = st.v.at(name);
    const bool has = t.has_grad();
    const auto g = t.grad();
    auto w = t.data_mut();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw ConfigError("train.decay_factor must lie in (0, 1)");
  if (decay_patience == 0) throw ConfigError("train.decay_patience must be positive");
  if (early_stop_patience == 0) throw ConfigError("train.early_stop_patience must be positive");
  if (eval_interval == 0) throw ConfigError("train.eval_interval must be positive");
  if (smoothing_window == 0) throw ConfigError("train.smoothing_window must be positive");
  loss.validate();
}

double TrainConfig::lr_after(std::size_t decay_events) const {
  double f = 1.0;
  for (std::size_t k = 0; k < decay_events; ++k) f *= decay_factor;
  return lr * f;
}

bool RunReport::same_metrics(const RunReport& o) const {
  auto same_eval = [](const EvalRecord& a, const EvalRecord& b) {
    return a.iteration == b.iteration && a.lr == b.lr && a.train_loss == b.train_loss && a.val_loss == b.val_loss &&
           a.val_dice == b.val_dice && a.threshold == b.threshold;
  };
  if (evals.size() != o.evals.size()) return false;
  for (std::size_t i = 0; i < evals.size(); ++i)
    if (!same_eval(evals[i], o.evals[i])) return false;
  return model == o.model && config_hash == o.config_hash && init_hash == o.init_hash && iterations == o.iterations &&
         decay_events == o.decay_events && stop_reason == o.stop_reason && best_val_dice == o.best_val_dice &&
         best_iteration == o.best_iteration && test.threshold == o.test.threshold && test.dice == o.test.dice &&
         test.hd == o.test.hd && test.hd_undefined == o.test.hd_undefined;
}

std::string RunReport::evals_tsv() const {
  std::vector<std::vector<std::string>> rows;
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.6g", v);
    return std::string(b);
  };
  for (const auto& e : evals) {
    rows.push_back({std::to_string(e.iteration), num(e.lr), num(e.train_loss), num(e.val_loss), num(e.val_dice),
                    num(e.threshold)});
  }
  return metrics::format_table({"iteration", "lr", "train_loss", "val_loss", "val_dice", "threshold"}, rows);
}

std::string RunReport::summary_tsv() const {
  const auto hd = test.hd_summary();
  char thr[16];
  std::snprintf(thr, sizeof thr, "%.2f", test.threshold);
  return metrics::format_table(
      {"model", "iterations", "stop", "best_val_dice", "threshold", "test_dice", "test_hd", "hd_undefined"},
      {{model, std::to_string(iterations), stop_reason, std::to_string(best_val_dice), thr,
        metrics::format_mean_std(test.dice_summary()), hd.n ? metrics::format_mean_std(hd) : "n/a",
        std::to_string(test.hd_undefined)}});
}

std::string RunReport::to_json() const {
  json j;
  j["model"] = model;
  j["config_hash"] = config_hash;
  j["init_hash"] = init_hash;
  j["iterations"] = iterations;
  j["decay_events"] = decay_events;
  j["stop_reason"] = stop_reason;
  j["best_val_dice"] = best_val_dice;
  j["best_iteration"] = best_iteration;
  j["evals"] = json::array();
  for (const auto& e : evals) j["evals"].push_back(eval_to_json(e));
  const auto ds = test.dice_summary();
  const auto hs = test.hd_summary();
  j["test"] = {{"threshold", test.threshold}, {"dice", test.dice},       {"hd", test.hd},
               {"hd_undefined", test.hd_undefined}, {"dice_mean", ds.mean}, {"dice_std", ds.std},
               {"hd_mean", hs.mean}, {"hd_std", hs.std}};
  j["wall_seconds"] = wall_seconds;
  return j.dump(2);
}

Tensor predict_scores(const model::NetSpec& spec, const model::ModelParams& params, const Tensor& image) {
  NoGradGuard guard;
  return model::forward_segment(spec, params, image);
}

TestResult evaluate(const model::NetSpec& spec, const model::ModelParams& params,
                    const std::vector<data::Sample>& samples, double threshold) {
  TestResult r;
  r.threshold = threshold;
  for (const auto& s : samples) {
    const Tensor scores = predict_scores(spec, params, s.image);
    const auto pred = metrics::binarize(scores, threshold);
    const auto gt = metrics::to_mask(s.mask);
    r.dice.push_back(metrics::dice(pred, gt));
    const bool pred_empty = std::none_of(pred.begin(), pred.end(), [](auto v) { return v != 0; });
    const bool gt_empty = std::none_of(gt.begin(), gt.end(), [](auto v) { return v != 0; });
    if (pred_empty || gt_empty) {
      ++r.hd_undefined;
    } else {
      r.hd.push_back(metrics::hausdorff(pred, gt, {s.image.dim(0), s.image.dim(1)}, s.spacing));
    }
  }
  return r;
}

std::string params_hash(const model::ModelParams& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& [name, t] : params.tensors) {
    h = hash_bytes(h, name.data(), name.size());
    const auto d = t.data();
    h = hash_bytes(h, d.data(), d.size() * sizeof(double));
  }
  return hex64(h);
}

Trainer::Trainer(model::NetSpec spec, const data::Dataset& data, TrainConfig cfg)
    : spec_(std::move(spec)), data_(&data), cfg_(std::move(cfg)) {
  cfg_.validate();
  model::validate(spec_);
  if (data.train.empty() || data.val.empty() || data.test.empty()) {
    throw ConfigError("training needs non-empty train, val and test splits");
  }
  std::vector<Tensor> masks;
  for (const auto& s : data.train) {
    loss::require_binary(s.mask, "training mask");
    if (s.image.shape() != Shape{spec_.height, spec_.width}) {
      throw ShapeError("train sample " + s.id, s.image.shape(), Shape{spec_.height, spec_.width});
    }
    masks.push_back(s.mask);
  }
  pos_weight_ = cfg_.loss.pos_weight_mode == loss::PosWeightMode::fixed ? cfg_.loss.pos_weight
                                                                        : loss::auto_pos_weight(masks);
  state_.params = model::init_params(spec_, cfg_.init);
  state_.params.set_requires_grad();
  state_.adam = make_adam(state_.params);
  state_.best_params = state_.params.clone();
  state_.init_hash = params_hash(state_.params);
}

bool Trainer::finished() const { return !state_.stop_reason.empty() || state_.iteration >= cfg_.max_iterations; }

void Trainer::step() {
  const auto& train = data_->train;
  const std::size_t it = state_.iteration;
  double loss_value = 0.0;
  try {
    state_.params.zero_grad();
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      CounterRng rng(cfg_.seed, mix64(kBatchStream ^ (it * cfg_.batch_size + b)));
      const std::size_t idx = static_cast<std::size_t>(rng.below(train.size()));
      const data::Sample s = cfg_.augment ? data::augment(train[idx], rng, cfg_.augment_policy) : train[idx];
      Tensor l = sample_loss(spec_, state_.params, s, pos_weight_, cfg_.loss);
      if (cfg_.batch_size > 1) l = ops::mul(l, 1.0 / static_cast<double>(cfg_.batch_size));
      loss_value += l.item();
      backward(l);
    }
    adam_step(state_.params, state_.adam, current_lr());
  } catch (const NumericError& e) {
    std::string where;
    if (!out_dir_.empty()) {
      save(out_dir_ / "diverged");
      where = "; diagnostic checkpoint in " + (out_dir_ / "diverged").string();
    }
    throw DivergenceError("training diverged at iteration " + std::to_string(it) + ": " + e.what() + where);
  } catch (const DivergenceError& e) {
    std::string where;
    if (!out_dir_.empty()) {
      save(out_dir_ / "diverged");
      where = "; diagnostic checkpoint in " + (out_dir_ / "diverged").string();
    }
    throw DivergenceError("training diverged at iteration " + std::to_string(it) + ": " + e.what() + where);
  }
  state_.train_loss_sum += loss_value;
  ++state_.train_loss_count;
  ++state_.iteration;
}

void Trainer::evaluate_now() {
  const auto& val = data_->val;
  const std::size_t n = cfg_.val_limit ? std::min(cfg_.val_limit, val.size()) : val.size();
  std::vector<Tensor> scores, masks;
  double val_loss = 0.0;
  {
    NoGradGuard guard;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor sc;
      val_loss += sample_loss(spec_, state_.params, val[i], pos_weight_, cfg_.loss, &sc).item();
      scores.push_back(sc);
      masks.push_back(val[i].mask);
    }
  }
  val_loss /= static_cast<double>(n);
  const auto sweep = metrics::threshold_sweep(scores, masks);

  EvalRecord e;
  e.iteration = state_.iteration;
  e.lr = current_lr();
  e.train_loss = state_.train_loss_count ? state_.train_loss_sum / static_cast<double>(state_.train_loss_count) : 0.0;
  e.val_loss = val_loss;
  e.val_dice = sweep.dice;
  e.threshold = sweep.threshold;
  state_.evals.push_back(e);
  state_.train_loss_sum = 0.0;
  state_.train_loss_count = 0;

  // Learning-rate decay on stagnation of the smoothed validation loss.
  auto& w = state_.val_loss_window;
  w.push_back(val_loss);
  if (w.size() > cfg_.smoothing_window) w.erase(w.begin());
  const double smoothed = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  if (smoothed < state_.best_smoothed_val_loss) {
    state_.best_smoothed_val_loss = smoothed;
    state_.last_loss_improvement = state_.iteration;
  } else if (state_.iteration - state_.last_loss_improvement >= cfg_.decay_patience) {
    ++state_.decay_events;
    state_.last_loss_improvement = state_.iteration;
  }

  // Early stopping on validation Dice.
  if (sweep.dice > state_.best_val_dice) {
    state_.best_val_dice = sweep.dice;
    state_.best_dice_iteration = state_.iteration;
    state_.best_threshold = sweep.threshold;
    state_.best_params = state_.params.clone();
  } else if (state_.iteration - state_.best_dice_iteration >= cfg_.early_stop_patience) {
    state_.stop_reason = "early_stop";
  }
}

void Trainer::run(std::size_t steps) {
  for (std::size_t k = 0; k < steps && !finished(); ++k) {
    step();
    if (state_.iteration % cfg_.eval_interval == 0 || state_.iteration == cfg_.max_iterations) evaluate_now();
  }
  if (state_.stop_reason.empty() && state_.iteration >= cfg_.max_iterations) state_.stop_reason = "max_iterations";
}

RunReport Trainer::report() const {
  RunReport r;
  r.model = spec_.name;
  r.config_hash = hex64(hash_string(config::train_config_to_json(cfg_) + model::to_json(spec_)));
  r.init_hash = state_.init_hash;
  r.evals = state_.evals;
  r.iterations = state_.iteration;
  r.decay_events = state_.decay_events;
  r.stop_reason = state_.stop_reason;
  r.best_val_dice = std::max(0.0, state_.best_val_dice);
  r.best_iteration = state_.best_dice_iteration;
  r.test = evaluate(spec_, state_.best_params, data_->test, state_.best_threshold);
  return r;
}

void Trainer::save(const fs::path& dir) const {
  fs::create_directories(dir);
  TensorArchive a;
  add_params(a, "param/", state_.params);
  add_params(a, "best/", state_.best_params);
  for (const auto& [name, m] : state_.adam.m) a.add("adam_m/" + name, Shape{m.size()}, m);
  for (const auto& [name, v] : state_.adam.v) a.add("adam_v/" + name, Shape{v.size()}, v);
  a.save(dir / "weights.caps");

  json j;
  j["format"] = "segcaps-checkpoint";
  j["version"] = kCheckpointVersion;
  j["spec"] = json::parse(model::to_json(spec_));
  j["train"] = json::parse(config::train_config_to_json(cfg_));
  j["pos_weight"] = pos_weight_;
  j["adam_step"] = state_.adam.step;
  j["iteration"] = state_.iteration;
  j["decay_events"] = state_.decay_events;
  j["lr"] = current_lr();
  j["val_loss_window"] = state_.val_loss_window;
  j["best_smoothed_val_loss"] = finite_or_null(state_.best_smoothed_val_loss);
  j["last_loss_improvement"] = state_.last_loss_improvement;
  j["best_val_dice"] = state_.best_val_dice;
  j["best_dice_iteration"] = state_.best_dice_iteration;
  j["threshold"] = state_.best_threshold;
  j["train_loss_sum"] = state_.train_loss_sum;
  j["train_loss_count"] = state_.train_loss_count;
  j["stop_reason"] = state_.stop_reason;
  j["init_hash"] = state_.init_hash;
  j["evals"] = json::array();
  for (const auto& e : state_.evals) j["evals"].push_back(eval_to_json(e));
  io::write_text(dir / "meta.json", j.dump(2));
}

Trainer Trainer::load(const fs::path& dir, const data::Dataset& data) {
  if (!fs::exists(dir / "meta.json") || !fs::exists(dir / "weights.caps")) {
    throw Error("checkpoint not found: " + dir.string());
  }
  json j;
  try {
    j = json::parse(io::read_text(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint meta.json: " + std::string(e.what()));
  }
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
    Trainer t(model::netspec_from_json(j.at("spec").dump()), data, config::train_config_from_json(j.at("train").dump()));
    const auto a = TensorArchive::load(dir / "weights.caps");
    auto& s = t.state_;
    s.params = read_params(a, "param/", t.spec_);
    s.params.set_requires_grad();
    s.best_params = read_params(a, "best/", t.spec_);
    for (const auto& [name, tensor] : s.params.tensors) {
      const Tensor mt = a.get("adam_m/" + name), vt = a.get("adam_v/" + name);
      const auto m = mt.data(), v = vt.data();
      if (m.size() != tensor.numel() || v.size() != tensor.numel()) throw ConfigError("checkpoint: Adam moments for '" + name + "' have the wrong size");
      s.adam.m[name].assign(m.begin(), m.end());
      s.adam.v[name].assign(v.begin(), v.end());
    }
    t.pos_weight_ = j.at("pos_weight").get<double>();
    s.adam.step = j.at("adam_step").get<std::uint64_t>();
    s.iteration = j.at("iteration").get<std::size_t>();
    s.decay_events = j.at("decay_events").get<std::size_t>();
    s.val_loss_window = j.at("val_loss_window").get<std::vector<double>>();
    s.best_smoothed_val_loss = from_finite_or_null(j.at("best_smoothed_val_loss"));
    s.last_loss_improvement = j.at("last_loss_improvement").get<std::size_t>();
    s.best_val_dice = j.at("best_val_dice").get<double>();
    s.best_dice_iteration = j.at("best_dice_iteration").get<std::size_t>();
    s.best_threshold = j.at("threshold").get<double>();
    s.train_loss_sum = j.at("train_loss_sum").get<double>();
    s.train_loss_count = j.at("train_loss_count").get<std::size_t>();
    s.stop_reason = j.at("stop_reason").get<std::string>();
    s.init_hash = j.at("init_hash").get<std::string>();
    s.evals.clear();
    for (const auto& e : j.at("evals")) s.evals.push_back(eval_from_json(e));
    return t;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint meta.json: " + std::string(e.what()));
  }
}

RunReport train(const model::NetSpec& spec, const data::Dataset& data, const TrainConfig& cfg, const fs::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer t(spec, data, cfg);
  if (!out_dir.empty()) t.set_output_dir(out_dir);
  t.run();
  RunReport r = t.report();
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) {
    t.save(out_dir / "checkpoint");
    save_model(out_dir / "best", t.spec(), t.state().best_params, t.state().best_threshold);
    io::write_text(out_dir / "report.json", r.to_json());
    io::write_text(out_dir / "evals.tsv", r.evals_tsv());
    io::write_text(out_dir / "summary.tsv", r.summary_tsv());
  }
  return r;
}

void save_model(const fs::path& dir, const model::NetSpec& spec, const model::ModelParams& params, double threshold) {
  fs::create_directories(dir);
  TensorArchive a;
  add_params(a, "", params);
  a.save(dir / "weights.caps");
  json j;
  j["format"] = "segcaps-model";
  j["version"] = kCheckpointVersion;
  j["spec"] = json::parse(model::to_json(spec));
  j["threshold"] = threshold;
  io::write_text(dir / "meta.json", j.dump(2));
}

Checkpoint load_model(const fs::path& dir) {
  // Accept either a model directory or a training output directory.
  fs::path d = dir;
  if (!fs::exists(d / "meta.json") && fs::exists(d / "best" / "meta.json")) d = d / "best";
  if (!fs::exists(d / "meta.json") || !fs::exists(d / "weights.caps")) {
    throw Error("checkpoint not found: " + dir.string());
  }
  try {
    const json j = json::parse(io::read_text(d / "meta.json"));
    Checkpoint c;
    c.spec = model::netspec_from_json(j.at("spec").dump());
    c.threshold = j.at("threshold").get<double>();
    const auto a = TensorArchive::load(d / "weights.caps");
    // Training checkpoints keep the best weights under "best/".
    const std::string prefix = j.at("format").get<std::string>() == "segcaps-checkpoint" ? "best/" : "";
    c.params = read_params(a, prefix, c.spec);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint meta.json: " + std::string(e.what()));
  }
}

}  // namespace segcaps::train
