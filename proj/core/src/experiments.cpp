#include "segcaps/experiments.hpp"

#include <algorithm>
#include <cstdio>

#include "segcaps/io.hpp"
#include "segcaps/metrics.hpp"

namespace segcaps::exp {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, const char* f = "%.4f") {
  char b[32];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

AblationRow run_arm(const std::string& label, const model::NetSpec& spec, const data::Dataset& data,
                    const train::TrainConfig& cfg, const fs::path& out_dir) {
  AblationRow row;
  row.label = label;
  fs::path dir;
  if (!out_dir.empty()) {
    std::string safe = label;
    std::replace(safe.begin(), safe.end(), ',', '_');
    std::replace(safe.begin(), safe.end(), '=', '_');
    dir = out_dir / ("arm_" + safe);
  }
  row.report = train::train(spec, data, cfg, dir);
  return row;
}

// Index of the row with the highest mean test Dice (first on ties).
std::size_t best_row(const AblationTable& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.rows.size(); ++i)
    if (t.rows[i].report.test.dice_summary().mean > t.rows[best].report.test.dice_summary().mean) best = i;
  return best;
}

void write_table(const AblationTable& t, const fs::path& out_dir) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  io::write_text(out_dir / ("ablate_" + t.kind + ".tsv"), t.to_tsv());
}

}  // namespace

std::string AblationTable::to_tsv() const {
  std::vector<std::vector<std::string>> rows_out;
  for (const auto& r : rows) {
    const auto d = r.report.test.dice_summary();
    const auto h = r.report.test.hd_summary();
    rows_out.push_back({r.label, std::to_string(r.report.iterations), r.report.init_hash,
                        fmt(r.report.best_val_dice), metrics::format_mean_std(d),
                        h.n ? metrics::format_mean_std(h) : "n/a",
                        r.paper_dice ? fmt(*r.paper_dice, "%.2f") : "n/a", r.paper_hd ? fmt(*r.paper_hd, "%.3f") : "n/a"});
  }
  std::string out = metrics::format_table(
      {"arm", "iterations", "init_hash", "val_dice", "test_dice", "test_hd", "paper_dice_pct", "paper_hd_mm"}, rows_out);
  out += "# paper: " + paper_direction + "\n";
  out += "# desk: " + desk_direction + (agrees_with_paper ? " (agrees)" : " (differs)") + "\n";
  return out;
}

AblationTable ablate_routing(const model::NetSpec& base, const data::Dataset& data, const train::TrainConfig& cfg,
                             const fs::path& out_dir) {
  AblationTable t;
  t.kind = "routing";
  // Clinical-scale reference values for the five settings.
  const struct {
    const char* label;
    std::size_t same, changing;
    double dice, hd;
  } arms[] = {{"1", 1, 1, 88.17, 67.668},
              {"2", 2, 2, 88.58, 42.345},
              {"3", 3, 3, 88.92, 37.171},
              {"4", 4, 4, 87.72, 110.901},
              {"1,3", 1, 3, 88.11, 72.877}};
  for (const auto& a : arms) {
    model::NetSpec spec = base;
    model::set_mixed_routing(spec, a.same, a.changing);
    auto row = run_arm(a.label, spec, data, cfg, out_dir);
    row.paper_dice = a.dice;
    row.paper_hd = a.hd;
    t.rows.push_back(std::move(row));
  }
  t.paper_direction = "d=3 best (88.92 vs 88.17 at d=1)";
  const std::size_t b = best_row(t);
  const double d3 = t.rows[2].report.test.dice_summary().mean;
  const double d1 = t.rows[0].report.test.dice_summary().mean;
  t.desk_direction = "d=" + t.rows[b].label + " best; d=3 " + fmt(d3) + " vs d=1 " + fmt(d1);
  t.agrees_with_paper = b == 2;
  write_table(t, out_dir);
  return t;
}

AblationTable ablate_recon(const model::NetSpec& base, const data::Dataset& data, const train::TrainConfig& cfg,
                           const fs::path& out_dir) {
  AblationTable t;
  t.kind = "recon";
  const struct {
    const char* label;
    double gamma, dice, hd;
  } arms[] = {{"gamma=0", 0.0, 88.58, 42.345}, {"gamma=1", 1.0, 88.92, 37.171}};
  for (const auto& a : arms) {
    train::TrainConfig c = cfg;
    c.loss.gamma = a.gamma;
    auto row = run_arm(a.label, base, data, c, out_dir);
    row.paper_dice = a.dice;
    row.paper_hd = a.hd;
    t.rows.push_back(std::move(row));
  }
  t.paper_direction = "reconstruction helps (88.92 vs 88.58)";
  const double off = t.rows[0].report.test.dice_summary().mean;
  const double on = t.rows[1].report.test.dice_summary().mean;
  t.desk_direction = "gamma=1 " + fmt(on) + " vs gamma=0 " + fmt(off) + ", delta " + fmt(on - off, "%+.4f");
  t.agrees_with_paper = on > off;
  write_table(t, out_dir);
  return t;
}

std::vector<std::string> rotation_transforms() { return {"identity", "rot90", "rot180", "rot270", "flip_h", "flip_v"}; }

Tensor apply_transform(const Tensor& img, const std::string& name) {
  if (name == "identity") return img;
  if (name == "rot90") return data::rotate90(img, 1);
  if (name == "rot180") return data::rotate90(img, 2);
  if (name == "rot270") return data::rotate90(img, 3);
  if (name == "flip_h") return data::flip_horizontal(img);
  if (name == "flip_v") return data::flip_vertical(img);
  throw ConfigError("unknown transform '" + name + "'");
}

double RotationReport::rotated_mean(std::size_t m) const {
  const auto& d = models.at(m).dice;
  double s = 0.0;
  for (std::size_t i = 1; i < d.size(); ++i) s += d[i];
  return d.size() > 1 ? s / static_cast<double>(d.size() - 1) : 0.0;
}

std::string RotationReport::to_tsv() const {
  std::vector<std::string> header{"model", "converged", "epochs", "train_dice"};
  for (const auto& t : transforms) header.push_back(t);
  header.push_back("rotated_mean");
  std::vector<std::vector<std::string>> rows;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto& r = models[m];
    std::vector<std::string> row{r.model, r.converged ? "yes" : "no", std::to_string(r.epochs), fmt(r.train_dice)};
    for (double d : r.dice) row.push_back(fmt(d));
    row.push_back(fmt(rotated_mean(m)));
    rows.push_back(std::move(row));
  }
  return metrics::format_table(header, rows);
}

RotationReport rotation_generalization(const std::vector<model::NetSpec>& specs, const data::Sample& sample,
                                       const RotationOptions& opt) {
  RotationReport rep;
  rep.transforms = rotation_transforms();
  rep.sample = sample;
  loss::require_binary(sample.mask, "rotation sample mask");
  const std::vector<Tensor> masks{sample.mask};
  const double pos_weight = loss::auto_pos_weight(masks);
  const auto gt = metrics::to_mask(sample.mask);
  for (const auto& spec : specs) {
    RotationModelResult r;
    r.model = spec.name;
    model::InitOptions init;
    init.seed = opt.seed;
    auto params = model::init_params(spec, init);
    params.set_requires_grad();
    auto adam = train::make_adam(params);
    const loss::LossConfig lc;
    auto train_dice = [&] {
      return metrics::dice(metrics::binarize(train::predict_scores(spec, params, sample.image), opt.threshold), gt);
    };
    for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
      params.zero_grad();
      backward(train::sample_loss(spec, params, sample, pos_weight, lc));
      train::adam_step(params, adam, opt.lr);
      r.epochs = epoch;
      if (epoch % opt.check_every == 0 || epoch == opt.max_epochs) {
        r.train_dice = train_dice();
        if (r.train_dice == 1.0) {
          r.converged = true;
          break;
        }
      }
    }
    if (opt.max_epochs == 0) r.train_dice = train_dice();
    for (const auto& t : rep.transforms) {
      const Tensor img = apply_transform(sample.image, t);
      const Tensor msk = apply_transform(sample.mask, t);
      const auto pred = metrics::binarize(train::predict_scores(spec, params, img), opt.threshold);
      r.dice.push_back(metrics::dice(pred, metrics::to_mask(msk)));
      std::vector<double> pv(pred.begin(), pred.end());
      r.predictions.emplace_back(msk.shape(), std::move(pv));
    }
    rep.models.push_back(std::move(r));
  }
  return rep;
}

void write_rotation_report(const RotationReport& r, const fs::path& dir) {
  fs::create_directories(dir / "images");
  io::write_text(dir / "rotation.tsv", r.to_tsv());
  for (std::size_t t = 0; t < r.transforms.size(); ++t) {
    const auto& name = r.transforms[t];
    io::write_pgm(dir / "images" / ("input_" + name + ".pgm"), io::image_to_pgm(apply_transform(r.sample.image, name), 255));
    io::write_pgm(dir / "images" / ("truth_" + name + ".pgm"), io::mask_to_pgm(apply_transform(r.sample.mask, name)));
    for (const auto& m : r.models) {
      io::write_pgm(dir / "images" / (m.model + "_" + name + ".pgm"), io::mask_to_pgm(m.predictions[t]));
    }
  }
}

}  // namespace segcaps::exp
