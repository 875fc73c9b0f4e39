#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "segcaps/data.hpp"
#include "segcaps/model.hpp"
#include "segcaps/trainer.hpp"

namespace segcaps::exp {

// One trained arm of an ablation.
struct AblationRow {
  std::string label;            // "1", "2", "3", "4", "1,3" or "gamma=0", "gamma=1"
  train::RunReport report;
  std::optional<double> paper_dice;  // clinical-scale reference, percent
  std::optional<double> paper_hd;    // mm
};

struct AblationTable {
  std::string kind;  // "routing" or "recon"
  std::vector<AblationRow> rows;
  // Desk outcome of the comparison the paper draws, e.g. d=3 vs d=1.
  std::string paper_direction;
  std::string desk_direction;
  bool agrees_with_paper = false;

  std::string to_tsv() const;
};

// Trains one model per routing setting {1, 2, 3, 4, mixed 1/3} from the
// same seed and initial weights. Mixed routes once at resolution-preserving
// layers and three times where the resolution changes.
AblationTable ablate_routing(const model::NetSpec& base, const data::Dataset& data, const train::TrainConfig& cfg,
                             const std::filesystem::path& out_dir = {});

// Trains with gamma = 0 and gamma = 1, same seed and initial weights.
AblationTable ablate_recon(const model::NetSpec& base, const data::Dataset& data, const train::TrainConfig& cfg,
                           const std::filesystem::path& out_dir = {});

struct RotationOptions {
  std::size_t max_epochs = 1000;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  // Convergence is checked every this many epochs.
  std::size_t check_every = 10;
  double threshold = 0.5;
};

struct RotationModelResult {
  std::string model;
  bool converged = false;
  std::size_t epochs = 0;
  double train_dice = 0.0;
  std::vector<double> dice;        // per transform
  std::vector<Tensor> predictions;  // binary masks per transform
};

struct RotationReport {
  std::vector<std::string> transforms;  // identity, rot90, rot180, rot270, flip_h, flip_v
  std::vector<RotationModelResult> models;
  data::Sample sample;

  // Mean Dice over the five non-identity transforms.
  double rotated_mean(std::size_t model) const;
  std::string to_tsv() const;
};

std::vector<std::string> rotation_transforms();
Tensor apply_transform(const Tensor& img, const std::string& name);

// Trains each model on one sample without augmentation until train Dice
// reaches 1 (or max_epochs), then scores the transformed copies.
RotationReport rotation_generalization(const std::vector<model::NetSpec>& specs, const data::Sample& sample,
                                       const RotationOptions& opt);
// Writes rotation.tsv and images/<model>_<transform>.pgm plus the inputs.
void write_rotation_report(const RotationReport& r, const std::filesystem::path& dir);

}  // namespace segcaps::exp
