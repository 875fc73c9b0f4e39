#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segcaps/data.hpp"
#include "segcaps/model.hpp"
#include "segcaps/trainer.hpp"

namespace segcaps::config {

// Network selection: a named builder plus its knobs, or a literal spec.
struct ModelConfig {
  std::string preset = "segcaps_desk";  // segcaps_desk | segcaps_full | baseline_desk | mini_cnn | custom
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t routing = 3;
  bool skips = true;
  std::vector<std::size_t> recon_widths{64, 128};
  std::size_t base_channels = 16;  // mini_cnn
  std::size_t levels = 3;          // mini_cnn
  std::optional<model::NetSpec> custom;

  model::NetSpec build() const;
};

struct DataConfig {
  data::SynthConfig synth;
  std::size_t samples = 200;
  // When set, load this manifest instead of generating.
  std::string manifest;

  data::Dataset load() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ModelConfig model;
  DataConfig data;
  train::TrainConfig train;
};

// Unknown keys and wrong types raise ConfigError naming the key path.
ExperimentConfig experiment_from_json(std::string_view text);
std::string to_json(const ExperimentConfig& cfg);

std::string train_config_to_json(const train::TrainConfig& cfg);
train::TrainConfig train_config_from_json(std::string_view text);

std::vector<std::string> preset_names();
ExperimentConfig preset(const std::string& name);
// A file path, or a built-in preset name.
ExperimentConfig load_experiment(const std::string& name_or_path);

}  // namespace segcaps::config
