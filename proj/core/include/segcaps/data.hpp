#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segcaps/rng.hpp"
#include "segcaps/tensor.hpp"

namespace segcaps::data {

// image: [H, W] in [0, 1]; mask: [H, W] with values exactly 0 or 1.
struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
  std::vector<double> spacing;  // mm per axis; empty = unit
};

struct Dataset {
  std::vector<Sample> train, val, test;
  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

enum class ObjectFamily { ellipses, lobes };

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t height = 64;
  std::size_t width = 64;
  ObjectFamily family = ObjectFamily::lobes;
  // Ellipse family: number of objects drawn per image.
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  // Multiplicative low-frequency intensity field amplitude.
  double inhomogeneity = 0.15;
  double noise_sigma = 0.04;
  // Expected number of distractor blobs per image: outside objects they take
  // the object intensity, inside objects the surrounding intensity.
  double distractor_density = 3.0;

  // H, W powers of two >= 32.
  void validate() const;
};

Sample generate_sample(const SynthConfig& cfg, std::size_t index);
std::string sample_id(std::size_t index);

// n >= 10 samples split 80/10/10 by hashed id.
Dataset generate(const SynthConfig& cfg, std::size_t n);

// Clip to [-1024, 3072] then (x + 1024) / 4096.
Tensor preprocess_ct(const Tensor& raw);

// (x - mean) / std, then min-max to [0, 1]; a constant image maps to 0.5.
Tensor preprocess_zscore(const Tensor& image);

struct AugmentPolicy {
  bool flip_h = false;
  bool flip_v = false;
  bool rotate90 = false;  // random multiple of 90 degrees
  bool scale = false;
  bool shift = false;
  bool rotate = false;
  bool elastic = false;
  bool noise = false;
  // Each enabled transform fires with this probability.
  double probability = 0.5;
  double scale_min = 0.9, scale_max = 1.1;
  double shift_max = 4.0;        // pixels
  double rotate_max_deg = 15.0;
  double elastic_alpha = 3.0;    // displacement magnitude, pixels
  double elastic_sigma = 4.0;    // smoothing of the displacement field, pixels
  double noise_sigma = 0.02;

  static AugmentPolicy none() { return {}; }
  static AugmentPolicy standard();
};

// Identical geometric transforms on image (bilinear) and mask (nearest);
// noise touches the image only.
Sample augment(const Sample& s, CounterRng& rng, const AugmentPolicy& policy);

// Exact pixel permutations.
Tensor flip_horizontal(const Tensor& img);
Tensor flip_vertical(const Tensor& img);
Tensor rotate90(const Tensor& img, int quarter_turns);  // counter-clockwise

}  // namespace segcaps::data
