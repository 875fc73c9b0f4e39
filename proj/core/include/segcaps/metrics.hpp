#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segcaps/tensor.hpp"

namespace segcaps::metrics {

// Binary mask over a 2D slice or a stack of slices, row-major.
using Mask = std::vector<std::uint8_t>;

// score > threshold.
Mask binarize(const Tensor& scores, double threshold);
Mask to_mask(const Tensor& binary);

// 2|A and B| / (|A| + |B|); two empty masks give 1.
double dice(const Mask& a, const Mask& b);

// Symmetric Hausdorff distance between mask boundaries (foreground voxels
// with a face neighbour that is background or outside the volume). dims is
// {H, W} or {D, H, W}; spacing has one entry per dim (default all 1).
// Computed exactly with separable squared Euclidean distance transforms.
// Throws Error("undefined HD ...") when either mask is empty.
double hausdorff(const Mask& a, const Mask& b, const std::vector<std::size_t>& dims,
                 std::vector<double> spacing = {});

// Squared EDT to the nearest set voxel of `seeds`; +inf if there is none.
std::vector<double> squared_distance_transform(const Mask& seeds, const std::vector<std::size_t>& dims,
                                               const std::vector<double>& spacing);
Mask boundary(const Mask& m, const std::vector<std::size_t>& dims);

struct SweepResult {
  double threshold = 0.5;
  double dice = 0.0;
  std::vector<std::pair<double, double>> table;  // (threshold, mean Dice)
};

// Thresholds k/20 for k = 1..19; the best mean Dice wins, ties go to the
// threshold closest to 0.5 (then the lower one).
std::vector<double> sweep_thresholds();
SweepResult threshold_sweep(const std::vector<Tensor>& scores, const std::vector<Tensor>& masks);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

Summary summarize(const std::vector<double>& values);
std::string format_mean_std(const Summary& s, int precision = 4);

// Tab-separated table: header line then one line per row.
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

}  // namespace segcaps::metrics
