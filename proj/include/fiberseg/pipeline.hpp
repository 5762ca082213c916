#pragma once

// Baseline segmentation methods as used in the evaluation grid. Threshold
// methods work on raw gray values; vesselness and forest features are computed
// on self-normalized volumes.

#include <optional>
#include <vector>

#include "fiberseg/baselines.hpp"
#include "fiberseg/forest.hpp"
#include "fiberseg/volume.hpp"

namespace fiberseg {

struct Segmentation {
  LabelVolume seg;
  std::optional<double> threshold;  // for threshold-based methods
};

Segmentation segment_otsu(const Volume& gray);

/// Ground-truth oracle threshold on the evaluation volume itself.
Segmentation segment_best_threshold(const Volume& gray, const LabelVolume& gt);

/// Vesselness binarized by the Dice-optimal threshold fitted on the training pair.
Segmentation segment_frangi(const Volume& train_gray, const LabelVolume& train_labels, const Volume& eval_gray,
                            const FrangiParams& params);

struct ForestRun {
  TrainedForest forest;
  Segmentation result;
};

ForestRun segment_forest(const Volume& train_gray, const LabelVolume& train_labels, const Volume& eval_gray,
                         const ForestConfig& cfg, std::span<const double> scales = kDefaultFeatureScales);

}  // namespace fiberseg
