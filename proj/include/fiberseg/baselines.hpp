#pragma once

// Threshold and Hessian baselines: Otsu, the ground-truth best threshold, and
// multiscale Frangi vesselness.

#include <cstdint>
#include <optional>
#include <vector>

#include "fiberseg/volume.hpp"

namespace fiberseg {

/// Equal-width histogram over the observed [min, max] of a volume. Bin k holds
/// the voxels with edge(k) <= v < edge(k+1) (the top bin also holds max), so
/// "bin >= k" and "v >= edge(k)" select exactly the same voxels.
struct ThresholdHistogram {
  double min = 0.0;
  double max = 0.0;
  double width = 0.0;
  std::vector<std::uint64_t> counts;

  int bins() const { return static_cast<int>(counts.size()); }
  double edge(int k) const { return min + k * width; }
  int bin_of(float v) const;
};

inline constexpr int kDefaultHistogramBins = 256;

/// Throws DegenerateInput for constant volumes.
ThresholdHistogram make_histogram(const Volume& v, int bins = kDefaultHistogramBins);

struct ThresholdChoice {
  int cut = 0;             // voxels in bins >= cut are fiber
  double threshold = 0.0;  // == histogram edge(cut)
  double score = 0.0;      // between-class score (Otsu) or Dice (best threshold)
};

/// Fiber where v >= threshold.
LabelVolume binarize(const Volume& v, double threshold);

/// Cut among edges 1..bins-1 maximizing between-class variance; ties go to the lower cut.
/// `score` is proportional to the between-class variance (bin-index units, scaled by N^2).
ThresholdChoice otsu_threshold(const Volume& v, int bins = kDefaultHistogramBins);

/// Edge among 0..bins-1 whose binarization maximizes Dice against `gt`; ties go to the lower edge.
/// An all-background `gt` yields Dice 0 at every edge and returns the first edge.
ThresholdChoice best_dice_threshold(const Volume& v, const LabelVolume& gt, int bins = kDefaultHistogramBins);

struct FrangiParams {
  std::vector<double> scales_vox{1.0, 1.5, 2.0};
  double alpha = 0.5;
  double beta = 0.5;
  std::optional<double> c;  // empty: half the largest Hessian norm at each scale
  bool bright = true;

  void validate() const;
};

/// Scales bracketing the fiber radius at this pitch: {1, 1.5, 2} vox at MR, {0.6, 0.8, 1} at LR.
FrangiParams frangi_defaults_for_pitch(double voxel_size_um, double fiber_diameter_um = 13.0);

/// Vesselness in [0, 1], maximum over scales.
Volume frangi_vesselness(const Volume& v, const FrangiParams& params);

}  // namespace fiberseg
