#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fiberseg/volume.hpp"

namespace fiberseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Voxel tallies of `pred` against ground truth `gt`; the intersection is the voxel-wise minimum.
ConfusionCounts confusion(const LabelVolume& gt, const LabelVolume& pred);

/// 2tp / (2tp + fp + fn), and 1.0 when both masks are empty.
double dice(const ConfusionCounts& c);

struct DiceReport {
  std::string method;
  std::string volume;
  ConfusionCounts counts;
  double dice = 0.0;
};

DiceReport make_report(std::string method, std::string volume, const LabelVolume& gt, const LabelVolume& pred);

/// `method=<s> volume=<s> dice=<f6> tp=<n> tn=<n> fp=<n> fn=<n>`
std::string format_report(const DiceReport& r);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kTruePositiveColor{255, 255, 255};
inline constexpr Rgb kTrueNegativeColor{0, 0, 0};
inline constexpr Rgb kFalsePositiveColor{0, 200, 0};
inline constexpr Rgb kFalseNegativeColor{255, 140, 0};

/// Writes slice z of the error map as a binary P6 pixmap (width nx, height ny).
void render_error_map(const LabelVolume& gt, const LabelVolume& pred, std::int64_t z, const std::filesystem::path& path);

}  // namespace fiberseg
