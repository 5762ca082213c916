#pragma once

// Whole-volume prediction. 2D models run slice by slice along z; 3D models
// run on overlapping patches whose fiber probabilities are averaged.

#include <cstdint>
#include <optional>
#include <vector>

#include "fiberseg/model.hpp"
#include "fiberseg/volume.hpp"

namespace fiberseg {

struct Prediction {
  Volume prob;       // softmax fiber probability
  LabelVolume seg;   // prob >= 0.5
  Grid<std::uint32_t> coverage;  // covering-patch count per voxel (3D only)
};

Prediction predict_2d(Model& model, const Volume& v);

/// Patch origins along one axis: multiples of `stride` below n - patch, plus n - patch.
std::vector<std::int64_t> tile_origins(std::int64_t n, std::int64_t patch, std::int64_t stride);

/// Default stride: half the patch per axis (at least 1).
Dims default_stride(const Dims& patch);

Prediction predict_3d(Model& model, const Volume& v, const Dims& patch, std::optional<Dims> stride = std::nullopt);

struct InferOptions {
  Dims patch{32, 32, 32};          // 3D only; clamped to the volume
  std::optional<Dims> stride;      // 3D only; default patch / 2
};

/// normalize() followed by the predictor matching the model's dimensionality.
Prediction normalize_then_predict(Model& model, const Volume& raw, const InferOptions& opts = {});

}  // namespace fiberseg
