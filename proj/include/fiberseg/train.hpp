#pragma once

// Patch-based training: fiber-biased patch sampling, flip/rotation
// augmentation, and the Adam iteration loop with named experiment presets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fiberseg/autodiff.hpp"
#include "fiberseg/model.hpp"
#include "fiberseg/rng.hpp"
#include "fiberseg/volume.hpp"

namespace fiberseg {

enum class Resolution { kMR, kLR };

/// MR: 64x64 (2D) / 32^3 (3D); LR: 32x32 (2D) / 16^3 (3D). 2D shapes have nz == 1.
Dims default_patch_shape(Resolution res, int dimensionality);

struct TrainConfig {
  std::int64_t iterations = 8000;
  std::int64_t batch_size = 3;
  double lr = 0.001;
  Dims patch_shape{32, 32, 32};
  bool augment = true;
  double fiber_biased_sampling_prob = 0.5;
  std::uint64_t seed = 42;
  std::int64_t log_every = 100;

  void validate() const;
};

struct Preset {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

/// mr2d-shallow, mr2d-deep, mr3d-shallow, mr3d-deep, lr2d-shallow, lr2d-deep,
/// lr3d-shallow, lr3d-deep. Presets run 2000 iterations.
Preset preset(const std::string& name);
std::vector<std::string> preset_names();
inline constexpr std::int64_t kPresetIterations = 2000;

struct Sample {
  PatchRef ref;
  Volume gray;
  LabelVolume labels;
};

/// Draws patch origins: uniform with probability 1 - p, otherwise centred on a
/// uniformly drawn fiber voxel and clamped to the volume.
class PatchSampler {
 public:
  PatchSampler(const Volume& gray, const LabelVolume& labels, Dims patch_shape, double fiber_prob);
  PatchSampler(Volume&&, const LabelVolume&, Dims, double) = delete;
  PatchSampler(const Volume&, LabelVolume&&, Dims, double) = delete;

  PatchRef draw(Rng& rng) const;
  Sample sample(Rng& rng) const;

 private:
  const Volume* gray_;
  const LabelVolume* labels_;
  Dims shape_;
  double fiber_prob_;
  std::vector<std::uint32_t> fiber_voxels_;
};

std::vector<Sample> sample_batch(const Volume& gray, const LabelVolume& labels, const TrainConfig& cfg, Rng& rng);

/// Per-axis flips (z, y, x) followed by `quarter_turns` 90-degree rotations in
/// `plane`: 0 = (y, x), 1 = (z, x), 2 = (z, y).
struct Transform {
  std::array<bool, 3> flip{false, false, false};
  int plane = 0;
  int quarter_turns = 0;

  bool is_identity() const { return !flip[0] && !flip[1] && !flip[2] && quarter_turns % 4 == 0; }
};

/// 2D patches (nz == 1) rotate in the (y, x) plane; 3D patches in a uniformly chosen plane.
Transform sample_transform(const Dims& shape, Rng& rng);

template <typename T>
Grid<T> flip_axes(const Grid<T>& g, const std::array<bool, 3>& flip) {
  const Dims d = g.dims();
  Grid<T> out(d, g.voxel_size_um());
  for (std::int64_t z = 0; z < d.nz; ++z) {
    const std::int64_t sz = flip[0] ? d.nz - 1 - z : z;
    for (std::int64_t y = 0; y < d.ny; ++y) {
      const std::int64_t sy = flip[1] ? d.ny - 1 - y : y;
      for (std::int64_t x = 0; x < d.nx; ++x) {
        out.at(z, y, x) = g.at(sz, sy, flip[2] ? d.nx - 1 - x : x);
      }
    }
  }
  return out;
}

/// out[a = i, b = j] = in[a = n - 1 - j, b = i] in the chosen plane, applied `turns` times.
template <typename T>
Grid<T> rotate_quarter(const Grid<T>& g, int plane, int turns) {
  turns = ((turns % 4) + 4) % 4;
  const Dims d = g.dims();
  const bool square = plane == 0 ? d.ny == d.nx : plane == 1 ? d.nz == d.nx : d.nz == d.ny;
  if (!square) throw InvalidArgument("90-degree rotation needs a square plane, patch is " + to_string(d));
  Grid<T> cur = g;
  for (int t = 0; t < turns; ++t) {
    Grid<T> out(d, g.voxel_size_um());
    for (std::int64_t z = 0; z < d.nz; ++z) {
      for (std::int64_t y = 0; y < d.ny; ++y) {
        for (std::int64_t x = 0; x < d.nx; ++x) {
          std::int64_t sz = z, sy = y, sx = x;
          if (plane == 0) {
            sy = d.nx - 1 - x;
            sx = y;
          } else if (plane == 1) {
            sz = d.nx - 1 - x;
            sx = z;
          } else {
            sz = d.ny - 1 - y;
            sy = z;
          }
          out.at(z, y, x) = cur.at(sz, sy, sx);
        }
      }
    }
    cur = std::move(out);
  }
  return cur;
}

template <typename T>
Grid<T> apply_transform(const Grid<T>& g, const Transform& t) {
  return rotate_quarter(flip_axes(g, t.flip), t.plane, t.quarter_turns);
}

template <typename T>
Grid<T> invert_transform(const Grid<T>& g, const Transform& t) {
  return flip_axes(rotate_quarter(g, t.plane, 4 - t.quarter_turns % 4), t.flip);
}

/// Applies one sampled transform to both patches in place and returns it.
Transform augment(Volume& gray, LabelVolume& labels, Rng& rng);

struct TrainLogEntry {
  std::int64_t iteration = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

/// `iter=<n> loss=<f> secs=<f>`
std::string format_log_line(const TrainLogEntry& e);

struct TrainRecord {
  std::vector<TrainLogEntry> log;  // iteration 1, multiples of log_every, and the last iteration
  std::vector<double> losses;      // every iteration
  std::int64_t optimizer_steps = 0;
  std::filesystem::path checkpoint;
};

using LogCallback = std::function<void(const TrainLogEntry&)>;

/// Iteration i draws its batch and augmentation from mix_seed(cfg.seed, i).
/// Throws Error naming the iteration and learning rate on a non-finite loss or gradient.
TrainRecord train_loop(const Volume& gray, const LabelVolume& labels, Model& model, const TrainConfig& cfg,
                       const LogCallback& on_log = {});

}  // namespace fiberseg
