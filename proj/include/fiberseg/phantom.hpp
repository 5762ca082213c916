#pragma once

// Synthetic short-fiber composite scans: straight capsule fibers with
// uniformly distributed orientation, rendered with partial-volume
// supersampling, blurred by a Gaussian PSF and corrupted by Gaussian noise.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fiberseg/rng.hpp"
#include "fiberseg/volume.hpp"

namespace fiberseg {

using Vec3 = std::array<double, 3>;  // (z, y, x) in micrometres

/// Line segment p0-p1 dilated by radius_um.
struct FiberCapsule {
  Vec3 p0{};
  Vec3 p1{};
  double radius_um = 6.5;
};

/// Volume fraction of 10 wt% glass (2.55 g/cm3) in PBT (1.31 g/cm3).
inline constexpr double kDefaultFiberVolumeFraction = 0.054;

struct PhantomSpec {
  Dims dims{96, 96, 96};
  double voxel_size_um = 3.9;
  double fiber_diameter_um = 13.0;
  double target_volume_fraction = kDefaultFiberVolumeFraction;
  double length_min_um = 150.0;
  double length_max_um = 400.0;
  double gray_matrix = 0.2;
  double gray_fiber = 0.8;
  double psf_sigma_um = 3.0;
  double noise_sigma = 0.05;
  int supersample = 3;
  std::uint64_t seed = 42;
  int max_attempts_per_fiber = 200;

  /// Physical edge lengths (z, y, x) in micrometres.
  Vec3 extent_um() const;
  /// Throws InvalidArgument describing the first violated invariant.
  void validate() const;
};

struct FiberScene {
  std::vector<FiberCapsule> fibers;
  Vec3 box_min{0, 0, 0};
  Vec3 box_max{0, 0, 0};
  /// Sum of analytic in-box capsule volumes divided by box volume.
  double volume_fraction = 0.0;
};

/// Thrown when rejection sampling cannot place another fiber.
class PlacementFailure : public Error {
 public:
  PlacementFailure(const std::string& what, double achieved) : Error(what), achieved_fraction(achieved) {}
  double achieved_fraction;
};

/// Tolerance on the analytic volume fraction of a sampled scene.
inline constexpr double kVolumeFractionTolerance = 0.005;

/// Unit vector uniformly distributed on the sphere.
Vec3 sample_direction(Rng& rng);

/// Distance between segments [p0,p1] and [q0,q1].
double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1);
/// Distance from point p to segment [a,b].
double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b);

/// Approximate volume of a capsule inside an axis-aligned box: cylinder over the
/// clipped axis length plus a hemispherical cap for each endpoint inside the box.
double capsule_volume_in_box(const FiberCapsule& c, const Vec3& box_min, const Vec3& box_max);

FiberScene sample_scene(const PhantomSpec& spec);

struct RenderedPair {
  Volume gray;
  LabelVolume labels;
};

/// Clean partial-volume render: gray interpolates matrix/fiber by subsample
/// occupancy and label = occupancy >= 0.5.
RenderedPair rasterize(const FiberScene& scene, const PhantomSpec& spec);

/// Gaussian PSF (sigma = psf_sigma_um / pitch voxels) then additive noise drawn from `noise_seed`.
Volume degrade(const Volume& v, const PhantomSpec& spec, std::uint64_t noise_seed);
/// Same, using spec.seed for the noise stream.
Volume degrade(const Volume& v, const PhantomSpec& spec);

/// sample_scene + rasterize + degrade.
RenderedPair generate(const PhantomSpec& spec);

struct PhantomPair {
  RenderedPair mr;
  RenderedPair lr;
  FiberScene scene;
};

/// Renders one scene at two pitches. Extents must agree within one LR voxel per axis.
PhantomPair generate_pair(const PhantomSpec& spec_mr, const PhantomSpec& spec_lr, std::uint64_t seed);

/// LR spec covering the same physical extent as `mr` at pitch `lr_pitch_um`.
PhantomSpec matching_spec(const PhantomSpec& mr, double lr_pitch_um);

/// Flat key=value spec file; '#' starts a comment. Unknown keys are errors.
PhantomSpec parse_phantom_spec(const std::string& text);
PhantomSpec load_phantom_spec(const std::filesystem::path& path);
std::string format_phantom_spec(const PhantomSpec& spec);

}  // namespace fiberseg
