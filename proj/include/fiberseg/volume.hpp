#pragma once

// Dense voxel grids, the VXG1 file format, and patch/slice access.
//
// Memory order is z-major with x fastest: index = (z * ny + y) * nx + x.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fiberseg/error.hpp"

namespace fiberseg {

struct Dims {
  std::int64_t nz = 1;
  std::int64_t ny = 1;
  std::int64_t nx = 1;

  std::size_t count() const { return static_cast<std::size_t>(nz * ny * nx); }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

struct Index3 {
  std::int64_t z = 0;
  std::int64_t y = 0;
  std::int64_t x = 0;

  bool operator==(const Index3&) const = default;
};

template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  Grid(Dims dims, double voxel_size_um, T fill = T{})
      : dims_(dims), voxel_size_um_(voxel_size_um), data_(checked_count(dims, voxel_size_um), fill) {}

  Grid(Dims dims, double voxel_size_um, std::vector<T> data)
      : dims_(dims), voxel_size_um_(voxel_size_um), data_(std::move(data)) {
    if (data_.size() != checked_count(dims, voxel_size_um)) {
      throw ShapeMismatch("voxel data length " + std::to_string(data_.size()) +
                          " does not match dims " + to_string(dims));
    }
  }

  const Dims& dims() const { return dims_; }
  double voxel_size_um() const { return voxel_size_um_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vector() const { return data_; }

  std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((z * dims_.ny + y) * dims_.nx + x);
  }
  T& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data_[index(z, y, x)]; }
  const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data_[index(z, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const Grid&) const = default;

 private:
  static std::size_t checked_count(const Dims& d, double pitch) {
    if (d.nz < 1 || d.ny < 1 || d.nx < 1) throw InvalidArgument("dims must be >= 1, got " + to_string(d));
    if (!(pitch > 0.0)) throw InvalidArgument("voxel size must be positive");
    return d.count();
  }

  Dims dims_{};
  double voxel_size_um_ = 1.0;
  std::vector<T> data_;
};

/// Gray-value scan, one float per voxel.
using Volume = Grid<float>;
/// Binary mask: 0 = polymer/background, 1 = fiber.
using LabelVolume = Grid<std::uint8_t>;
using AnyVolume = std::variant<Volume, LabelVolume>;

/// Throws FormatError unless every voxel is 0 or 1.
void validate_labels(const LabelVolume& labels);

/// Box of voxels; 2D patches use shape.nz == 1.
struct PatchRef {
  Index3 origin;
  Dims shape;
};

bool patch_fits(const Dims& dims, const PatchRef& p);

// VXG1: one UTF-8 header line
//   VXG1 dtype=<f32|u8> dims=<nz>,<ny>,<nx> pitch_um=<decimal>\n
// followed by the little-endian payload, x fastest.
AnyVolume load_volume(const std::filesystem::path& path);
Volume load_gray(const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
void save_volume(const LabelVolume& v, const std::filesystem::path& path);

/// Affine map to zero mean and unit population standard deviation.
/// Throws DegenerateInput for constant volumes.
Volume normalize(const Volume& v);

struct Moments {
  double mean = 0.0;
  double stddev = 0.0;
};
Moments moments(std::span<const float> values);

template <typename T>
Grid<T> extract_patch(const Grid<T>& v, const PatchRef& p) {
  if (!patch_fits(v.dims(), p)) {
    throw InvalidArgument("patch at (" + std::to_string(p.origin.z) + "," + std::to_string(p.origin.y) + "," +
                          std::to_string(p.origin.x) + ") shape " + to_string(p.shape) +
                          " exceeds volume " + to_string(v.dims()));
  }
  Grid<T> out(p.shape, v.voxel_size_um());
  for (std::int64_t z = 0; z < p.shape.nz; ++z) {
    for (std::int64_t y = 0; y < p.shape.ny; ++y) {
      const T* src = &v.at(p.origin.z + z, p.origin.y + y, p.origin.x);
      T* dst = &out.at(z, y, 0);
      std::copy(src, src + p.shape.nx, dst);
    }
  }
  return out;
}

/// Writes `src` into `dst` with its first voxel at `origin`.
template <typename T>
void insert_patch(Grid<T>& dst, const Grid<T>& src, const Index3& origin) {
  if (!patch_fits(dst.dims(), PatchRef{origin, src.dims()})) throw InvalidArgument("patch does not fit destination");
  for (std::int64_t z = 0; z < src.dims().nz; ++z) {
    for (std::int64_t y = 0; y < src.dims().ny; ++y) {
      const T* s = &src.at(z, y, 0);
      std::copy(s, s + src.dims().nx, &dst.at(origin.z + z, origin.y + y, origin.x));
    }
  }
}

/// The (1, ny, nx) plane at depth z.
template <typename T>
Grid<T> slice2d(const Grid<T>& v, std::int64_t z) {
  if (z < 0 || z >= v.dims().nz) {
    throw InvalidArgument("slice index " + std::to_string(z) + " out of range [0," + std::to_string(v.dims().nz) + ")");
  }
  return extract_patch(v, PatchRef{{z, 0, 0}, {1, v.dims().ny, v.dims().nx}});
}

}  // namespace fiberseg
