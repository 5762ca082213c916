#pragma once

// Gaussian scale-space machinery: separable Gaussian and Gaussian-derivative
// filtering, Hessian and structure tensor fields, closed-form eigenvalues of
// symmetric 3x3 matrices, and the voxel feature stack used by the random forest.
//
// Boundary handling everywhere is reflect (mirror without repeating the edge
// sample): index -1 maps to 1 and index n maps to n-2.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fiberseg/volume.hpp"

namespace fiberseg {

/// Mirror an out-of-range index back into [0, n).
std::int64_t reflect_index(std::int64_t i, std::int64_t n);

/// Truncation radius ceil(3 sigma).
int kernel_radius(double sigma_vox);

/// Sampled Gaussian (order 0) or Gaussian-derivative (order 1, 2) kernel,
/// taps for offsets -R..R. Order 0 sums to 1. Orders 1 and 2 sum to 0 and are
/// scaled so that convolving x (order 1) or x^2 (order 2) yields exactly 1 and 2.
std::vector<double> gaussian_kernel(double sigma_vox, int order);

/// Convolve along one axis (0 = z, 1 = y, 2 = x): out(i) = sum_k kernel[k] * v(i - (k - R)).
Volume convolve_axis(const Volume& v, std::span<const double> kernel, int axis);

Volume gaussian_blur(const Volume& v, double sigma_vox);

struct DerivativeOrder {
  int z = 0;
  int y = 0;
  int x = 0;
};

Volume gaussian_derivative(const Volume& v, double sigma_vox, DerivativeOrder order);

struct SymMat3 {
  double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;
};

double frobenius_norm(const SymMat3& m);
double determinant(const SymMat3& m);
inline double trace(const SymMat3& m) { return m.xx + m.yy + m.zz; }

/// Eigenvalues ordered |l1| <= |l2| <= |l3| (trigonometric closed form).
std::array<double, 3> eig3_symmetric(const SymMat3& m);

/// Unit eigenvector for a known eigenvalue, from the largest cross product of rows of (m - lambda I).
std::array<double, 3> eigenvector3(const SymMat3& m, double lambda);

/// Per-voxel symmetric 3x3 field, one float plane per unique entry.
struct SymMat3Field {
  Dims dims;
  double voxel_size_um = 1.0;
  std::vector<float> xx, yy, zz, xy, xz, yz;

  SymMat3 at(std::size_t i) const { return {xx[i], yy[i], zz[i], xy[i], xz[i], yz[i]}; }
  std::size_t size() const { return xx.size(); }
};

/// Every Gaussian derivative up to total order 2, computed with shared separable passes.
struct GaussianJet {
  Volume smooth;
  Volume dz, dy, dx;
  Volume dzz, dyy, dxx, dzy, dzx, dyx;
};
GaussianJet gaussian_jet(const Volume& v, double sigma_vox);

/// Second derivatives multiplied by sigma^2 (gamma = 2 normalization).
SymMat3Field hessian_at_scale(const Volume& v, double sigma_vox);
SymMat3Field hessian_from_jet(const GaussianJet& jet, double sigma_vox);

/// Gradient outer product at sigma_grad, each component blurred at sigma_window.
SymMat3Field structure_tensor(const Volume& v, double sigma_grad, double sigma_window);

inline constexpr std::array<double, 4> kDefaultFeatureScales{0.7, 1.0, 1.6, 3.5};
inline constexpr int kFeaturesPerScale = 9;

/// Channel-major feature volume. Per scale, in this order:
///   smooth, gradmag, log, hess1, hess2, hess3, st1, st2, st3
/// where eigenvalue channels are sorted by ascending magnitude.
struct FeatureStack {
  Dims dims;
  double voxel_size_um = 1.0;
  std::vector<std::string> names;
  std::vector<float> data;

  std::size_t voxels() const { return dims.count(); }
  std::size_t channels() const { return names.size(); }
  std::span<const float> channel(std::size_t c) const { return {data.data() + c * voxels(), voxels()}; }
  std::span<float> channel(std::size_t c) { return {data.data() + c * voxels(), voxels()}; }
  float at(std::size_t c, std::size_t voxel) const { return data[c * voxels() + voxel]; }
};

FeatureStack compute_feature_stack(const Volume& v, std::span<const double> scales);

}  // namespace fiberseg
