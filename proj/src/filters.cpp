#include "fiberseg/filters.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numbers>

namespace fiberseg {

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

int kernel_radius(double sigma_vox) { return static_cast<int>(std::ceil(3.0 * sigma_vox)); }

std::vector<double> gaussian_kernel(double sigma_vox, int order) {
  if (!(sigma_vox > 0.0)) throw InvalidArgument("Gaussian sigma must be positive");
  if (order < 0 || order > 2) throw InvalidArgument("Gaussian derivative order must be 0, 1 or 2");
  const int r = kernel_radius(sigma_vox);
  const double s2 = sigma_vox * sigma_vox;
  std::vector<double> g(2 * r + 1);
  double gsum = 0.0;
  for (int i = -r; i <= r; ++i) {
    g[i + r] = std::exp(-0.5 * i * i / s2);
    gsum += g[i + r];
  }
  for (auto& w : g) w /= gsum;
  if (order == 0) return g;

  std::vector<double> k(g.size());
  for (int i = -r; i <= r; ++i) {
    k[i + r] = order == 1 ? -i / s2 * g[i + r] : (i * i / (s2 * s2) - 1.0 / s2) * g[i + r];
  }
  // zero sum, by removing a multiple of the Gaussian itself
  double ksum = 0.0;
  for (double w : k) ksum += w;
  for (std::size_t i = 0; i < k.size(); ++i) k[i] -= ksum * g[i];
  // unit response to x (order 1) / response 2 to x^2 (order 2)
  double moment = 0.0;
  for (int i = -r; i <= r; ++i) moment += (order == 1 ? -static_cast<double>(i) : static_cast<double>(i) * i) * k[i + r];
  const double target = order == 1 ? 1.0 : 2.0;
  for (auto& w : k) w *= target / moment;
  return k;
}

Volume convolve_axis(const Volume& v, std::span<const double> kernel, int axis) {
  if (axis < 0 || axis > 2) throw InvalidArgument("axis must be 0, 1 or 2");
  const auto& d = v.dims();
  const std::int64_t n = axis == 0 ? d.nz : axis == 1 ? d.ny : d.nx;
  const std::int64_t stride = axis == 0 ? d.ny * d.nx : axis == 1 ? d.nx : 1;
  const int r = static_cast<int>(kernel.size() / 2);
  const std::int64_t lines = static_cast<std::int64_t>(v.size()) / n;

  std::vector<float> out(v.size());
  std::vector<double> buf(n + 2 * r);
  const float* src = v.data().data();
  for (std::int64_t line = 0; line < lines; ++line) {
    // first element of this line
    std::int64_t base;
    if (axis == 2) {
      base = line * n;
    } else if (axis == 1) {
      base = (line / d.nx) * d.ny * d.nx + line % d.nx;
    } else {
      base = line;
    }
    for (std::int64_t i = -r; i < n + r; ++i) buf[i + r] = src[base + reflect_index(i, n) * stride];
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      // out(i) = sum_k kernel[k] * in(i - (k - r)); in(j) lives at buf[j + r]
      for (int k = 0; k <= 2 * r; ++k) acc += kernel[k] * buf[i + 2 * r - k];
      out[base + i * stride] = static_cast<float>(acc);
    }
  }
  return Volume(d, v.voxel_size_um(), std::move(out));
}

Volume gaussian_blur(const Volume& v, double sigma_vox) {
  const auto k = gaussian_kernel(sigma_vox, 0);
  return convolve_axis(convolve_axis(convolve_axis(v, k, 0), k, 1), k, 2);
}

Volume gaussian_derivative(const Volume& v, double sigma_vox, DerivativeOrder order) {
  for (int o : {order.z, order.y, order.x}) {
    if (o < 0 || o > 2) throw InvalidArgument("per-axis derivative order must be 0, 1 or 2");
  }
  if (order.z + order.y + order.x > 2) throw InvalidArgument("total derivative order must be <= 2");
  auto out = convolve_axis(v, gaussian_kernel(sigma_vox, order.z), 0);
  out = convolve_axis(out, gaussian_kernel(sigma_vox, order.y), 1);
  return convolve_axis(out, gaussian_kernel(sigma_vox, order.x), 2);
}

GaussianJet gaussian_jet(const Volume& v, double sigma_vox) {
  const std::array<std::vector<double>, 3> k{gaussian_kernel(sigma_vox, 0), gaussian_kernel(sigma_vox, 1),
                                             gaussian_kernel(sigma_vox, 2)};
  const std::array<Volume, 3> z{convolve_axis(v, k[0], 0), convolve_axis(v, k[1], 0), convolve_axis(v, k[2], 0)};
  auto zy = [&](int oz, int oy) { return convolve_axis(z[oz], k[oy], 1); };
  const Volume z0y0 = zy(0, 0), z0y1 = zy(0, 1), z0y2 = zy(0, 2), z1y0 = zy(1, 0), z1y1 = zy(1, 1), z2y0 = zy(2, 0);
  GaussianJet j;
  j.smooth = convolve_axis(z0y0, k[0], 2);
  j.dx = convolve_axis(z0y0, k[1], 2);
  j.dxx = convolve_axis(z0y0, k[2], 2);
  j.dy = convolve_axis(z0y1, k[0], 2);
  j.dyx = convolve_axis(z0y1, k[1], 2);
  j.dyy = convolve_axis(z0y2, k[0], 2);
  j.dz = convolve_axis(z1y0, k[0], 2);
  j.dzx = convolve_axis(z1y0, k[1], 2);
  j.dzy = convolve_axis(z1y1, k[0], 2);
  j.dzz = convolve_axis(z2y0, k[0], 2);
  return j;
}

namespace {

std::vector<float> scaled(const Volume& v, double s) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * s);
  return out;
}

}  // namespace

SymMat3Field hessian_from_jet(const GaussianJet& jet, double sigma_vox) {
  const double s2 = sigma_vox * sigma_vox;
  SymMat3Field h;
  h.dims = jet.smooth.dims();
  h.voxel_size_um = jet.smooth.voxel_size_um();
  h.xx = scaled(jet.dxx, s2);
  h.yy = scaled(jet.dyy, s2);
  h.zz = scaled(jet.dzz, s2);
  h.xy = scaled(jet.dyx, s2);
  h.xz = scaled(jet.dzx, s2);
  h.yz = scaled(jet.dzy, s2);
  return h;
}

SymMat3Field hessian_at_scale(const Volume& v, double sigma_vox) {
  return hessian_from_jet(gaussian_jet(v, sigma_vox), sigma_vox);
}

double frobenius_norm(const SymMat3& m) {
  return std::sqrt(m.xx * m.xx + m.yy * m.yy + m.zz * m.zz + 2.0 * (m.xy * m.xy + m.xz * m.xz + m.yz * m.yz));
}

double determinant(const SymMat3& m) {
  return m.xx * (m.yy * m.zz - m.yz * m.yz) - m.xy * (m.xy * m.zz - m.yz * m.xz) + m.xz * (m.xy * m.yz - m.yy * m.xz);
}

std::array<double, 3> eig3_symmetric(const SymMat3& m) {
  for (double e : {m.xx, m.yy, m.zz, m.xy, m.xz, m.yz}) {
    if (!std::isfinite(e)) throw InvalidArgument("eig3_symmetric: non-finite matrix entry");
  }
  std::array<double, 3> ev;
  const double off = m.xy * m.xy + m.xz * m.xz + m.yz * m.yz;
  if (off == 0.0) {
    ev = {m.xx, m.yy, m.zz};
  } else {
    const double q = trace(m) / 3.0;
    const double axx = m.xx - q, ayy = m.yy - q, azz = m.zz - q;
    const double p = std::sqrt((axx * axx + ayy * ayy + azz * azz + 2.0 * off) / 6.0);
    const SymMat3 b{axx / p, ayy / p, azz / p, m.xy / p, m.xz / p, m.yz / p};
    const double r = std::clamp(determinant(b) / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double e1 = q + 2.0 * p * std::cos(phi);
    const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    ev = {e1, 3.0 * q - e1 - e3, e3};
  }
  std::sort(ev.begin(), ev.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  return ev;
}

std::array<double, 3> eigenvector3(const SymMat3& m, double lambda) {
  using V = std::array<double, 3>;
  const V r0{m.xx - lambda, m.xy, m.xz};
  const V r1{m.xy, m.yy - lambda, m.yz};
  const V r2{m.xz, m.yz, m.zz - lambda};
  auto cross = [](const V& a, const V& b) {
    return V{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
  };
  auto norm2 = [](const V& a) { return a[0] * a[0] + a[1] * a[1] + a[2] * a[2]; };
  V best = cross(r0, r1);
  for (const V& c : {cross(r0, r2), cross(r1, r2)}) {
    if (norm2(c) > norm2(best)) best = c;
  }
  const double n = std::sqrt(norm2(best));
  if (n == 0.0) return {0.0, 0.0, 0.0};
  return {best[0] / n, best[1] / n, best[2] / n};
}

namespace {

SymMat3Field structure_tensor_from_gradient(const Volume& gz, const Volume& gy, const Volume& gx, double sigma_window) {
  auto smoothed_product = [&](const Volume& a, const Volume& b) {
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return gaussian_blur(Volume(a.dims(), a.voxel_size_um(), std::move(out)), sigma_window).vector();
  };
  SymMat3Field st;
  st.dims = gx.dims();
  st.voxel_size_um = gx.voxel_size_um();
  st.xx = smoothed_product(gx, gx);
  st.yy = smoothed_product(gy, gy);
  st.zz = smoothed_product(gz, gz);
  st.xy = smoothed_product(gx, gy);
  st.xz = smoothed_product(gx, gz);
  st.yz = smoothed_product(gy, gz);
  return st;
}

}  // namespace

SymMat3Field structure_tensor(const Volume& v, double sigma_grad, double sigma_window) {
  if (!(sigma_grad > 0.0) || !(sigma_window > 0.0)) throw InvalidArgument("structure tensor sigmas must be positive");
  const Volume gz = gaussian_derivative(v, sigma_grad, {1, 0, 0});
  const Volume gy = gaussian_derivative(v, sigma_grad, {0, 1, 0});
  const Volume gx = gaussian_derivative(v, sigma_grad, {0, 0, 1});
  return structure_tensor_from_gradient(gz, gy, gx, sigma_window);
}

FeatureStack compute_feature_stack(const Volume& v, std::span<const double> scales) {
  if (scales.empty()) throw InvalidArgument("feature stack needs at least one scale");
  FeatureStack fs;
  fs.dims = v.dims();
  fs.voxel_size_um = v.voxel_size_um();
  const std::size_t n = v.size();
  fs.data.resize(scales.size() * kFeaturesPerScale * n);
  std::size_t c = 0;
  for (double sigma : scales) {
    char tag[32];
    std::snprintf(tag, sizeof(tag), "@%g", sigma);
    for (const char* kind : {"smooth", "gradmag", "log", "hess1", "hess2", "hess3", "st1", "st2", "st3"}) {
      fs.names.push_back(std::string(kind) + tag);
    }
    const GaussianJet jet = gaussian_jet(v, sigma);
    const SymMat3Field hess = hessian_from_jet(jet, sigma);
    const SymMat3Field st = structure_tensor_from_gradient(jet.dz, jet.dy, jet.dx, 2.0 * sigma);
    auto ch = [&](std::size_t k) { return fs.channel(c + k); };
    std::ranges::copy(jet.smooth.data(), ch(0).begin());
    for (std::size_t i = 0; i < n; ++i) {
      ch(1)[i] = std::sqrt(jet.dz[i] * jet.dz[i] + jet.dy[i] * jet.dy[i] + jet.dx[i] * jet.dx[i]);
      const SymMat3 h = hess.at(i);
      ch(2)[i] = static_cast<float>(trace(h));
      const auto he = eig3_symmetric(h);
      const auto se = eig3_symmetric(st.at(i));
      for (int k = 0; k < 3; ++k) {
        ch(3 + k)[i] = static_cast<float>(he[k]);
        ch(6 + k)[i] = static_cast<float>(se[k]);
      }
    }
    c += kFeaturesPerScale;
  }
  return fs;
}

}  // namespace fiberseg
