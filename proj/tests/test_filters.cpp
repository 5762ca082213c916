#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>
#include <set>

#include "fiberseg/filters.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fiberseg;

namespace {

std::int64_t mirror(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

std::vector<double> normalized_gaussian(double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> w(2 * r + 1);
  double s = 0;
  for (int k = -r; k <= r; ++k) s += w[k + r] = std::exp(-k * k / (2 * sigma * sigma));
  for (auto& x : w) x /= s;
  return w;
}

Volume dense_blur(const Volume& v, double sigma) {
  const auto w = normalized_gaussian(sigma);
  const int r = static_cast<int>(w.size() / 2);
  const Dims d = v.dims();
  Volume out(d, v.voxel_size_um());
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        double acc = 0;
        for (int a = -r; a <= r; ++a)
          for (int b = -r; b <= r; ++b)
            for (int c = -r; c <= r; ++c)
              acc += w[a + r] * w[b + r] * w[c + r] *
                     v.at(mirror(z + a, d.nz), mirror(y + b, d.ny), mirror(x + c, d.nx));
        out.at(z, y, x) = static_cast<float>(acc);
      }
  return out;
}

Volume field(Dims d, auto f) {
  Volume v(d, 1.0);
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) v.at(z, y, x) = static_cast<float>(f(double(z), double(y), double(x)));
  return v;
}

SymMat3 random_sym(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5, 5);
  return {u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
}

}  // namespace

TEST(Kernel, RadiusAndNormalization) {
  EXPECT_EQ(kernel_radius(1.0), 3);
  EXPECT_EQ(kernel_radius(0.7), 3);
  EXPECT_EQ(kernel_radius(1.6), 5);
  for (double s : {0.6, 1.0, 2.5}) {
    const auto g = gaussian_kernel(s, 0);
    double sum = 0, s1 = 0, s2 = 0;
    for (double w : g) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    const auto d1 = gaussian_kernel(s, 1), d2 = gaussian_kernel(s, 2);
    for (double w : d1) s1 += w;
    for (double w : d2) s2 += w;
    EXPECT_NEAR(s1, 0.0, 1e-12);
    EXPECT_NEAR(s2, 0.0, 1e-12);
  }
  EXPECT_THROW(gaussian_kernel(0.0, 0), InvalidArgument);
  EXPECT_THROW(gaussian_kernel(1.0, 3), InvalidArgument);
}

TEST(Reflect, MirrorsWithoutRepeatingEdge) {
  EXPECT_EQ(reflect_index(-1, 5), 1);
  EXPECT_EQ(reflect_index(5, 5), 3);
  EXPECT_EQ(reflect_index(-6, 5), 2);
  for (std::int64_t i = -20; i < 20; ++i) EXPECT_EQ(reflect_index(i, 4), mirror(i, 4));
}

TEST(Blur, ConstantUnchanged) {
  const Volume v({9, 9, 9}, 1.0, 2.5f);
  const Volume b = gaussian_blur(v, 1.3);
  for (float x : b.data()) EXPECT_NEAR(x, 2.5f, 1e-6);
  EXPECT_THROW(gaussian_blur(v, 0.0), InvalidArgument);
}

TEST(Blur, DeltaImpulseCentre) {
  Volume v({15, 15, 15}, 1.0);
  v.at(7, 7, 7) = 1.0f;
  const double w0 = normalized_gaussian(1.0)[3];
  EXPECT_NEAR(gaussian_blur(v, 1.0).at(7, 7, 7), w0 * w0 * w0, 1e-7);
}

TEST(Blur, MatchesDenseConvolution) {
  const Volume v = testutil::random_volume({11, 11, 11}, 21);
  for (double s : {0.7, 1.0, 1.6}) {
    const Volume a = gaussian_blur(v, s), b = dense_blur(v, s);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-5) << "sigma " << s;
  }
}

TEST(Derivative, RampAndParabola) {
  const Dims d{20, 20, 20};
  const Volume ramp = field(d, [](double, double, double x) { return x; });
  const Volume g = gaussian_derivative(ramp, 1.2, {0, 0, 1});
  const Volume gy = gaussian_derivative(ramp, 1.2, {0, 1, 0});
  const Volume par = field(d, [](double z, double, double) { return (z - 10) * (z - 10); });
  const Volume h = gaussian_derivative(par, 1.2, {2, 0, 0});
  for (std::int64_t z = 6; z < 14; ++z)
    for (std::int64_t y = 6; y < 14; ++y)
      for (std::int64_t x = 6; x < 14; ++x) {
        EXPECT_NEAR(g.at(z, y, x), 1.0, 1e-3);
        EXPECT_NEAR(gy.at(z, y, x), 0.0, 1e-5);
        EXPECT_NEAR(h.at(z, y, x), 2.0, 1e-3);
      }
}

TEST(Derivative, ConstantGivesZero) {
  const Volume v({10, 10, 10}, 1.0, 4.0f);
  for (DerivativeOrder o : {DerivativeOrder{1, 0, 0}, DerivativeOrder{0, 1, 1}, DerivativeOrder{0, 0, 2}}) {
    const Volume dv = gaussian_derivative(v, 1.0, o);
    for (float x : dv.data()) EXPECT_NEAR(x, 0.0f, 1e-6);
  }
  EXPECT_THROW(gaussian_derivative(v, 1.0, {1, 1, 1}), InvalidArgument);
}

TEST(Hessian, QuadraticField) {
  const double s = 1.5;
  const Volume v = field({21, 21, 21}, [](double, double y, double x) { return (x - 10) * (x - 10) + 2 * (y - 10) * (y - 10); });
  const SymMat3Field h = hessian_at_scale(v, s);
  const std::size_t c = v.index(10, 10, 10);
  EXPECT_NEAR(h.xx[c], 2 * s * s, 1e-3);
  EXPECT_NEAR(h.yy[c], 4 * s * s, 1e-3);
  EXPECT_NEAR(h.zz[c], 0, 1e-4);
  EXPECT_NEAR(h.xy[c], 0, 1e-4);
  const Volume flat({8, 8, 8}, 1.0, 1.0f);
  const SymMat3Field z = hessian_at_scale(flat, 1.0);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(frobenius_norm(z.at(i)), 0.0, 1e-6);
}

TEST(Hessian, GaussianLinePeaksAtMatchedScale) {
  const double r = 2.0;
  const Volume v = field({41, 41, 41}, [&](double, double y, double x) {
    return std::exp(-((x - 20) * (x - 20) + (y - 20) * (y - 20)) / (2 * r * r));
  });
  auto response = [&](double s) {
    const auto e = eig3_symmetric(hessian_at_scale(v, s).at(v.index(20, 20, 20)));
    return std::abs(e[2]);
  };
  const double matched = response(r);
  EXPECT_GT(matched, response(2 * r));
  EXPECT_GT(matched, response(0.5 * r));
}

TEST(Eigen3, SimpleCases) {
  const auto id = eig3_symmetric({1, 1, 1, 0, 0, 0});
  for (double l : id) EXPECT_NEAR(l, 1.0, 1e-12);
  const auto d = eig3_symmetric({3, -1, 2, 0, 0, 0});
  EXPECT_NEAR(d[0], -1, 1e-12);
  EXPECT_NEAR(d[1], 2, 1e-12);
  EXPECT_NEAR(d[2], 3, 1e-12);
  const auto z = eig3_symmetric({0, 0, 0, 0, 0, 0});
  for (double l : z) EXPECT_EQ(l, 0.0);
  EXPECT_THROW(eig3_symmetric({std::nan(""), 0, 0, 0, 0, 0}), InvalidArgument);
}

TEST(Eigen3, RandomMatricesMatchOracles) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 500; ++t) {
    const SymMat3 m = random_sym(rng);
    const auto e = eig3_symmetric(m);
    const double scale = std::max({std::abs(e[0]), std::abs(e[1]), std::abs(e[2]), 1e-300});
    EXPECT_LE(std::abs(e[0]), std::abs(e[1]));
    EXPECT_LE(std::abs(e[1]), std::abs(e[2]));
    EXPECT_NEAR((e[0] + e[1] + e[2]) / scale, trace(m) / scale, 1e-6);
    EXPECT_NEAR(e[0] * e[1] * e[2] / std::pow(scale, 3), determinant(m) / std::pow(scale, 3), 1e-6);
    const auto r = oracle::cubic_roots(m);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(e[k] / scale, static_cast<double>(r[k]) / scale, 1e-8);

    Eigen::Matrix3d M;
    M << m.xx, m.xy, m.xz, m.xy, m.yy, m.yz, m.xz, m.yz, m.zz;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(M);
    std::array<double, 3> ev{solver.eigenvalues()[0], solver.eigenvalues()[1], solver.eigenvalues()[2]};
    std::sort(ev.begin(), ev.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(e[k], ev[k], 1e-9 * scale);
    const double norm = frobenius_norm(m);
    for (double l : e) {
      SymMat3 s = m;
      s.xx -= l, s.yy -= l, s.zz -= l;
      EXPECT_LE(std::abs(determinant(s)), 1e-6 * (1 + norm * norm * norm));
    }
  }
}

TEST(Eigen3, EigenvectorSatisfiesDefinition) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const SymMat3 m = random_sym(rng);
    for (double l : eig3_symmetric(m)) {
      const auto v = eigenvector3(m, l);
      const double mv[3] = {m.xx * v[0] + m.xy * v[1] + m.xz * v[2], m.xy * v[0] + m.yy * v[1] + m.yz * v[2],
                            m.xz * v[0] + m.yz * v[1] + m.zz * v[2]};
      EXPECT_NEAR(v[0] * v[0] + v[1] * v[1] + v[2] * v[2], 1.0, 1e-9);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(mv[k], l * v[k], 1e-6 * frobenius_norm(m));
    }
  }
}

TEST(StructureTensor, RampAlongX) {
  const Volume v = field({16, 16, 16}, [](double, double, double x) { return 0.5 * x; });
  const SymMat3Field st = structure_tensor(v, 1.0, 2.0);
  const SymMat3 m = st.at(v.index(8, 8, 8));
  const auto e = eig3_symmetric(m);
  EXPECT_NEAR(e[2], 0.25, 1e-3);
  EXPECT_NEAR(e[0], 0.0, 1e-6);
  EXPECT_NEAR(e[1], 0.0, 1e-6);
  const auto dir = eigenvector3(m, e[2]);  // (x, y, z)
  EXPECT_NEAR(std::abs(dir[0]), 1.0, 1e-6);
  const Volume flat({8, 8, 8}, 1.0, 3.0f);
  const SymMat3Field z = structure_tensor(flat, 1.0, 2.0);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(frobenius_norm(z.at(i)), 0.0, 1e-9);
}

TEST(StructureTensor, PositiveSemidefinite) {
  const Volume v = testutil::random_volume({12, 12, 12}, 31);
  const SymMat3Field st = structure_tensor(v, 0.8, 1.6);
  for (std::size_t i = 0; i < st.size(); ++i) {
    const SymMat3 m = st.at(i);
    for (double l : eig3_symmetric(m)) EXPECT_GE(l, -1e-6 * trace(m));
  }
}

TEST(Features, ChannelLayout) {
  const Volume v = testutil::random_volume({10, 10, 10}, 3);
  const std::array<double, 1> one{1.0};
  const FeatureStack f1 = compute_feature_stack(v, one);
  EXPECT_EQ(f1.channels(), 9u);
  EXPECT_EQ(f1.names[0], "smooth@1");
  const FeatureStack f = compute_feature_stack(v, kDefaultFeatureScales);
  EXPECT_EQ(f.channels(), 36u);
  EXPECT_EQ(std::set<std::string>(f.names.begin(), f.names.end()).size(), 36u);
  EXPECT_THROW(compute_feature_stack(v, std::span<const double>{}), InvalidArgument);
}

TEST(Features, ConstantVolume) {
  const Volume v({10, 10, 10}, 1.0, 0.75f);
  const FeatureStack f = compute_feature_stack(v, kDefaultFeatureScales);
  for (std::size_t c = 0; c < f.channels(); ++c) {
    const bool smooth = f.names[c].rfind("smooth", 0) == 0;
    for (float x : f.channel(c)) EXPECT_NEAR(x, smooth ? 0.75f : 0.0f, 1e-6) << f.names[c];
  }
}

TEST(Features, LogIsTraceOfHessianEigenvalues) {
  const Volume v = testutil::random_volume({12, 12, 12}, 8);
  const FeatureStack f = compute_feature_stack(v, kDefaultFeatureScales);
  for (std::size_t s = 0; s < kDefaultFeatureScales.size(); ++s) {
    const std::size_t base = s * kFeaturesPerScale;
    for (std::size_t i = 0; i < f.voxels(); ++i) {
      EXPECT_NEAR(f.at(base + 2, i), f.at(base + 3, i) + f.at(base + 4, i) + f.at(base + 5, i), 1e-5);
    }
  }
}

TEST(Filters, TranslationEquivariantInInterior) {
  const Volume v = testutil::random_volume({24, 24, 24}, 12);
  Volume shifted(v.dims(), 1.0);
  for (std::int64_t z = 0; z < 24; ++z)
    for (std::int64_t y = 0; y < 24; ++y)
      for (std::int64_t x = 1; x < 24; ++x) shifted.at(z, y, x) = v.at(z, y, x - 1);
  const Volume a = gaussian_derivative(v, 1.0, {0, 1, 1}), b = gaussian_derivative(shifted, 1.0, {0, 1, 1});
  for (std::int64_t z = 6; z < 18; ++z)
    for (std::int64_t y = 6; y < 18; ++y)
      for (std::int64_t x = 6; x < 18; ++x) EXPECT_NEAR(b.at(z, y, x + 1), a.at(z, y, x), 1e-6);
}
