#pragma once

// Finite-difference harness for single layers: L = <r, f(x)> with fixed random r.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fiberseg/autodiff.hpp"

namespace gradcheck {

using namespace fiberseg::ad;

constexpr double kTol = 1e-4;
constexpr double kStep = 1e-5;

inline Tensor<double> random_tensor(std::vector<std::int64_t> shape, std::uint64_t seed, double away_from_zero = 0.0) {
  Tensor<double> t(std::move(shape), true);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.value) {
    double x = u(rng);
    if (std::abs(x) < away_from_zero) x += x < 0 ? -away_from_zero : away_from_zero;
    v = x;
  }
  return t;
}

inline std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> w(n);
  for (auto& x : w) x = g(rng);
  return w;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// L = <r, f(x)>; checks dL/dx and any extra parameter tensors.
template <typename Fwd, typename Bwd>
GradCheckResult check_layer(Tensor<double>& x, Fwd fwd, Bwd bwd, std::vector<std::pair<std::string, Tensor<double>*>> params,
                            std::uint64_t seed) {
  std::vector<double> r;
  auto loss = [&] {
    Tensor<double> y = fwd(x);
    if (r.empty()) r = random_weights(y.size(), seed);
    return dot(r, y.value);
  };
  loss();
  auto analytic = [&] {
    Tensor<double> y = fwd(x);
    Tensor<double> dy(y.shape);
    dy.value = r;
    Tensor<double> dx = bwd(dy);
    x.grad = dx.value;
  };
  params.insert(params.begin(), {"x", &x});
  return grad_check(loss, analytic, params, kStep);
}

}  // namespace gradcheck
