#pragma once

// Reverse-mode differentiation over dense tensors, restricted to the operator
// set of residual fully convolutional networks: same-padded stride-1
// convolution, batch normalization, ReLU, residual blocks, two-class softmax
// cross-entropy and Adam.
//
// Networks are fixed feed-forward chains, so the tape is implicit: every layer
// caches what its backward pass needs during forward, and backward runs the
// layers in reverse order. Layers are templated on the scalar type; float is
// the production type and double backs the finite-difference checks.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fiberseg/error.hpp"
#include "fiberseg/rng.hpp"

namespace fiberseg::ad {

/// Spatial extent of an (N, C, [D,] H, W) tensor; d == 1 for 2D tensors.
struct Spatial {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t count() const { return d * h * w; }
  bool operator==(const Spatial&) const = default;
};

template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;  // (N, C, H, W) or (N, C, D, H, W)
  std::vector<T> value;
  std::vector<T> grad;  // empty for tensors that do not accumulate gradients

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape_, bool with_grad = false);
  Tensor(std::vector<std::int64_t> shape_, std::vector<T> values, bool with_grad = false);

  std::size_t size() const { return value.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t batch() const { return shape.at(0); }
  std::int64_t channels() const { return shape.at(1); }
  Spatial spatial() const;
  bool has_grad() const { return !grad.empty(); }
  void enable_grad() { grad.assign(value.size(), T(0)); }
  void zero_grad();
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.value.assign(t.value.begin(), t.value.end());
  out.grad.assign(t.grad.begin(), t.grad.end());
  return out;
}

template <typename T>
class Conv {
 public:
  Conv() = default;
  /// `spatial_dims` is 2 or 3; `kernel` is the per-axis extent (3 for the network, 1 for projections).
  Conv(int spatial_dims, std::int64_t c_in, std::int64_t c_out, int kernel);

  Tensor<T> forward(const Tensor<T>& x);
  /// Returns dL/dx and accumulates dL/dweight and dL/dbias.
  Tensor<T> backward(const Tensor<T>& dy);

  /// He-normal fan-in weights, zero bias.
  void init(Rng& rng);

  int spatial_dims() const { return spatial_dims_; }
  int kernel() const { return kernel_; }
  std::int64_t in_channels() const { return c_in_; }
  std::int64_t out_channels() const { return c_out_; }

  Tensor<T> weight;  // (C_out, C_in, k, k[, k])
  Tensor<T> bias;    // (C_out)

 private:
  int spatial_dims_ = 3;
  std::int64_t c_in_ = 0;
  std::int64_t c_out_ = 0;
  int kernel_ = 3;
  Tensor<T> input_;
};

enum class Mode { kTrain, kEval };

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::int64_t channels, double momentum = 0.9, double epsilon = 1e-5);

  /// Train mode normalizes with batch statistics and updates the running ones:
  /// running = momentum * running + (1 - momentum) * batch (unbiased variance).
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  /// Full batch-statistics gradient after a train-mode forward; affine gradient after eval-mode.
  Tensor<T> backward(const Tensor<T>& dy);

  std::int64_t channels() const { return static_cast<std::int64_t>(gamma.size()); }

  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

 private:
  Mode last_mode_ = Mode::kEval;
  std::vector<std::int64_t> shape_;
  std::vector<T> x_hat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  /// Passes gradient where the input was > 0.
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  std::vector<std::uint8_t> active_;
  std::vector<std::int64_t> shape_;
};

/// y = ReLU(BN(conv2(ReLU(conv1(x)))) + skip(x)); skip is identity when widths
/// agree and a learned 1x1(x1) projection otherwise.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int spatial_dims, std::int64_t in_width, std::int64_t out_width);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void init(Rng& rng);

  bool has_projection() const { return has_projection_; }
  std::int64_t in_width() const { return conv1.in_channels(); }
  std::int64_t out_width() const { return conv1.out_channels(); }

  Conv<T> conv1;
  Conv<T> conv2;
  BatchNorm<T> bn;
  Conv<T> projection;

 private:
  bool has_projection_ = false;
  Relu<T> inner_relu_;
  Relu<T> out_relu_;
};

/// Mean negative log-likelihood of a per-voxel two-class softmax. `logits` is
/// (N, 2, spatial...), channel 1 is fiber; `labels` holds one 0/1 value per
/// (n, voxel). Fills `dlogits` with (softmax - onehot) / count when non-null.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels, Tensor<T>* dlogits);

/// Softmax probability of channel 1 for every (n, voxel) of a (N, 2, ...) tensor.
template <typename T>
std::vector<T> fiber_probability(const Tensor<T>& logits);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update of every parameter from its .grad. A
/// non-finite gradient rejects the whole step, leaving parameters and state untouched.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<index>]"
};

/// Compares analytic gradients against central finite differences.
/// `loss` runs a forward pass and returns the scalar objective; `analytic` runs
/// forward and backward and leaves dL/dt in t.grad for every checked tensor t.
/// Relative error per element is |a - n| / max(|a|, |n|, 1e-3 * max|n| over the tensor, 1e-12).
GradCheckResult grad_check(const std::function<double()>& loss, const std::function<void()>& analytic,
                           const std::vector<std::pair<std::string, Tensor<double>*>>& tensors, double h = 1e-3);

}  // namespace fiberseg::ad
