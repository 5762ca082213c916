#include "fiberseg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace fiberseg::ad {

namespace {

std::size_t product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) {
    if (s < 1) throw InvalidArgument("tensor extents must be >= 1");
    n *= s;
  }
  return static_cast<std::size_t>(n);
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + ")";
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(std::vector<std::int64_t> shape_, bool with_grad) : shape(std::move(shape_)) {
  value.assign(product(shape), T(0));
  if (with_grad) enable_grad();
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::int64_t> shape_, std::vector<T> values, bool with_grad)
    : shape(std::move(shape_)), value(std::move(values)) {
  if (value.size() != product(shape)) {
    throw ShapeMismatch("tensor of shape " + shape_string(shape) + " given " + std::to_string(value.size()) + " values");
  }
  if (with_grad) enable_grad();
}

template <typename T>
Spatial Tensor<T>::spatial() const {
  if (shape.size() == 4) return {1, shape[2], shape[3]};
  if (shape.size() == 5) return {shape[2], shape[3], shape[4]};
  throw ShapeMismatch("expected an (N,C,H,W) or (N,C,D,H,W) tensor, got " + shape_string(shape));
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

// ---------------------------------------------------------------------------
// Convolution: chunked im2col + GEMM. A chunk is a run of whole output rows
// (fixed z, y), so column construction is a handful of contiguous copies.

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct ConvGeometry {
  Spatial s;
  int kd, kh, kw;
  std::int64_t taps() const { return static_cast<std::int64_t>(kd) * kh * kw; }
};

// Columns per im2col chunk: keeps the expanded buffer near L2 size.
inline std::int64_t chunk_columns(std::int64_t rows) { return std::clamp<std::int64_t>(262144 / rows, 256, 4096); }

// Row (c, tap) of `col` holds x[c] shifted by the tap offset; `flip` negates
// the offsets (correlation with the mirrored kernel).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::int64_t c_in, std::int64_t line0, std::int64_t line1, T* col,
            bool flip = false) {
  const auto [D, H, W] = g.s;
  const std::int64_t L = (line1 - line0) * W;
  const std::int64_t S = g.s.count();
  const int pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
  const int sign = flip ? -1 : 1;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c_in; ++ci) {
    const T* xc = x + ci * S;
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          T* dst_row = col + row * L;
          const int dx = sign * (kx - pw);
          const std::int64_t x_lo = std::max<std::int64_t>(0, -dx), x_hi = std::min<std::int64_t>(W, W - dx);
          for (std::int64_t line = line0; line < line1; ++line) {
            T* dst = dst_row + (line - line0) * W;
            const std::int64_t sz = line / H + sign * (kz - pd), sy = line % H + sign * (ky - ph);
            if (sz < 0 || sz >= D || sy < 0 || sy >= H || x_lo >= x_hi) {
              std::fill(dst, dst + W, T(0));
              continue;
            }
            const T* src = xc + (sz * H + sy) * W;
            std::fill(dst, dst + x_lo, T(0));
            std::memcpy(dst + x_lo, src + x_lo + dx, static_cast<std::size_t>(x_hi - x_lo) * sizeof(T));
            std::fill(dst + x_hi, dst + W, T(0));
          }
        }
      }
    }
  }
  (void)D;
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::int64_t c_in, std::int64_t line0, std::int64_t line1, T* dx) {
  const auto [D, H, W] = g.s;
  const std::int64_t L = (line1 - line0) * W;
  const std::int64_t S = g.s.count();
  const int pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c_in; ++ci) {
    T* dc = dx + ci * S;
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          const T* src_row = col + row * L;
          const int ddx = kx - pw;
          const std::int64_t x_lo = std::max<std::int64_t>(0, -ddx), x_hi = std::min<std::int64_t>(W, W - ddx);
          for (std::int64_t line = line0; line < line1; ++line) {
            const std::int64_t sz = line / H + kz - pd, sy = line % H + ky - ph;
            if (sz < 0 || sz >= D || sy < 0 || sy >= H) continue;
            const T* src = src_row + (line - line0) * W;
            T* dst = dc + (sz * H + sy) * W + ddx;
            for (std::int64_t xo = x_lo; xo < x_hi; ++xo) dst[xo] += src[xo];
          }
        }
      }
    }
  }
}

// y[c] += sum over taps of row (c, tap) of z shifted by the tap offset; z spans the whole volume.
template <typename T>
void gather_taps(const T* z, const ConvGeometry& g, std::int64_t channels, T* y) {
  const auto [D, H, W] = g.s;
  const std::int64_t S = g.s.count();
  const int pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < channels; ++c) {
    T* yc = y + c * S;
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          const T* zr = z + row * S;
          const int dx = kx - pw;
          const std::int64_t x_lo = std::max<std::int64_t>(0, -dx), x_hi = std::min<std::int64_t>(W, W - dx);
          for (std::int64_t line = 0; line < D * H; ++line) {
            const std::int64_t sz = line / H + kz - pd, sy = line % H + ky - ph;
            if (sz < 0 || sz >= D || sy < 0 || sy >= H) continue;
            const T* src = zr + (sz * H + sy) * W + dx;
            T* dst = yc + line * W;
            for (std::int64_t xo = x_lo; xo < x_hi; ++xo) dst[xo] += src[xo];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Conv<T>::Conv(int spatial_dims, std::int64_t c_in, std::int64_t c_out, int kernel)
    : spatial_dims_(spatial_dims), c_in_(c_in), c_out_(c_out), kernel_(kernel) {
  if (spatial_dims != 2 && spatial_dims != 3) throw InvalidArgument("convolution must be 2D or 3D");
  if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("convolution kernel extent must be odd");
  if (c_in < 1 || c_out < 1) throw InvalidArgument("convolution channel counts must be >= 1");
  std::vector<std::int64_t> wshape{c_out, c_in, kernel, kernel};
  if (spatial_dims == 3) wshape.push_back(kernel);
  weight = Tensor<T>(wshape, true);
  bias = Tensor<T>({c_out}, true);
}

template <typename T>
void Conv<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(weight.size() / static_cast<std::size_t>(c_out_));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& w : weight.value) w = static_cast<T>(dist(rng));
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

// Two lowerings: with c_out >= c_in the input is expanded by im2col and
// multiplied by the weights; with c_out < c_in the weights are applied first
// (one output plane per (c_out, tap)) and the planes are shifted and summed, so
// the expanded buffer scales with the smaller channel count.

template <typename T>
Tensor<T> Conv<T>::forward(const Tensor<T>& x) {
  if (x.rank() != spatial_dims_ + 2) {
    throw ShapeMismatch("conv expects a rank-" + std::to_string(spatial_dims_ + 2) + " input, got " + shape_string(x.shape));
  }
  if (x.channels() != c_in_) {
    throw ShapeMismatch("conv expects " + std::to_string(c_in_) + " input channels, got " + std::to_string(x.channels()));
  }
  input_ = Tensor<T>(x.shape, x.value);
  const Spatial s = x.spatial();
  const ConvGeometry g{s, spatial_dims_ == 3 ? kernel_ : 1, kernel_, kernel_};
  const std::int64_t S = s.count(), taps = g.taps(), K = c_in_ * taps;
  std::vector<std::int64_t> yshape = x.shape;
  yshape[1] = c_out_;
  Tensor<T> y(yshape);
  Eigen::Map<const RowMat<T>> wmat(weight.value.data(), c_out_, K);

  if (c_out_ < c_in_ && taps > 1) {
    // wt[(co, tap), ci] = w[co, ci, tap]
    RowMat<T> wt(c_out_ * taps, c_in_);
    for (std::int64_t co = 0; co < c_out_; ++co) {
      for (std::int64_t ci = 0; ci < c_in_; ++ci) {
        for (std::int64_t t = 0; t < taps; ++t) wt(co * taps + t, ci) = wmat(co, ci * taps + t);
      }
    }
    RowMat<T> z(c_out_ * taps, S);
    for (std::int64_t n = 0; n < x.batch(); ++n) {
      Eigen::Map<const RowMat<T>> xmat(x.value.data() + n * c_in_ * S, c_in_, S);
      z.noalias() = wt * xmat;
      gather_taps(z.data(), g, c_out_, y.value.data() + n * c_out_ * S);
    }
  } else {
    const std::int64_t lines = s.d * s.h;
    const std::int64_t chunk_lines = std::max<std::int64_t>(1, chunk_columns(K) / s.w);
    std::vector<T> col(static_cast<std::size_t>(K * std::min(lines, chunk_lines) * s.w));
    for (std::int64_t n = 0; n < x.batch(); ++n) {
      const T* xn = x.value.data() + n * c_in_ * S;
      T* yn = y.value.data() + n * c_out_ * S;
      for (std::int64_t l0 = 0; l0 < lines; l0 += chunk_lines) {
        const std::int64_t l1 = std::min(lines, l0 + chunk_lines);
        const std::int64_t L = (l1 - l0) * s.w;
        im2col(xn, g, c_in_, l0, l1, col.data());
        Eigen::Map<const RowMat<T>> cmat(col.data(), K, L);
        StridedMap<T> ymat(yn + l0 * s.w, c_out_, L, Eigen::OuterStride<>(S));
        ymat.noalias() = wmat * cmat;
      }
    }
  }
  for (std::int64_t n = 0; n < x.batch(); ++n) {
    T* yn = y.value.data() + n * c_out_ * S;
    for (std::int64_t co = 0; co < c_out_; ++co) {
      const T b = bias.value[co];
      T* row = yn + co * S;
      for (std::int64_t i = 0; i < S; ++i) row[i] += b;
    }
  }
  return y;
}

template <typename T>
Tensor<T> Conv<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  if (dy.batch() != x.batch() || dy.channels() != c_out_ || dy.spatial() != x.spatial()) {
    throw ShapeMismatch("conv backward: gradient shape " + shape_string(dy.shape) + " does not match forward output");
  }
  const Spatial s = x.spatial();
  const ConvGeometry g{s, spatial_dims_ == 3 ? kernel_ : 1, kernel_, kernel_};
  const std::int64_t S = s.count(), taps = g.taps(), K = c_in_ * taps;
  Tensor<T> dx(x.shape);
  Eigen::Map<const RowMat<T>> wmat(weight.value.data(), c_out_, K);
  Eigen::Map<RowMat<T>> dwmat(weight.grad.data(), c_out_, K);

  if (c_out_ < c_in_ && taps > 1) {
    // dx[ci, p] = sum over (co, tap) of w[co, ci, tap] * dy[co, p - off(tap)]
    // dw[co, ci, tap] = sum over p of x[ci, p] * dy[co, p - off(tap)]
    RowMat<T> wf(c_in_, c_out_ * taps);
    for (std::int64_t co = 0; co < c_out_; ++co) {
      for (std::int64_t ci = 0; ci < c_in_; ++ci) {
        for (std::int64_t t = 0; t < taps; ++t) wf(ci, co * taps + t) = wmat(co, ci * taps + t);
      }
    }
    RowMat<T> dycol(c_out_ * taps, S);
    RowMat<T> gw = RowMat<T>::Zero(c_in_, c_out_ * taps);
    for (std::int64_t n = 0; n < x.batch(); ++n) {
      im2col(dy.value.data() + n * c_out_ * S, g, c_out_, 0, s.d * s.h, dycol.data(), true);
      Eigen::Map<const RowMat<T>> xmat(x.value.data() + n * c_in_ * S, c_in_, S);
      Eigen::Map<RowMat<T>> dxmat(dx.value.data() + n * c_in_ * S, c_in_, S);
      dxmat.noalias() = wf * dycol;
      gw.noalias() += xmat * dycol.transpose();
    }
    for (std::int64_t co = 0; co < c_out_; ++co) {
      for (std::int64_t ci = 0; ci < c_in_; ++ci) {
        for (std::int64_t t = 0; t < taps; ++t) dwmat(co, ci * taps + t) += gw(ci, co * taps + t);
      }
    }
  } else {
    const std::int64_t lines = s.d * s.h;
    const std::int64_t chunk_lines = std::max<std::int64_t>(1, chunk_columns(K) / s.w);
    const std::size_t chunk = static_cast<std::size_t>(K * std::min(lines, chunk_lines) * s.w);
    std::vector<T> col(chunk), dcol(chunk);
    for (std::int64_t n = 0; n < x.batch(); ++n) {
      const T* xn = x.value.data() + n * c_in_ * S;
      const T* dyn = dy.value.data() + n * c_out_ * S;
      T* dxn = dx.value.data() + n * c_in_ * S;
      for (std::int64_t l0 = 0; l0 < lines; l0 += chunk_lines) {
        const std::int64_t l1 = std::min(lines, l0 + chunk_lines);
        const std::int64_t L = (l1 - l0) * s.w;
        im2col(xn, g, c_in_, l0, l1, col.data());
        Eigen::Map<const RowMat<T>> cmat(col.data(), K, L);
        ConstStridedMap<T> dymat(dyn + l0 * s.w, c_out_, L, Eigen::OuterStride<>(S));
        dwmat.noalias() += dymat * cmat.transpose();
        Eigen::Map<RowMat<T>> dcmat(dcol.data(), K, L);
        dcmat.noalias() = wmat.transpose() * dymat;
        col2im_add(dcol.data(), g, c_in_, l0, l1, dxn);
      }
    }
  }
  for (std::int64_t n = 0; n < x.batch(); ++n) {
    const T* dyn = dy.value.data() + n * c_out_ * S;
    for (std::int64_t co = 0; co < c_out_; ++co) {
      const T* row = dyn + co * S;
      T acc = 0;
      for (std::int64_t i = 0; i < S; ++i) acc += row[i];
      bias.grad[co] += acc;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(std::int64_t channels, double momentum_, double epsilon_)
    : gamma({channels}, true), beta({channels}, true), momentum(momentum_), epsilon(epsilon_) {
  if (!(epsilon > 0.0)) throw InvalidArgument("batch-norm epsilon must be positive");
  std::fill(gamma.value.begin(), gamma.value.end(), T(1));
  running_mean.assign(channels, T(0));
  running_var.assign(channels, T(1));
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::int64_t C = channels();
  if (x.channels() != C) {
    throw ShapeMismatch("batch-norm over " + std::to_string(C) + " channels given " + std::to_string(x.channels()));
  }
  const std::int64_t N = x.batch(), S = x.spatial().count();
  const double count = static_cast<double>(N * S);
  last_mode_ = mode;
  shape_ = x.shape;
  x_hat_.resize(x.size());
  inv_std_.resize(C);
  Tensor<T> y(x.shape);
  for (std::int64_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x.value.data() + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) sum += p[i];
      }
      mean = sum / count;
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x.value.data() + (n * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / count;
      const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
      running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1.0 - momentum) * mean);
      running_var[c] = static_cast<T>(momentum * running_var[c] + (1.0 - momentum) * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + epsilon);
    inv_std_[c] = static_cast<T>(inv_std);
    const double gm = gamma.value[c], bt = beta.value[c];
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        const double xh = (x.value[off + i] - mean) * inv_std;
        x_hat_[off + i] = static_cast<T>(xh);
        y.value[off + i] = static_cast<T>(gm * xh + bt);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& dy) {
  if (dy.shape != shape_) throw ShapeMismatch("batch-norm backward: gradient shape differs from forward input");
  const std::int64_t C = channels(), N = dy.batch(), S = dy.spatial().count();
  const double count = static_cast<double>(N * S);
  Tensor<T> dx(dy.shape);
  for (std::int64_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        sum_dy += dy.value[off + i];
        sum_dy_xh += static_cast<double>(dy.value[off + i]) * x_hat_[off + i];
      }
    }
    gamma.grad[c] += static_cast<T>(sum_dy_xh);
    beta.grad[c] += static_cast<T>(sum_dy);
    const double scale = static_cast<double>(gamma.value[c]) * inv_std_[c];
    const double mean_dy = sum_dy / count, mean_dy_xh = sum_dy_xh / count;
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        const double g = last_mode_ == Mode::kTrain ? dy.value[off + i] - mean_dy - x_hat_[off + i] * mean_dy_xh
                                                    : static_cast<double>(dy.value[off + i]);
        dx.value[off + i] = static_cast<T>(scale * g);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x) {
  shape_ = x.shape;
  active_.resize(x.size());
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    active_[i] = x.value[i] > T(0);
    y.value[i] = active_[i] ? x.value[i] : T(0);
  }
  return y;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& dy) {
  if (dy.shape != shape_) throw ShapeMismatch("relu backward: gradient shape differs from forward input");
  Tensor<T> dx(dy.shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.value[i] = active_[i] ? dy.value[i] : T(0);
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
ResidualBlock<T>::ResidualBlock(int spatial_dims, std::int64_t in_width, std::int64_t out_width)
    : conv1(spatial_dims, in_width, out_width, 3),
      conv2(spatial_dims, out_width, out_width, 3),
      bn(out_width),
      has_projection_(in_width != out_width) {
  if (has_projection_) projection = Conv<T>(spatial_dims, in_width, out_width, 1);
}

template <typename T>
void ResidualBlock<T>::init(Rng& rng) {
  conv1.init(rng);
  conv2.init(rng);
  if (has_projection_) projection.init(rng);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.channels() != in_width()) {
    throw ShapeMismatch("residual block expects " + std::to_string(in_width()) + " channels, got " +
                        std::to_string(x.channels()));
  }
  Tensor<T> branch = bn.forward(conv2.forward(inner_relu_.forward(conv1.forward(x))), mode);
  if (has_projection_) {
    const Tensor<T> skip = projection.forward(x);
    for (std::size_t i = 0; i < branch.size(); ++i) branch.value[i] += skip.value[i];
  } else {
    for (std::size_t i = 0; i < branch.size(); ++i) branch.value[i] += x.value[i];
  }
  return out_relu_.forward(branch);
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> dsum = out_relu_.backward(dy);
  Tensor<T> dx = conv1.backward(inner_relu_.backward(conv2.backward(bn.backward(dsum))));
  if (has_projection_) {
    const Tensor<T> dskip = projection.backward(dsum);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.value[i] += dskip.value[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx.value[i] += dsum.value[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels, Tensor<T>* dlogits) {
  if (logits.channels() != 2) throw ShapeMismatch("cross-entropy expects 2 logit channels");
  const std::int64_t N = logits.batch(), S = logits.spatial().count();
  if (static_cast<std::int64_t>(labels.size()) != N * S) {
    throw ShapeMismatch("cross-entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N * S) +
                        " voxels");
  }
  if (dlogits) *dlogits = Tensor<T>(logits.shape);
  const double inv_count = 1.0 / static_cast<double>(N * S);
  double loss = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    const T* l0 = logits.value.data() + n * 2 * S;
    const T* l1 = l0 + S;
    for (std::int64_t i = 0; i < S; ++i) {
      const std::uint8_t y = labels[n * S + i];
      if (y > 1) throw InvalidArgument("cross-entropy label " + std::to_string(y) + " is not 0 or 1");
      const double a = l0[i], b = l1[i];
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      loss += lse - (y ? b : a);
      if (dlogits) {
        const double p1 = std::exp(b - lse), p0 = std::exp(a - lse);
        dlogits->value[n * 2 * S + i] = static_cast<T>((p0 - (y == 0)) * inv_count);
        dlogits->value[n * 2 * S + S + i] = static_cast<T>((p1 - (y == 1)) * inv_count);
      }
    }
  }
  return loss * inv_count;
}

template <typename T>
std::vector<T> fiber_probability(const Tensor<T>& logits) {
  if (logits.channels() != 2) throw ShapeMismatch("fiber probability expects 2 logit channels");
  const std::int64_t N = logits.batch(), S = logits.spatial().count();
  std::vector<T> p(static_cast<std::size_t>(N * S));
  for (std::int64_t n = 0; n < N; ++n) {
    const T* l0 = logits.value.data() + n * 2 * S;
    const T* l1 = l0 + S;
    for (std::int64_t i = 0; i < S; ++i) {
      p[n * S + i] = static_cast<T>(1.0 / (1.0 + std::exp(static_cast<double>(l0[i]) - l1[i])));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = *params[i];
    if (p.grad.size() != p.value.size()) throw ShapeMismatch("adam: parameter without a matching gradient");
    for (T g : p.grad) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw DegenerateInput("adam: non-finite gradient in parameter " + std::to_string(i) + "; step rejected");
      }
    }
  }
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeMismatch("adam: state tracks a different parameter list");
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ShapeMismatch("adam: moment shape differs from parameter");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double m_hat = mk / bc1, v_hat = vk / bc2;
      p.value[k] = static_cast<T>(p.value[k] - c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<double()>& loss, const std::function<void()>& analytic,
                           const std::vector<std::pair<std::string, Tensor<double>*>>& tensors, double h) {
  for (const auto& [name, t] : tensors) {
    if (!t->has_grad()) t->enable_grad();
    t->zero_grad();
  }
  analytic();
  GradCheckResult result;
  for (const auto& [name, t] : tensors) {
    const std::vector<double> a = t->grad;
    std::vector<double> num(t->size());
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double orig = t->value[i];
      t->value[i] = orig + h;
      const double lp = loss();
      t->value[i] = orig - h;
      const double lm = loss();
      t->value[i] = orig;
      num[i] = (lp - lm) / (2.0 * h);
    }
    double scale = 0.0;
    for (double n : num) scale = std::max(scale, std::abs(n));
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double denom = std::max({std::abs(a[i]), std::abs(num[i]), 1e-3 * scale, 1e-12});
      const double err = std::abs(a[i] - num[i]) / denom;
      if (result.worst.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

#define FIBERSEG_INSTANTIATE(T)                                                                                   \
  template struct Tensor<T>;                                                                                      \
  template class Conv<T>;                                                                                         \
  template class BatchNorm<T>;                                                                                    \
  template class Relu<T>;                                                                                         \
  template class ResidualBlock<T>;                                                                                \
  template double softmax_cross_entropy<T>(const Tensor<T>&, std::span<const std::uint8_t>, Tensor<T>*);          \
  template std::vector<T> fiber_probability<T>(const Tensor<T>&);                                                 \
  template void adam_step<T>(std::span<Tensor<T>* const>, AdamState<T>&);

FIBERSEG_INSTANTIATE(float)
FIBERSEG_INSTANTIATE(double)

#undef FIBERSEG_INSTANTIATE

}  // namespace fiberseg::ad
