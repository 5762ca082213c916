#include "fiberseg/infer.hpp"

#include <algorithm>

namespace fiberseg {

namespace {

void threshold(Prediction& p) {
  p.seg = LabelVolume(p.prob.dims(), p.prob.voxel_size_um());
  for (std::size_t i = 0; i < p.prob.size(); ++i) p.seg[i] = p.prob[i] >= 0.5f ? 1 : 0;
}

}  // namespace

Prediction predict_2d(Model& model, const Volume& v) {
  if (model.config().dimensionality != 2) throw ShapeMismatch("predict_2d needs a 2D model");
  const Dims d = v.dims();
  Prediction out;
  out.prob = Volume(d, v.voxel_size_um());
  const std::size_t plane = static_cast<std::size_t>(d.ny * d.nx);
  ad::Tensor<float> x({1, 1, d.ny, d.nx});
  for (std::int64_t z = 0; z < d.nz; ++z) {
    const auto src = v.data().subspan(static_cast<std::size_t>(z) * plane, plane);
    std::copy(src.begin(), src.end(), x.value.begin());
    const auto p = ad::fiber_probability(model.forward(x, ad::Mode::kEval));
    std::copy(p.begin(), p.end(), out.prob.data().begin() + static_cast<std::ptrdiff_t>(z * plane));
  }
  threshold(out);
  return out;
}

std::vector<std::int64_t> tile_origins(std::int64_t n, std::int64_t patch, std::int64_t stride) {
  if (stride < 1) throw InvalidArgument("stride must be >= 1");
  if (patch < 1 || patch > n) {
    throw InvalidArgument("patch extent " + std::to_string(patch) + " does not fit axis of " + std::to_string(n));
  }
  if (stride > patch) throw InvalidArgument("stride larger than patch leaves gaps");
  std::vector<std::int64_t> o;
  for (std::int64_t s = 0; s < n - patch; s += stride) o.push_back(s);
  o.push_back(n - patch);
  return o;
}

Dims default_stride(const Dims& patch) {
  return {std::max<std::int64_t>(1, patch.nz / 2), std::max<std::int64_t>(1, patch.ny / 2),
          std::max<std::int64_t>(1, patch.nx / 2)};
}

Prediction predict_3d(Model& model, const Volume& v, const Dims& patch, std::optional<Dims> stride) {
  if (model.config().dimensionality != 3) throw ShapeMismatch("predict_3d needs a 3D model");
  const Dims d = v.dims();
  const Dims st = stride.value_or(default_stride(patch));
  const auto oz = tile_origins(d.nz, patch.nz, st.nz);
  const auto oy = tile_origins(d.ny, patch.ny, st.ny);
  const auto ox = tile_origins(d.nx, patch.nx, st.nx);

  std::vector<double> sum(d.count(), 0.0);
  Prediction out;
  out.coverage = Grid<std::uint32_t>(d, v.voxel_size_um());
  ad::Tensor<float> x({1, 1, patch.nz, patch.ny, patch.nx});
  for (auto z0 : oz) {
    for (auto y0 : oy) {
      for (auto x0 : ox) {
        const Volume p = extract_patch(v, PatchRef{{z0, y0, x0}, patch});
        std::copy(p.data().begin(), p.data().end(), x.value.begin());
        const auto prob = ad::fiber_probability(model.forward(x, ad::Mode::kEval));
        std::size_t k = 0;
        for (std::int64_t z = 0; z < patch.nz; ++z) {
          for (std::int64_t y = 0; y < patch.ny; ++y) {
            const std::size_t row = out.coverage.index(z0 + z, y0 + y, x0);
            for (std::int64_t xx = 0; xx < patch.nx; ++xx, ++k) {
              sum[row + xx] += prob[k];
              out.coverage[row + xx] += 1;
            }
          }
        }
      }
    }
  }
  out.prob = Volume(d, v.voxel_size_um());
  for (std::size_t i = 0; i < sum.size(); ++i) out.prob[i] = static_cast<float>(sum[i] / out.coverage[i]);
  threshold(out);
  return out;
}

Prediction normalize_then_predict(Model& model, const Volume& raw, const InferOptions& opts) {
  const Volume v = normalize(raw);
  if (model.config().dimensionality == 2) return predict_2d(model, v);
  const Dims& d = v.dims();
  const Dims patch{std::min(opts.patch.nz, d.nz), std::min(opts.patch.ny, d.ny), std::min(opts.patch.nx, d.nx)};
  std::optional<Dims> stride = opts.stride;
  if (stride) {
    stride = Dims{std::min(stride->nz, patch.nz), std::min(stride->ny, patch.ny), std::min(stride->nx, patch.nx)};
  }
  return predict_3d(model, v, patch, stride);
}

}  // namespace fiberseg
