#include "fiberseg/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <span>

namespace fiberseg {

Dims default_patch_shape(Resolution res, int dimensionality) {
  const std::int64_t n = res == Resolution::kMR ? (dimensionality == 2 ? 64 : 32) : (dimensionality == 2 ? 32 : 16);
  if (dimensionality == 2) return {1, n, n};
  if (dimensionality == 3) return {n, n, n};
  throw InvalidArgument("dimensionality must be 2 or 3");
}

void TrainConfig::validate() const {
  if (iterations < 1) throw InvalidArgument("iterations must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive");
  if (patch_shape.nz < 1 || patch_shape.ny < 1 || patch_shape.nx < 1) throw InvalidArgument("patch shape must be >= 1");
  if (!(fiber_biased_sampling_prob >= 0.0 && fiber_biased_sampling_prob <= 1.0)) {
    throw InvalidArgument("fiber_biased_sampling_prob must lie in [0, 1]");
  }
  if (log_every < 1) throw InvalidArgument("log_every must be >= 1");
}

std::vector<std::string> preset_names() {
  return {"mr2d-shallow", "mr2d-deep", "mr3d-shallow", "mr3d-deep",
          "lr2d-shallow", "lr2d-deep", "lr3d-shallow", "lr3d-deep"};
}

Preset preset(const std::string& name) {
  // <res><dim>d-<variant>
  if (name.size() < 6 || name[3] != 'd' || name[4] != '-') throw InvalidArgument("unknown preset '" + name + "'");
  const std::string res = name.substr(0, 2);
  const char dim = name[2];
  if ((res != "mr" && res != "lr") || (dim != '2' && dim != '3')) throw InvalidArgument("unknown preset '" + name + "'");
  Variant variant;
  try {
    variant = parse_variant(name.substr(5));
  } catch (const InvalidArgument&) {
    throw InvalidArgument("unknown preset '" + name + "'");
  }
  const int d = dim - '0';
  Preset p;
  p.name = name;
  p.model = ModelConfig::standard(d, variant);
  p.train.iterations = kPresetIterations;
  p.train.patch_shape = default_patch_shape(res == "mr" ? Resolution::kMR : Resolution::kLR, d);
  return p;
}

PatchSampler::PatchSampler(const Volume& gray, const LabelVolume& labels, Dims patch_shape, double fiber_prob)
    : gray_(&gray), labels_(&labels), shape_(patch_shape), fiber_prob_(fiber_prob) {
  if (gray.dims() != labels.dims()) {
    throw ShapeMismatch("gray " + to_string(gray.dims()) + " and labels " + to_string(labels.dims()) + " differ");
  }
  if (!patch_fits(gray.dims(), PatchRef{{0, 0, 0}, patch_shape})) {
    throw InvalidArgument("patch " + to_string(patch_shape) + " larger than volume " + to_string(gray.dims()));
  }
  const auto lab = labels.data();
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab[i]) fiber_voxels_.push_back(static_cast<std::uint32_t>(i));
  }
}

PatchRef PatchSampler::draw(Rng& rng) const {
  const Dims& d = gray_->dims();
  const Index3 hi{d.nz - shape_.nz, d.ny - shape_.ny, d.nx - shape_.nx};
  const bool biased = uniform01(rng) < fiber_prob_;
  Index3 o;
  if (biased && !fiber_voxels_.empty()) {
    const auto i = static_cast<std::int64_t>(
        fiber_voxels_[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(fiber_voxels_.size()) - 1))]);
    const std::int64_t vz = i / (d.ny * d.nx), vy = (i / d.nx) % d.ny, vx = i % d.nx;
    o = {std::clamp(vz - shape_.nz / 2, std::int64_t{0}, hi.z), std::clamp(vy - shape_.ny / 2, std::int64_t{0}, hi.y),
         std::clamp(vx - shape_.nx / 2, std::int64_t{0}, hi.x)};
  } else {
    o = {uniform_int(rng, 0, hi.z), uniform_int(rng, 0, hi.y), uniform_int(rng, 0, hi.x)};
  }
  return {o, shape_};
}

Sample PatchSampler::sample(Rng& rng) const {
  Sample s;
  s.ref = draw(rng);
  s.gray = extract_patch(*gray_, s.ref);
  s.labels = extract_patch(*labels_, s.ref);
  return s;
}

std::vector<Sample> sample_batch(const Volume& gray, const LabelVolume& labels, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  PatchSampler sampler(gray, labels, cfg.patch_shape, cfg.fiber_biased_sampling_prob);
  std::vector<Sample> batch;
  for (std::int64_t i = 0; i < cfg.batch_size; ++i) batch.push_back(sampler.sample(rng));
  return batch;
}

Transform sample_transform(const Dims& shape, Rng& rng) {
  Transform t;
  for (auto& f : t.flip) f = uniform01(rng) < 0.5;
  t.plane = shape.nz == 1 ? 0 : static_cast<int>(uniform_int(rng, 0, 2));
  t.quarter_turns = static_cast<int>(uniform_int(rng, 0, 3));
  return t;
}

Transform augment(Volume& gray, LabelVolume& labels, Rng& rng) {
  const Dims d = gray.dims();
  if (d != labels.dims()) throw ShapeMismatch("gray and label patches differ in shape");
  const bool ok = d.nz == 1 ? d.ny == d.nx : (d.nz == d.ny && d.ny == d.nx);
  if (!ok) throw InvalidArgument("rotation augmentation needs square or cubic patches, got " + to_string(d));
  const Transform t = sample_transform(d, rng);
  gray = apply_transform(gray, t);
  labels = apply_transform(labels, t);
  return t;
}

std::string format_log_line(const TrainLogEntry& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "iter=%lld loss=%.6f secs=%.3f", static_cast<long long>(e.iteration), e.loss,
                e.seconds);
  return buf;
}

TrainRecord train_loop(const Volume& gray, const LabelVolume& labels, Model& model, const TrainConfig& cfg,
                       const LogCallback& on_log) {
  cfg.validate();
  const int dim = model.config().dimensionality;
  if (dim == 2 && cfg.patch_shape.nz != 1) {
    throw ShapeMismatch("2D model needs patches with nz = 1, got " + to_string(cfg.patch_shape));
  }
  const PatchSampler sampler(gray, labels, cfg.patch_shape, cfg.fiber_biased_sampling_prob);

  std::vector<std::int64_t> shape{cfg.batch_size, 1};
  if (dim == 3) shape.push_back(cfg.patch_shape.nz);
  shape.push_back(cfg.patch_shape.ny);
  shape.push_back(cfg.patch_shape.nx);
  const std::size_t per_patch = cfg.patch_shape.count();

  auto named = model.parameters();
  std::vector<ad::Tensor<float>*> params;
  for (auto& [name, t] : named) {
    if (!t->has_grad()) t->enable_grad();
    params.push_back(t);
  }
  ad::AdamState<float> adam;
  adam.config.lr = cfg.lr;

  TrainRecord record;
  const auto start = std::chrono::steady_clock::now();
  ad::Tensor<float> x(shape);
  std::vector<std::uint8_t> y(x.size());
  ad::Tensor<float> dlogits;
  for (std::int64_t it = 1; it <= cfg.iterations; ++it) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(it)));
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      Sample s = sampler.sample(rng);
      if (cfg.augment) augment(s.gray, s.labels, rng);
      std::copy(s.gray.data().begin(), s.gray.data().end(), x.value.begin() + static_cast<std::ptrdiff_t>(b * per_patch));
      std::copy(s.labels.data().begin(), s.labels.data().end(), y.begin() + static_cast<std::ptrdiff_t>(b * per_patch));
    }
    model.zero_grad();
    const ad::Tensor<float> logits = model.forward(x, ad::Mode::kTrain);
    const double loss = ad::softmax_cross_entropy(logits, std::span<const std::uint8_t>(y), &dlogits);
    if (!std::isfinite(loss)) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "non-finite loss at iteration %lld (lr=%g)", static_cast<long long>(it), cfg.lr);
      throw Error(buf);
    }
    model.backward(dlogits);
    try {
      ad::adam_step(std::span<ad::Tensor<float>* const>(params), adam);
    } catch (const DegenerateInput& e) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "non-finite gradient at iteration %lld (lr=%g): ", static_cast<long long>(it), cfg.lr);
      throw Error(buf + std::string(e.what()));
    }
    record.losses.push_back(loss);
    if (it == 1 || it % cfg.log_every == 0 || it == cfg.iterations) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      record.log.push_back({it, loss, secs});
      if (on_log) on_log(record.log.back());
    }
  }
  record.optimizer_steps = adam.t;
  return record;
}

}  // namespace fiberseg
