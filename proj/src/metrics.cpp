#include "fiberseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <vector>

namespace fiberseg {

namespace {

void require_same_dims(const LabelVolume& a, const LabelVolume& b) {
  if (a.dims() != b.dims()) {
    throw ShapeMismatch("label volumes differ in dims: " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
}

}  // namespace

ConfusionCounts confusion(const LabelVolume& gt, const LabelVolume& pred) {
  require_same_dims(gt, pred);
  std::uint64_t inter = 0, g = 0, p = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    inter += std::min(gt[i], pred[i]);
    g += gt[i];
    p += pred[i];
  }
  ConfusionCounts c;
  c.tp = inter;
  c.fn = g - inter;
  c.fp = p - inter;
  c.tn = gt.size() - c.tp - c.fn - c.fp;
  return c;
}

double dice(const ConfusionCounts& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

DiceReport make_report(std::string method, std::string volume, const LabelVolume& gt, const LabelVolume& pred) {
  DiceReport r{std::move(method), std::move(volume), confusion(gt, pred), 0.0};
  r.dice = dice(r.counts);
  return r;
}

std::string format_report(const DiceReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", r.dice);
  return "method=" + r.method + " volume=" + r.volume + " dice=" + buf + " tp=" + std::to_string(r.counts.tp) +
         " tn=" + std::to_string(r.counts.tn) + " fp=" + std::to_string(r.counts.fp) + " fn=" + std::to_string(r.counts.fn);
}

void render_error_map(const LabelVolume& gt, const LabelVolume& pred, std::int64_t z, const std::filesystem::path& path) {
  require_same_dims(gt, pred);
  if (z < 0 || z >= gt.dims().nz) throw InvalidArgument("error-map slice " + std::to_string(z) + " out of range");
  const auto ny = gt.dims().ny, nx = gt.dims().nx;
  std::vector<std::uint8_t> pixels;
  pixels.reserve(static_cast<std::size_t>(ny * nx * 3));
  for (std::int64_t y = 0; y < ny; ++y) {
    for (std::int64_t x = 0; x < nx; ++x) {
      const bool g = gt.at(z, y, x) != 0, p = pred.at(z, y, x) != 0;
      const Rgb c = g ? (p ? kTruePositiveColor : kFalseNegativeColor) : (p ? kFalsePositiveColor : kTrueNegativeColor);
      pixels.insert(pixels.end(), {c.r, c.g, c.b});
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "P6\n" << nx << " " << ny << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace fiberseg
