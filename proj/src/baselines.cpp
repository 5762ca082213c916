#include "fiberseg/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "fiberseg/filters.hpp"
#include "fiberseg/metrics.hpp"

namespace fiberseg {

int ThresholdHistogram::bin_of(float v) const {
  const int n = bins();
  int k = static_cast<int>(std::floor((v - min) / width));
  k = std::clamp(k, 0, n - 1);
  while (k + 1 < n && v >= edge(k + 1)) ++k;
  while (k > 0 && v < edge(k)) --k;
  return k;
}

ThresholdHistogram make_histogram(const Volume& v, int bins) {
  if (bins < 2) throw InvalidArgument("histogram needs at least 2 bins");
  const auto [lo, hi] = std::ranges::minmax_element(v.data());
  if (!(*hi > *lo)) throw DegenerateInput("cannot threshold a constant volume");
  ThresholdHistogram h;
  h.min = *lo;
  h.max = *hi;
  h.width = (h.max - h.min) / bins;
  h.counts.assign(bins, 0);
  for (float f : v.data()) ++h.counts[h.bin_of(f)];
  return h;
}

LabelVolume binarize(const Volume& v, double threshold) {
  LabelVolume out(v.dims(), v.voxel_size_um());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= threshold ? 1 : 0;
  return out;
}

ThresholdChoice otsu_threshold(const Volume& v, int bins) {
  const ThresholdHistogram h = make_histogram(v, bins);
  std::uint64_t total_n = 0;
  unsigned __int128 total_s = 0;
  for (int i = 0; i < bins; ++i) {
    total_n += h.counts[i];
    total_s += static_cast<unsigned __int128>(h.counts[i]) * i;
  }
  ThresholdChoice best{1, h.edge(1), -1.0};
  std::uint64_t n0 = 0;
  unsigned __int128 s0 = 0;
  for (int k = 1; k < bins; ++k) {
    n0 += h.counts[k - 1];
    s0 += static_cast<unsigned __int128>(h.counts[k - 1]) * (k - 1);
    const std::uint64_t n1 = total_n - n0;
    const unsigned __int128 s1 = total_s - s0;
    double score = 0.0;
    if (n0 > 0 && n1 > 0) {
      // n0 n1 (mu0 - mu1)^2 * N^2 / (n0 n1)^2 ... reduced to (s0 n1 - s1 n0)^2 / (n0 n1)
      const __int128 a = static_cast<__int128>(s0 * n1) - static_cast<__int128>(s1 * n0);
      const long double al = static_cast<long double>(a);
      score = static_cast<double>(al * al / (static_cast<long double>(n0) * static_cast<long double>(n1)));
    }
    if (score > best.score) best = {k, h.edge(k), score};
  }
  return best;
}

ThresholdChoice best_dice_threshold(const Volume& v, const LabelVolume& gt, int bins) {
  if (v.dims() != gt.dims()) {
    throw ShapeMismatch("gray and label dims differ: " + to_string(v.dims()) + " vs " + to_string(gt.dims()));
  }
  const ThresholdHistogram h = make_histogram(v, bins);
  std::vector<std::uint64_t> fiber(bins, 0);
  std::uint64_t gt_total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (gt[i]) {
      ++fiber[h.bin_of(v[i])];
      ++gt_total;
    }
  }
  ThresholdChoice best{0, h.edge(0), -1.0};
  std::uint64_t pred_pos = 0, tp = 0;
  std::vector<double> dice_at(bins);
  for (int k = bins - 1; k >= 0; --k) {
    pred_pos += h.counts[k];
    tp += fiber[k];
    ConfusionCounts c;
    c.tp = tp;
    c.fp = pred_pos - tp;
    c.fn = gt_total - tp;
    c.tn = v.size() - c.tp - c.fp - c.fn;
    dice_at[k] = dice(c);
  }
  for (int k = 0; k < bins; ++k) {
    if (dice_at[k] > best.score) best = {k, h.edge(k), dice_at[k]};
  }
  return best;
}

void FrangiParams::validate() const {
  if (scales_vox.empty()) throw InvalidArgument("Frangi needs at least one scale");
  for (double s : scales_vox) {
    if (!(s > 0.0)) throw InvalidArgument("Frangi scales must be positive");
  }
  if (!(alpha > 0.0) || !(beta > 0.0)) throw InvalidArgument("Frangi alpha and beta must be positive");
  if (c && !(*c > 0.0)) throw InvalidArgument("Frangi c must be positive");
}

FrangiParams frangi_defaults_for_pitch(double voxel_size_um, double fiber_diameter_um) {
  FrangiParams p;
  const double radius_vox = fiber_diameter_um / 2.0 / voxel_size_um;
  if (radius_vox < 1.2) p.scales_vox = {0.6, 0.8, 1.0};
  return p;
}

Volume frangi_vesselness(const Volume& v, const FrangiParams& params) {
  params.validate();
  const std::size_t n = v.size();
  std::vector<float> out(n, 0.0f);
  std::vector<std::array<double, 3>> ev(n);
  const double two_a2 = 2.0 * params.alpha * params.alpha;
  const double two_b2 = 2.0 * params.beta * params.beta;
  double max_abs = 0.0;
  for (float x : v.data()) max_abs = std::max(max_abs, static_cast<double>(std::abs(x)));
  // Hessian norms below this are float round-off of a flat field
  const double flat = 1e-5 * max_abs;
  for (double sigma : params.scales_vox) {
    const SymMat3Field h = hessian_at_scale(v, sigma);
    double max_s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ev[i] = eig3_symmetric(h.at(i));
      const double s = std::sqrt(ev[i][0] * ev[i][0] + ev[i][1] * ev[i][1] + ev[i][2] * ev[i][2]);
      max_s = std::max(max_s, s);
    }
    const double c = params.c ? *params.c : 0.5 * max_s;
    if (!(c > 0.0) || (!params.c && c <= flat)) continue;
    const double two_c2 = 2.0 * c * c;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [l1, l2, l3] = ev[i];
      if (params.bright ? (l2 > 0.0 || l3 > 0.0) : (l2 < 0.0 || l3 < 0.0)) continue;
      if (l2 == 0.0 || l3 == 0.0) continue;
      const double ra = std::abs(l2) / std::abs(l3);
      const double rb = std::abs(l1) / std::sqrt(std::abs(l2 * l3));
      const double s2 = l1 * l1 + l2 * l2 + l3 * l3;
      const double vness =
          (1.0 - std::exp(-ra * ra / two_a2)) * std::exp(-rb * rb / two_b2) * (1.0 - std::exp(-s2 / two_c2));
      out[i] = std::max(out[i], static_cast<float>(vness));
    }
  }
  return Volume(v.dims(), v.voxel_size_um(), std::move(out));
}

}  // namespace fiberseg
