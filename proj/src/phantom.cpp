#include "fiberseg/phantom.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fiberseg/filters.hpp"

namespace fiberseg {

namespace {

Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

bool inside_box(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  for (int a = 0; a < 3; ++a) {
    if (p[a] < lo[a] || p[a] > hi[a]) return false;
  }
  return true;
}

// Liang-Barsky clip of p0 + t (p1 - p0), t in [0,1]; returns the surviving t interval.
std::pair<double, double> clip_segment(const Vec3& p0, const Vec3& p1, const Vec3& lo, const Vec3& hi) {
  double t0 = 0.0, t1 = 1.0;
  const Vec3 d = sub(p1, p0);
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (p0[a] < lo[a] || p0[a] > hi[a]) return {1.0, 0.0};
      continue;
    }
    double ta = (lo[a] - p0[a]) / d[a];
    double tb = (hi[a] - p0[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return {1.0, 0.0};
  }
  return {t0, t1};
}

}  // namespace

Vec3 PhantomSpec::extent_um() const {
  return {dims.nz * voxel_size_um, dims.ny * voxel_size_um, dims.nx * voxel_size_um};
}

void PhantomSpec::validate() const {
  if (dims.nz < 1 || dims.ny < 1 || dims.nx < 1) throw InvalidArgument("phantom dims must be >= 1");
  if (!(voxel_size_um > 0.0)) throw InvalidArgument("voxel_size_um must be positive");
  if (!(fiber_diameter_um > 0.0)) throw InvalidArgument("fiber_diameter_um must be positive");
  if (!(target_volume_fraction > 0.0 && target_volume_fraction < 0.5)) {
    throw InvalidArgument("target_volume_fraction must lie in (0, 0.5)");
  }
  if (!(gray_fiber > gray_matrix)) throw InvalidArgument("gray_fiber must exceed gray_matrix");
  if (supersample < 1 || supersample % 2 == 0) throw InvalidArgument("supersample must be an odd integer >= 1");
  if (supersample > 15) throw InvalidArgument("supersample must be <= 15");
  if (!(length_min_um > fiber_diameter_um)) throw InvalidArgument("length_min_um must exceed fiber_diameter_um");
  if (!(length_max_um >= length_min_um)) throw InvalidArgument("length_max_um must be >= length_min_um");
  if (!(psf_sigma_um >= 0.0)) throw InvalidArgument("psf_sigma_um must be >= 0");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
  if (max_attempts_per_fiber < 1) throw InvalidArgument("max_attempts_per_fiber must be >= 1");
}

Vec3 sample_direction(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    const double len = std::sqrt(dot(v, v));
    if (len > 1e-12) return scale(v, 1.0 / len);
  }
}

double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub(b, a);
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(sub(p, a), ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec3 d = sub(p, add(a, scale(ab, t)));
  return std::sqrt(dot(d, d));
}

double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  // closest points between two segments (Ericson, Real-Time Collision Detection 5.1.9)
  const Vec3 d1 = sub(p1, p0), d2 = sub(q1, q0), r = sub(p0, q0);
  const double a = dot(d1, d1), e = dot(d2, d2), f = dot(d2, r);
  double s = 0.0, t = 0.0;
  constexpr double kEps = 1e-12;
  if (a <= kEps && e <= kEps) {
    return std::sqrt(dot(r, r));
  }
  if (a <= kEps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = dot(d1, r);
    if (e <= kEps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = dot(d1, d2);
      const double denom = a * e - b * b;
      s = denom > kEps * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  const Vec3 diff = sub(add(p0, scale(d1, s)), add(q0, scale(d2, t)));
  return std::sqrt(dot(diff, diff));
}

double capsule_volume_in_box(const FiberCapsule& c, const Vec3& box_min, const Vec3& box_max) {
  const double r = c.radius_um;
  const auto [t0, t1] = clip_segment(c.p0, c.p1, box_min, box_max);
  const Vec3 axis = sub(c.p1, c.p0);
  const double inside_len = t1 > t0 ? (t1 - t0) * std::sqrt(dot(axis, axis)) : 0.0;
  double vol = std::numbers::pi * r * r * inside_len;
  const double cap = 2.0 / 3.0 * std::numbers::pi * r * r * r;
  if (inside_box(c.p0, box_min, box_max)) vol += cap;
  if (inside_box(c.p1, box_min, box_max)) vol += cap;
  return vol;
}

FiberScene sample_scene(const PhantomSpec& spec) {
  spec.validate();
  FiberScene scene;
  scene.box_max = spec.extent_um();
  const double box_volume = scene.box_max[0] * scene.box_max[1] * scene.box_max[2];
  const double radius = spec.fiber_diameter_um / 2.0;
  const double pad = spec.length_max_um / 2.0;
  const double lo_goal = spec.target_volume_fraction - kVolumeFractionTolerance;
  const double hi_goal = spec.target_volume_fraction + kVolumeFractionTolerance;

  Rng rng(spec.seed);
  double fraction = 0.0;
  while (fraction < spec.target_volume_fraction) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_attempts_per_fiber && !placed;) {
      Vec3 center;
      for (int a = 0; a < 3; ++a) center[a] = -pad + uniform01(rng) * (scene.box_max[a] + 2.0 * pad);
      const Vec3 dir = sample_direction(rng);
      const double len = spec.length_min_um + uniform01(rng) * (spec.length_max_um - spec.length_min_um);
      const FiberCapsule cand{sub(center, scale(dir, len / 2.0)), add(center, scale(dir, len / 2.0)), radius};
      const double inside = capsule_volume_in_box(cand, scene.box_min, scene.box_max) / box_volume;
      if (inside <= 0.0) continue;  // misses the box entirely: redraw without spending an attempt
      ++attempt;
      if (fraction + inside > hi_goal) continue;
      bool clear = true;
      for (const auto& f : scene.fibers) {
        if (segment_distance(cand.p0, cand.p1, f.p0, f.p1) < cand.radius_um + f.radius_um) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      scene.fibers.push_back(cand);
      fraction += inside;
      placed = true;
    }
    if (!placed) {
      if (fraction >= lo_goal) break;
      throw PlacementFailure("could not place fiber " + std::to_string(scene.fibers.size() + 1) + " within " +
                                 std::to_string(spec.max_attempts_per_fiber) + " attempts; achieved volume fraction " +
                                 std::to_string(fraction) + " of target " + std::to_string(spec.target_volume_fraction),
                             fraction);
    }
  }
  scene.volume_fraction = fraction;
  return scene;
}

RenderedPair rasterize(const FiberScene& scene, const PhantomSpec& spec) {
  spec.validate();
  const Dims d = spec.dims;
  const double pitch = spec.voxel_size_um;
  const int s = spec.supersample;
  const int s3 = s * s * s;
  std::vector<double> offsets(s);
  for (int i = 0; i < s; ++i) offsets[i] = ((i + 0.5) / s - 0.5) * pitch;
  const double half_diag = std::sqrt(3.0) / 2.0 * pitch;
  const std::int64_t dim[3] = {d.nz, d.ny, d.nx};

  std::vector<std::uint16_t> count(d.count(), 0);
  for (const auto& f : scene.fibers) {
    const double r = f.radius_um;
    const double reach = r + half_diag;
    const Vec3 axis = sub(f.p1, f.p0);
    auto index_range = [&](double lo, double hi, int a) {
      const auto first = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(lo / pitch - 0.5)));
      const auto last = std::min<std::int64_t>(dim[a] - 1, static_cast<std::int64_t>(std::ceil(hi / pitch - 0.5)));
      return std::pair{first, last};
    };
    const auto [z0, z1] = index_range(std::min(f.p0[0], f.p1[0]) - reach, std::max(f.p0[0], f.p1[0]) + reach, 0);
    for (std::int64_t z = z0; z <= z1; ++z) {
      const double zc = (z + 0.5) * pitch;
      // portion of the axis within `reach` of this slab, bounding y/x
      double ta = 0.0, tb = 1.0;
      if (std::abs(axis[0]) > 1e-12) {
        ta = (zc - reach - f.p0[0]) / axis[0];
        tb = (zc + reach - f.p0[0]) / axis[0];
        if (ta > tb) std::swap(ta, tb);
        ta = std::max(ta, 0.0);
        tb = std::min(tb, 1.0);
        if (ta > tb) continue;
      }
      const Vec3 qa = add(f.p0, scale(axis, ta)), qb = add(f.p0, scale(axis, tb));
      const auto [y0, y1] = index_range(std::min(qa[1], qb[1]) - reach, std::max(qa[1], qb[1]) + reach, 1);
      const auto [x0, x1] = index_range(std::min(qa[2], qb[2]) - reach, std::max(qa[2], qb[2]) + reach, 2);
      for (std::int64_t y = y0; y <= y1; ++y) {
        const double yc = (y + 0.5) * pitch;
        for (std::int64_t x = x0; x <= x1; ++x) {
          const Vec3 c{zc, yc, (x + 0.5) * pitch};
          const double dc = point_segment_distance(c, f.p0, f.p1);
          if (dc > reach) continue;
          auto& slot = count[(z * d.ny + y) * d.nx + x];
          if (dc <= r - half_diag) {
            slot = static_cast<std::uint16_t>(slot + s3);
            continue;
          }
          int hits = 0;
          for (int i = 0; i < s; ++i) {
            for (int j = 0; j < s; ++j) {
              for (int k = 0; k < s; ++k) {
                const Vec3 p{zc + offsets[i], yc + offsets[j], c[2] + offsets[k]};
                if (point_segment_distance(p, f.p0, f.p1) <= r) ++hits;
              }
            }
          }
          slot = static_cast<std::uint16_t>(slot + hits);
        }
      }
    }
  }

  RenderedPair out{Volume(d, pitch), LabelVolume(d, pitch)};
  const double contrast = spec.gray_fiber - spec.gray_matrix;
  for (std::size_t i = 0; i < count.size(); ++i) {
    const int c = std::min<int>(count[i], s3);
    const double occ = static_cast<double>(c) / s3;
    out.gray[i] = static_cast<float>(spec.gray_matrix + occ * contrast);
    out.labels[i] = 2 * c >= s3 ? 1 : 0;
  }
  return out;
}

Volume degrade(const Volume& v, const PhantomSpec& spec, std::uint64_t noise_seed) {
  if (!(spec.psf_sigma_um >= 0.0) || !(spec.noise_sigma >= 0.0)) throw InvalidArgument("negative degradation width");
  Volume out = spec.psf_sigma_um > 0.0 ? gaussian_blur(v, spec.psf_sigma_um / v.voxel_size_um()) : v;
  if (spec.noise_sigma > 0.0) {
    Rng rng(noise_seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& f : out.data()) f = static_cast<float>(f + noise(rng));
  }
  return out;
}

Volume degrade(const Volume& v, const PhantomSpec& spec) { return degrade(v, spec, mix_seed(spec.seed, 1)); }

RenderedPair generate(const PhantomSpec& spec) {
  const FiberScene scene = sample_scene(spec);
  RenderedPair clean = rasterize(scene, spec);
  return {degrade(clean.gray, spec), std::move(clean.labels)};
}

PhantomPair generate_pair(const PhantomSpec& spec_mr, const PhantomSpec& spec_lr, std::uint64_t seed) {
  const Vec3 a = spec_mr.extent_um(), b = spec_lr.extent_um();
  const double tol = std::max(spec_mr.voxel_size_um, spec_lr.voxel_size_um);
  for (int i = 0; i < 3; ++i) {
    if (std::abs(a[i] - b[i]) >= tol) {
      throw InvalidArgument("MR and LR specs cover different extents (" + std::to_string(a[i]) + " vs " +
                            std::to_string(b[i]) + " um along axis " + std::to_string(i) + ")");
    }
  }
  PhantomSpec geometry = spec_mr;
  geometry.seed = seed;
  PhantomPair out;
  out.scene = sample_scene(geometry);
  RenderedPair mr = rasterize(out.scene, spec_mr);
  RenderedPair lr = rasterize(out.scene, spec_lr);
  out.mr = {degrade(mr.gray, spec_mr, mix_seed(seed, 1)), std::move(mr.labels)};
  out.lr = {degrade(lr.gray, spec_lr, mix_seed(seed, 2)), std::move(lr.labels)};
  return out;
}

PhantomSpec matching_spec(const PhantomSpec& mr, double lr_pitch_um) {
  if (!(lr_pitch_um > 0.0)) throw InvalidArgument("LR pitch must be positive");
  PhantomSpec lr = mr;
  lr.voxel_size_um = lr_pitch_um;
  const Vec3 e = mr.extent_um();
  auto n = [&](double len) { return std::max<std::int64_t>(1, std::llround(len / lr_pitch_um)); };
  lr.dims = Dims{n(e[0]), n(e[1]), n(e[2])};
  return lr;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("bad number for " + key + ": '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s, const std::string& key) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("bad integer for " + key + ": '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

PhantomSpec parse_phantom_spec(const std::string& text) {
  PhantomSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("spec line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "dims") {
      auto parts = split(val, ',');
      if (parts.size() != 3) throw FormatError("dims must be nz,ny,nx");
      spec.dims = Dims{parse_int(trim(parts[0]), key), parse_int(trim(parts[1]), key), parse_int(trim(parts[2]), key)};
    } else if (key == "length_range_um") {
      auto parts = split(val, ',');
      if (parts.size() != 2) throw FormatError("length_range_um must be min,max");
      spec.length_min_um = parse_double(trim(parts[0]), key);
      spec.length_max_um = parse_double(trim(parts[1]), key);
    } else if (key == "voxel_size_um") {
      spec.voxel_size_um = parse_double(val, key);
    } else if (key == "fiber_diameter_um") {
      spec.fiber_diameter_um = parse_double(val, key);
    } else if (key == "target_volume_fraction") {
      spec.target_volume_fraction = parse_double(val, key);
    } else if (key == "gray_matrix") {
      spec.gray_matrix = parse_double(val, key);
    } else if (key == "gray_fiber") {
      spec.gray_fiber = parse_double(val, key);
    } else if (key == "psf_sigma_um") {
      spec.psf_sigma_um = parse_double(val, key);
    } else if (key == "noise_sigma") {
      spec.noise_sigma = parse_double(val, key);
    } else if (key == "supersample") {
      spec.supersample = static_cast<int>(parse_int(val, key));
    } else if (key == "seed") {
      auto res = std::from_chars(val.data(), val.data() + val.size(), spec.seed);
      if (res.ec != std::errc{} || res.ptr != val.data() + val.size()) throw FormatError("bad seed '" + val + "'");
    } else if (key == "max_attempts_per_fiber") {
      spec.max_attempts_per_fiber = static_cast<int>(parse_int(val, key));
    } else {
      throw FormatError("unknown phantom spec key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

PhantomSpec load_phantom_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open spec file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_phantom_spec(ss.str());
}

std::string format_phantom_spec(const PhantomSpec& s) {
  std::ostringstream out;
  out << "dims=" << s.dims.nz << "," << s.dims.ny << "," << s.dims.nx << "\n"
      << "voxel_size_um=" << fmt_double(s.voxel_size_um) << "\n"
      << "fiber_diameter_um=" << fmt_double(s.fiber_diameter_um) << "\n"
      << "target_volume_fraction=" << fmt_double(s.target_volume_fraction) << "\n"
      << "length_range_um=" << fmt_double(s.length_min_um) << "," << fmt_double(s.length_max_um) << "\n"
      << "gray_matrix=" << fmt_double(s.gray_matrix) << "\n"
      << "gray_fiber=" << fmt_double(s.gray_fiber) << "\n"
      << "psf_sigma_um=" << fmt_double(s.psf_sigma_um) << "\n"
      << "noise_sigma=" << fmt_double(s.noise_sigma) << "\n"
      << "supersample=" << s.supersample << "\n"
      << "seed=" << s.seed << "\n"
      << "max_attempts_per_fiber=" << s.max_attempts_per_fiber << "\n";
  return out.str();
}

}  // namespace fiberseg
