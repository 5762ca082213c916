#include "fiberseg/volume.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fiberseg {

std::string to_string(const Dims& d) {
  return "(" + std::to_string(d.nz) + "," + std::to_string(d.ny) + "," + std::to_string(d.nx) + ")";
}

void validate_labels(const LabelVolume& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1) {
      throw FormatError("label volume holds value " + std::to_string(labels[i]) + " at voxel " + std::to_string(i));
    }
  }
}

bool patch_fits(const Dims& dims, const PatchRef& p) {
  const auto& o = p.origin;
  const auto& s = p.shape;
  if (o.z < 0 || o.y < 0 || o.x < 0) return false;
  if (s.nz < 1 || s.ny < 1 || s.nx < 1) return false;
  return o.z + s.nz <= dims.nz && o.y + s.ny <= dims.ny && o.x + s.nx <= dims.nx;
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::string format_pitch(double pitch) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), pitch);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string header_for(const Grid<T>& v, const char* dtype) {
  const auto& d = v.dims();
  return std::string("VXG1 dtype=") + dtype + " dims=" + std::to_string(d.nz) + "," + std::to_string(d.ny) + "," +
         std::to_string(d.nx) + " pitch_um=" + format_pitch(v.voxel_size_um()) + "\n";
}

void write_file(const std::filesystem::path& path, const std::string& header, const void* payload, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("write failed for " + path.string());
}

struct Header {
  std::string dtype;
  Dims dims;
  double pitch = 0.0;
};

std::int64_t parse_int(std::string_view s, const std::string& what) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("bad integer in " + what);
  return v;
}

Header parse_header(const std::string& line, const std::string& name) {
  std::istringstream in(line);
  std::string magic;
  in >> magic;
  if (magic != "VXG1") throw FormatError(name + ": not a VXG1 file");
  Header h;
  bool have_dtype = false, have_dims = false, have_pitch = false;
  std::string tok;
  while (in >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError(name + ": malformed header token '" + tok + "'");
    std::string key = tok.substr(0, eq);
    std::string val = tok.substr(eq + 1);
    if (key == "dtype") {
      if (val != "f32" && val != "u8") throw FormatError(name + ": unknown dtype '" + val + "'");
      h.dtype = val;
      have_dtype = true;
    } else if (key == "dims") {
      std::int64_t parts[3];
      std::size_t start = 0;
      for (int i = 0; i < 3; ++i) {
        auto comma = val.find(',', start);
        if ((i < 2) != (comma != std::string::npos)) throw FormatError(name + ": dims must be nz,ny,nx");
        parts[i] = parse_int(std::string_view(val).substr(start, comma == std::string::npos ? val.npos : comma - start),
                             name + " dims");
        start = comma + 1;
      }
      h.dims = Dims{parts[0], parts[1], parts[2]};
      if (h.dims.nz < 1 || h.dims.ny < 1 || h.dims.nx < 1) throw FormatError(name + ": dims must be >= 1");
      have_dims = true;
    } else if (key == "pitch_um") {
      auto res = std::from_chars(val.data(), val.data() + val.size(), h.pitch);
      if (res.ec != std::errc{} || res.ptr != val.data() + val.size() || !(h.pitch > 0.0) || !std::isfinite(h.pitch)) {
        throw FormatError(name + ": bad pitch_um '" + val + "'");
      }
      have_pitch = true;
    } else {
      throw FormatError(name + ": unknown header key '" + key + "'");
    }
  }
  if (!have_dtype || !have_dims || !have_pitch) throw FormatError(name + ": header missing dtype, dims or pitch_um");
  return h;
}

}  // namespace

AnyVolume load_volume(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + name);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(name + ": missing header line");
  Header h = parse_header(line, name);
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t elem = h.dtype == "f32" ? 4 : 1;
  const std::size_t expected = h.dims.count() * elem;
  if (payload.size() != expected) {
    throw FormatError(name + ": payload has " + std::to_string(payload.size()) + " bytes, header declares " +
                      std::to_string(expected));
  }
  if (h.dtype == "u8") {
    std::vector<std::uint8_t> data(payload.begin(), payload.end());
    LabelVolume v(h.dims, h.pitch, std::move(data));
    validate_labels(v);
    return v;
  }
  std::vector<float> data(h.dims.count());
  std::memcpy(data.data(), payload.data(), expected);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : data) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      bits = __builtin_bswap32(bits);
      f = std::bit_cast<float>(bits);
    }
  }
  return Volume(h.dims, h.pitch, std::move(data));
}

Volume load_gray(const std::filesystem::path& path) {
  auto any = load_volume(path);
  if (auto* v = std::get_if<Volume>(&any)) return std::move(*v);
  throw FormatError(path.string() + ": expected a f32 gray volume, found u8");
}

LabelVolume load_labels(const std::filesystem::path& path) {
  auto any = load_volume(path);
  if (auto* v = std::get_if<LabelVolume>(&any)) return std::move(*v);
  throw FormatError(path.string() + ": expected a u8 label volume, found f32");
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  if constexpr (std::endian::native == std::endian::little) {
    write_file(path, header_for(v, "f32"), v.data().data(), v.size() * sizeof(float));
  } else {
    std::vector<std::uint32_t> swapped(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) swapped[i] = __builtin_bswap32(std::bit_cast<std::uint32_t>(v[i]));
    write_file(path, header_for(v, "f32"), swapped.data(), swapped.size() * 4);
  }
}

void save_volume(const LabelVolume& v, const std::filesystem::path& path) {
  write_file(path, header_for(v, "u8"), v.data().data(), v.size());
}

Moments moments(std::span<const float> values) {
  if (values.empty()) return {};
  double sum = 0.0;
  for (float f : values) sum += f;
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (float f : values) {
    const double d = f - mean;
    ss += d * d;
  }
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

Volume normalize(const Volume& v) {
  if (v.size() < 2) throw DegenerateInput("normalize needs at least 2 voxels");
  const auto m = moments(v.data());
  if (!(m.stddev > 0.0)) throw DegenerateInput("cannot normalize a constant volume");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - m.mean) / m.stddev);
  return Volume(v.dims(), v.voxel_size_um(), std::move(out));
}

}  // namespace fiberseg
