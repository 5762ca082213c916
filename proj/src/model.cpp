#include "fiberseg/model.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fiberseg {

std::string to_string(Variant v) { return v == Variant::kShallow ? "shallow" : "deep"; }

Variant parse_variant(const std::string& s) {
  if (s == "shallow") return Variant::kShallow;
  if (s == "deep") return Variant::kDeep;
  throw InvalidArgument("unknown model variant '" + s + "' (expected shallow or deep)");
}

ModelConfig ModelConfig::standard(int dimensionality, Variant variant) {
  ModelConfig c;
  c.dimensionality = dimensionality;
  c.variant = variant;
  c.block_widths = variant == Variant::kShallow ? std::vector<std::int64_t>{16, 32, 64}
                                                : std::vector<std::int64_t>{16, 16, 32, 32, 64, 64};
  c.stem_width = 16;
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (dimensionality != 2 && dimensionality != 3) throw InvalidArgument("model dimensionality must be 2 or 3");
  if (block_widths.empty()) throw InvalidArgument("model needs at least one residual block");
  for (auto w : block_widths) {
    if (w < 1) throw InvalidArgument("block widths must be positive");
  }
  if (stem_width < 1) throw InvalidArgument("stem width must be positive");
}

template <typename T>
Network<T>::Network(ModelConfig cfg) : config_(std::move(cfg)) {
  config_.validate();
  const int d = config_.dimensionality;
  stem = ad::Conv<T>(d, 1, config_.stem_width, 3);
  std::int64_t width = config_.stem_width;
  for (auto w : config_.block_widths) {
    blocks.emplace_back(d, width, w);
    width = w;
  }
  head = ad::Conv<T>(d, width, 2, 3);
}

template <typename T>
void Network<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  stem.init(rng);
  for (auto& b : blocks) {
    b.init(rng);
    std::fill(b.bn.gamma.value.begin(), b.bn.gamma.value.end(), T(1));
    std::fill(b.bn.beta.value.begin(), b.bn.beta.value.end(), T(0));
    std::fill(b.bn.running_mean.begin(), b.bn.running_mean.end(), T(0));
    std::fill(b.bn.running_var.begin(), b.bn.running_var.end(), T(1));
  }
  head.init(rng);
}

template <typename T>
ad::Tensor<T> Network<T>::forward(const ad::Tensor<T>& x, ad::Mode mode) {
  if (x.rank() != config_.dimensionality + 2 || x.channels() != 1) {
    throw ShapeMismatch("a " + std::to_string(config_.dimensionality) + "D model expects a rank-" +
                        std::to_string(config_.dimensionality + 2) + " single-channel input");
  }
  ad::Tensor<T> h = stem.forward(x);
  for (auto& b : blocks) h = b.forward(h, mode);
  return head.forward(h);
}

template <typename T>
ad::Tensor<T> Network<T>::backward(const ad::Tensor<T>& dlogits) {
  ad::Tensor<T> g = head.backward(dlogits);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) g = it->backward(g);
  return stem.backward(g);
}

template <typename T>
std::vector<std::pair<std::string, ad::Tensor<T>*>> Network<T>::parameters() {
  std::vector<std::pair<std::string, ad::Tensor<T>*>> out;
  auto conv = [&](const std::string& prefix, ad::Conv<T>& c) {
    out.emplace_back(prefix + ".weight", &c.weight);
    out.emplace_back(prefix + ".bias", &c.bias);
  };
  conv("stem", stem);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    conv(p + ".conv1", blocks[i].conv1);
    conv(p + ".conv2", blocks[i].conv2);
    out.emplace_back(p + ".bn.gamma", &blocks[i].bn.gamma);
    out.emplace_back(p + ".bn.beta", &blocks[i].bn.beta);
    if (blocks[i].has_projection()) conv(p + ".proj", blocks[i].projection);
  }
  conv("head", head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> Network<T>::buffers() {
  std::vector<std::pair<std::string, std::vector<T>*>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".bn.";
    out.emplace_back(p + "running_mean", &blocks[i].bn.running_mean);
    out.emplace_back(p + "running_var", &blocks[i].bn.running_var);
  }
  return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : const_cast<Network*>(this)->parameters()) n += t->size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& [name, t] : parameters()) t->zero_grad();
}

template class Network<float>;
template class Network<double>;

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m(cfg);
  m.init(seed);
  return m;
}

namespace {

constexpr const char* kMagic = "FSCKPT1";

std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename I>
I parse_integer(const std::string& s, const std::string& what) {
  I v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("checkpoint: bad " + what + " '" + s + "'");
  return v;
}

struct Section {
  std::string name;
  std::span<float> data;
};

std::vector<Section> sections_of(Model& m) {
  std::vector<Section> out;
  for (auto& [name, t] : m.parameters()) out.push_back({name, t->value});
  for (auto& [name, b] : m.buffers()) out.push_back({name, *b});
  return out;
}

}  // namespace

void save_checkpoint(Model& model, const CheckpointInfo& info, const std::filesystem::path& path) {
  const auto& c = model.config();
  std::ostringstream head;
  head << kMagic << "\n"
       << "dimensionality=" << c.dimensionality << "\n"
       << "variant=" << to_string(c.variant) << "\n"
       << "stem_width=" << c.stem_width << "\n"
       << "block_widths=" << join(c.block_widths) << "\n"
       << "iterations=" << info.iterations << "\n"
       << "seed=" << info.seed << "\n";
  const auto sections = sections_of(model);
  head << "sections=" << sections.size() << "\n";
  std::size_t total = 0;
  for (const auto& s : sections) {
    head << "section " << s.name << " " << s.data.size() << "\n";
    total += s.data.size();
  }
  head << "end\n";
  std::vector<std::uint32_t> payload;
  payload.reserve(total);
  for (const auto& s : sections) {
    for (float f : s.data) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      payload.push_back(bits);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
  if (!out) throw Error("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_dimensionality) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw FormatError(path.string() + ": not a checkpoint file");
  ModelConfig cfg;
  CheckpointInfo info;
  std::vector<std::pair<std::string, std::size_t>> manifest;
  std::size_t declared_sections = 0;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("section ", 0) == 0) {
      std::istringstream ls(line.substr(8));
      std::string name, count;
      if (!(ls >> name >> count)) throw FormatError("checkpoint: malformed section line");
      manifest.emplace_back(name, parse_integer<std::size_t>(count, "section size"));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "dimensionality") {
      cfg.dimensionality = parse_integer<int>(val, key);
    } else if (key == "variant") {
      cfg.variant = parse_variant(val);
    } else if (key == "stem_width") {
      cfg.stem_width = parse_integer<std::int64_t>(val, key);
    } else if (key == "block_widths") {
      cfg.block_widths.clear();
      std::istringstream ws(val);
      std::string tok;
      while (std::getline(ws, tok, ',')) cfg.block_widths.push_back(parse_integer<std::int64_t>(tok, key));
    } else if (key == "iterations") {
      info.iterations = parse_integer<std::int64_t>(val, key);
    } else if (key == "seed") {
      info.seed = parse_integer<std::uint64_t>(val, key);
    } else if (key == "sections") {
      declared_sections = parse_integer<std::size_t>(val, key);
    } else {
      throw FormatError("checkpoint: unknown key '" + key + "'");
    }
  }
  if (!ended) throw FormatError(path.string() + ": truncated checkpoint manifest");
  if (manifest.size() != declared_sections) throw FormatError("checkpoint: section count does not match manifest");
  cfg.validate();
  if (expected_dimensionality && *expected_dimensionality != cfg.dimensionality) {
    throw ShapeMismatch("checkpoint holds a " + std::to_string(cfg.dimensionality) + "D model, expected " +
                        std::to_string(*expected_dimensionality) + "D");
  }

  Model model(cfg);
  auto sections = sections_of(model);
  if (sections.size() != manifest.size()) throw FormatError("checkpoint: manifest does not match its configuration");
  std::size_t total = 0;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    if (sections[i].name != manifest[i].first || sections[i].data.size() != manifest[i].second) {
      throw FormatError("checkpoint: section '" + manifest[i].first + "' does not match the configured model");
    }
    total += manifest[i].second;
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != total * 4) {
    throw FormatError(path.string() + ": payload has " + std::to_string(payload.size()) + " bytes, manifest needs " +
                      std::to_string(total * 4));
  }
  std::size_t off = 0;
  for (auto& s : sections) {
    for (float& f : s.data) {
      std::uint32_t bits;
      std::memcpy(&bits, payload.data() + off, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      f = std::bit_cast<float>(bits);
      off += 4;
    }
  }
  return {std::move(model), info};
}

}  // namespace fiberseg
