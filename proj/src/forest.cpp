#include "fiberseg/forest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fiberseg/rng.hpp"

namespace fiberseg {

void ForestConfig::validate() const {
  if (n_trees < 1) throw InvalidArgument("forest needs at least one tree");
  if (max_depth < 1) throw InvalidArgument("max_depth must be >= 1");
  if (min_samples_leaf < 1) throw InvalidArgument("min_samples_leaf must be >= 1");
  if (features_per_split < 0) throw InvalidArgument("features_per_split must be >= 0");
  if (samples_per_class < min_samples_leaf) throw InvalidArgument("samples_per_class must be >= min_samples_leaf");
}

double DecisionTree::predict(const FeatureStack& stack, std::size_t voxel) const {
  int i = 0;
  while (!nodes[i].is_leaf()) {
    const auto& n = nodes[i];
    i = stack.at(n.channel, voxel) <= n.threshold ? n.left : n.right;
  }
  return nodes[i].p_fiber;
}

namespace {

// Row-major sample matrix drawn from the stack.
struct SampleSet {
  std::size_t channels = 0;
  std::vector<float> x;
  std::vector<std::uint8_t> y;

  float value(std::size_t row, std::size_t c) const { return x[row * channels + c]; }
};

struct Split {
  int channel = -1;
  float threshold = 0.0f;
  double weighted_impurity = 0.0;
};

// n * gini for a node with `pos` fiber samples out of n.
double scaled_gini(double pos, double n) {
  if (n <= 0.0) return 0.0;
  const double neg = n - pos;
  return n - (pos * pos + neg * neg) / n;
}

class TreeBuilder {
 public:
  TreeBuilder(const SampleSet& s, const ForestConfig& cfg, int mtry, Rng& rng)
      : s_(s), cfg_(cfg), mtry_(mtry), rng_(rng) {}

  DecisionTree build(std::vector<std::uint32_t> rows) {
    DecisionTree tree;
    struct Pending {
      int node;
      int depth;
      std::vector<std::uint32_t> rows;
    };
    std::vector<Pending> stack;
    tree.nodes.push_back({});
    stack.push_back({0, 0, std::move(rows)});
    std::vector<int> features(s_.channels);
    while (!stack.empty()) {
      Pending p = std::move(stack.back());
      stack.pop_back();
      std::size_t pos = 0;
      for (auto r : p.rows) pos += s_.y[r];
      const double n = static_cast<double>(p.rows.size());
      TreeNode& node = tree.nodes[p.node];
      node.p_fiber = n > 0 ? pos / n : 0.0;
      const bool pure = pos == 0 || pos == p.rows.size();
      if (pure || p.depth >= cfg_.max_depth || p.rows.size() < 2 * static_cast<std::size_t>(cfg_.min_samples_leaf)) {
        continue;
      }
      std::iota(features.begin(), features.end(), 0);
      for (int k = 0; k < mtry_; ++k) {
        const auto j = uniform_int(rng_, k, static_cast<std::int64_t>(features.size()) - 1);
        std::swap(features[k], features[j]);
      }
      const double parent = scaled_gini(static_cast<double>(pos), n);
      Split best{-1, 0.0f, parent};
      for (int k = 0; k < mtry_; ++k) search(features[k], p.rows, static_cast<double>(pos), best);
      if (best.channel < 0) continue;

      std::vector<std::uint32_t> left, right;
      for (auto r : p.rows) (s_.value(r, best.channel) <= best.threshold ? left : right).push_back(r);
      const int li = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      TreeNode& split = tree.nodes[p.node];
      split.channel = best.channel;
      split.threshold = best.threshold;
      split.left = li;
      split.right = li + 1;
      // right pushed first so the left subtree is expanded first
      stack.push_back({li + 1, p.depth + 1, std::move(right)});
      stack.push_back({li, p.depth + 1, std::move(left)});
    }
    return tree;
  }

 private:
  void search(int channel, const std::vector<std::uint32_t>& rows, double total_pos, Split& best) {
    order_.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) order_[i] = {s_.value(rows[i], channel), s_.y[rows[i]]};
    std::sort(order_.begin(), order_.end());
    const double n = static_cast<double>(rows.size());
    const auto min_leaf = static_cast<std::size_t>(cfg_.min_samples_leaf);
    double left_pos = 0.0;
    for (std::size_t i = 0; i + 1 < order_.size(); ++i) {
      left_pos += order_[i].second;
      if (order_[i].first == order_[i + 1].first) continue;
      const std::size_t nl = i + 1;
      if (nl < min_leaf || order_.size() - nl < min_leaf) continue;
      const double impurity = scaled_gini(left_pos, static_cast<double>(nl)) +
                              scaled_gini(total_pos - left_pos, n - static_cast<double>(nl));
      if (impurity < best.weighted_impurity - 1e-12) {
        const float lo = order_[i].first, hi = order_[i + 1].first;
        float mid = lo + (hi - lo) / 2.0f;
        if (!(mid < hi)) mid = lo;
        best = {channel, mid, impurity};
      }
    }
  }

  const SampleSet& s_;
  const ForestConfig& cfg_;
  int mtry_;
  Rng& rng_;
  std::vector<std::pair<float, std::uint8_t>> order_;
};

}  // namespace

TrainedForest train_forest(const FeatureStack& stack, const LabelVolume& labels, const ForestConfig& cfg) {
  cfg.validate();
  if (stack.dims != labels.dims()) {
    throw ShapeMismatch("feature stack dims " + to_string(stack.dims) + " differ from labels " + to_string(labels.dims()));
  }
  if (stack.channels() == 0) throw InvalidArgument("feature stack has no channels");
  std::vector<std::uint32_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] ? 1 : 0].push_back(static_cast<std::uint32_t>(i));
  if (by_class[0].empty() || by_class[1].empty()) {
    throw InvalidArgument("random forest training needs both fiber and background voxels");
  }

  Rng rng(cfg.seed);
  SampleSet samples;
  samples.channels = stack.channels();
  for (int cls = 0; cls < 2; ++cls) {
    auto& pool = by_class[cls];
    const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(cfg.samples_per_class));
    for (std::size_t k = 0; k < take; ++k) {
      const auto j = uniform_int(rng, static_cast<std::int64_t>(k), static_cast<std::int64_t>(pool.size()) - 1);
      std::swap(pool[k], pool[j]);
      for (std::size_t c = 0; c < samples.channels; ++c) samples.x.push_back(stack.at(c, pool[k]));
      samples.y.push_back(static_cast<std::uint8_t>(cls));
    }
  }
  const std::size_t m = samples.y.size();
  int mtry = cfg.features_per_split;
  if (mtry == 0) mtry = static_cast<int>(std::lround(std::sqrt(static_cast<double>(samples.channels))));
  mtry = std::clamp(mtry, 1, static_cast<int>(samples.channels));

  TrainedForest forest;
  forest.config = cfg;
  forest.config.features_per_split = mtry;
  forest.channels = stack.names;
  for (int t = 0; t < cfg.n_trees; ++t) {
    Rng tree_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(t) + 1));
    std::vector<std::uint32_t> rows(m);
    for (auto& r : rows) r = static_cast<std::uint32_t>(uniform_int(tree_rng, 0, static_cast<std::int64_t>(m) - 1));
    TreeBuilder builder(samples, cfg, mtry, tree_rng);
    forest.trees.push_back(builder.build(std::move(rows)));
  }
  return forest;
}

ForestPrediction forest_predict(const TrainedForest& forest, const FeatureStack& stack) {
  if (stack.names != forest.channels) {
    throw ShapeMismatch("feature stack channels do not match the forest's channel manifest");
  }
  if (forest.trees.empty()) throw InvalidArgument("forest has no trees");
  const std::size_t n = stack.voxels();
  ForestPrediction out{Volume(stack.dims, stack.voxel_size_um), LabelVolume(stack.dims, stack.voxel_size_um)};
  const double inv = 1.0 / static_cast<double>(forest.trees.size());
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (const auto& t : forest.trees) p += t.predict(stack, i);
    p *= inv;
    out.p_fiber[i] = static_cast<float>(p);
    out.labels[i] = p > 0.5 ? 1 : 0;
  }
  return out;
}

namespace {

template <typename T>
std::string num(T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_num(std::string_view s, const std::string& what) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw FormatError("forest file: bad " + what + " '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto p = s.find(sep, start);
    out.push_back(s.substr(start, p == std::string::npos ? std::string::npos : p - start));
    if (p == std::string::npos) break;
    start = p + 1;
  }
  return out;
}

}  // namespace

void save_forest(const TrainedForest& forest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const auto& c = forest.config;
  out << "FOREST1 n_trees=" << forest.trees.size() << " max_depth=" << c.max_depth
      << " min_samples_leaf=" << c.min_samples_leaf << " features_per_split=" << c.features_per_split
      << " samples_per_class=" << c.samples_per_class << " seed=" << c.seed << "\n";
  out << "channels=";
  for (std::size_t i = 0; i < forest.channels.size(); ++i) out << (i ? "," : "") << forest.channels[i];
  out << "\n";
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    const auto& nodes = forest.trees[t].nodes;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      out << t << "," << i << "," << (n.is_leaf() ? "leaf" : "split") << "," << n.channel << "," << num(n.threshold)
          << "," << n.left << "," << n.right << "," << num(n.p_fiber) << "\n";
    }
  }
  if (!out) throw Error("write failed for " + path.string());
}

TrainedForest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("FOREST1 ", 0) != 0) throw FormatError("not a FOREST1 file");
  TrainedForest f;
  std::size_t n_trees = 0;
  {
    std::istringstream hs(line.substr(8));
    std::string tok;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError("forest header token '" + tok + "'");
      const std::string key = tok.substr(0, eq);
      const std::string_view val = std::string_view(tok).substr(eq + 1);
      if (key == "n_trees") {
        n_trees = parse_num<std::size_t>(val, key);
      } else if (key == "max_depth") {
        f.config.max_depth = parse_num<int>(val, key);
      } else if (key == "min_samples_leaf") {
        f.config.min_samples_leaf = parse_num<int>(val, key);
      } else if (key == "features_per_split") {
        f.config.features_per_split = parse_num<int>(val, key);
      } else if (key == "samples_per_class") {
        f.config.samples_per_class = parse_num<int>(val, key);
      } else if (key == "seed") {
        f.config.seed = parse_num<std::uint64_t>(val, key);
      } else {
        throw FormatError("unknown forest header key '" + key + "'");
      }
    }
  }
  f.config.n_trees = static_cast<int>(n_trees);
  if (!std::getline(in, line) || line.rfind("channels=", 0) != 0) throw FormatError("forest file: missing channel manifest");
  f.channels = split(line.substr(9), ',');
  f.trees.resize(n_trees);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 8) throw FormatError("forest node line has " + std::to_string(cols.size()) + " fields");
    const auto t = parse_num<std::size_t>(cols[0], "tree");
    const auto i = parse_num<std::size_t>(cols[1], "node");
    if (t >= n_trees) throw FormatError("forest node references tree " + std::to_string(t));
    auto& nodes = f.trees[t].nodes;
    if (i != nodes.size()) throw FormatError("forest nodes out of order");
    TreeNode n;
    n.channel = parse_num<int>(cols[3], "channel");
    n.threshold = parse_num<float>(cols[4], "threshold");
    n.left = parse_num<int>(cols[5], "left");
    n.right = parse_num<int>(cols[6], "right");
    n.p_fiber = parse_num<double>(cols[7], "p_fiber");
    if ((cols[2] == "leaf") != n.is_leaf() || (cols[2] != "leaf" && cols[2] != "split")) {
      throw FormatError("forest node kind '" + cols[2] + "' inconsistent with channel");
    }
    nodes.push_back(n);
  }
  for (const auto& tree : f.trees) {
    if (tree.nodes.empty()) throw FormatError("forest file: empty tree");
    for (const auto& n : tree.nodes) {
      if (n.is_leaf()) continue;
      const auto sz = static_cast<int>(tree.nodes.size());
      if (n.left <= 0 || n.right <= 0 || n.left >= sz || n.right >= sz ||
          n.channel >= static_cast<int>(f.channels.size())) {
        throw FormatError("forest file: split node references missing child or channel");
      }
    }
  }
  return f;
}

}  // namespace fiberseg
