#pragma once

// Random-forest voxel classifier over a FeatureStack: balanced seeded sampling,
// bootstrap per tree, CART splits by Gini impurity on random channel subsets.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fiberseg/filters.hpp"
#include "fiberseg/volume.hpp"

namespace fiberseg {

struct ForestConfig {
  int n_trees = 50;
  int max_depth = 12;
  int min_samples_leaf = 5;
  int features_per_split = 0;  // 0: round(sqrt(channel count))
  int samples_per_class = 20000;
  std::uint64_t seed = 42;

  void validate() const;
};

struct TreeNode {
  int channel = -1;  // -1 marks a leaf
  float threshold = 0.0f;  // value <= threshold goes left
  int left = -1;
  int right = -1;
  double p_fiber = 0.0;  // fiber fraction of the training samples reaching this node

  bool is_leaf() const { return channel < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(const FeatureStack& stack, std::size_t voxel) const;
  bool operator==(const DecisionTree&) const = default;
};

struct TrainedForest {
  ForestConfig config;
  std::vector<std::string> channels;
  std::vector<DecisionTree> trees;

  bool operator==(const TrainedForest& o) const { return channels == o.channels && trees == o.trees; }
};

TrainedForest train_forest(const FeatureStack& stack, const LabelVolume& labels, const ForestConfig& cfg);

struct ForestPrediction {
  Volume p_fiber;
  LabelVolume labels;  // 1 iff mean P(fiber) > 0.5; an exact 0.5 tie is background
};

ForestPrediction forest_predict(const TrainedForest& forest, const FeatureStack& stack);

/// Text format: a config header line, a channel manifest line, then one line per node
/// `tree,node,kind,channel,threshold,left,right,p_fiber`. Numbers round-trip exactly.
void save_forest(const TrainedForest& forest, const std::filesystem::path& path);
TrainedForest load_forest(const std::filesystem::path& path);

}  // namespace fiberseg
