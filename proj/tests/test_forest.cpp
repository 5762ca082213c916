#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "fiberseg/forest.hpp"
#include "test_util.hpp"

using namespace fiberseg;

namespace {

struct Toy {
  FeatureStack stack;
  LabelVolume labels;
};

// Channel 0 separates the classes at 0.5; channel 1 is noise.
Toy separable(Dims d, std::uint64_t seed, double flip = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Toy t;
  t.stack.dims = d;
  t.stack.names = {"signal", "noise"};
  t.stack.data.resize(2 * d.count());
  t.labels = LabelVolume(d, 1.0, 0);
  for (std::size_t i = 0; i < d.count(); ++i) {
    const float s = u(rng);
    t.stack.data[i] = s;
    t.stack.data[d.count() + i] = u(rng);
    const bool fiber = s > 0.5f;
    t.labels[i] = (u(rng) < flip) ? !fiber : fiber;
  }
  return t;
}

ForestConfig small_config() {
  ForestConfig c;
  c.n_trees = 5;
  c.max_depth = 6;
  c.min_samples_leaf = 2;
  c.samples_per_class = 300;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Forest, SingleClassThrows) {
  Toy t = separable({6, 6, 6}, 1);
  for (auto& x : t.labels.data()) x = 0;
  EXPECT_THROW(train_forest(t.stack, t.labels, small_config()), InvalidArgument);
}

TEST(Forest, ConfigValidation) {
  ForestConfig c;
  c.n_trees = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ForestConfig{};
  c.samples_per_class = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Forest, StumpFindsPerfectSplit) {
  const Toy t = separable({8, 8, 8}, 2);
  ForestConfig c = small_config();
  c.n_trees = 1;
  c.max_depth = 1;
  c.features_per_split = 2;
  const TrainedForest f = train_forest(t.stack, t.labels, c);
  ASSERT_EQ(f.trees.size(), 1u);
  const TreeNode& root = f.trees[0].nodes[0];
  EXPECT_EQ(root.channel, 0);
  EXPECT_GT(root.threshold, 0.45f);
  EXPECT_LT(root.threshold, 0.55f);
  const ForestPrediction p = forest_predict(f, t.stack);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < t.labels.size(); ++i) wrong += p.labels[i] != t.labels[i];
  EXPECT_LT(wrong, t.labels.size() / 50);
}

TEST(Forest, Deterministic) {
  const Toy t = separable({8, 8, 8}, 4, 0.1);
  const TrainedForest a = train_forest(t.stack, t.labels, small_config());
  const TrainedForest b = train_forest(t.stack, t.labels, small_config());
  EXPECT_TRUE(a == b);
  ForestConfig other = small_config();
  other.seed = 99;
  EXPECT_FALSE(a == train_forest(t.stack, t.labels, other));
}

TEST(Forest, ProbabilitiesInRangeAndConsistent) {
  const Toy t = separable({8, 8, 8}, 5, 0.1);
  const TrainedForest f = train_forest(t.stack, t.labels, small_config());
  const ForestPrediction p = forest_predict(f, t.stack);
  for (std::size_t i = 0; i < p.p_fiber.size(); ++i) {
    double mean = 0.0;
    for (const auto& tree : f.trees) mean += tree.predict(t.stack, i);
    mean /= f.trees.size();
    EXPECT_NEAR(p.p_fiber[i], mean, 1e-6);
    EXPECT_EQ(p.labels[i], mean > 0.5 ? 1 : 0);
  }
}

TEST(Forest, HeldOutBeatsMajority) {
  const Toy train = separable({10, 10, 10}, 6, 0.1);
  const Toy test = separable({10, 10, 10}, 7, 0.1);
  const TrainedForest f = train_forest(train.stack, train.labels, small_config());
  const ForestPrediction p = forest_predict(f, test.stack);
  std::size_t correct = 0, ones = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    correct += p.labels[i] == test.labels[i];
    ones += test.labels[i];
  }
  const double majority = std::max(ones, test.labels.size() - ones) / double(test.labels.size());
  EXPECT_GT(correct / double(test.labels.size()), majority + 0.2);
}

TEST(Forest, SaveLoadRoundTrip) {
  testutil::TempDir dir("forest");
  const Toy t = separable({8, 8, 8}, 8, 0.2);
  const TrainedForest f = train_forest(t.stack, t.labels, small_config());
  save_forest(f, dir.file("f.txt"));
  const TrainedForest g = load_forest(dir.file("f.txt"));
  EXPECT_TRUE(f == g);
  const ForestPrediction a = forest_predict(f, t.stack);
  const ForestPrediction b = forest_predict(g, t.stack);
  EXPECT_EQ(a.p_fiber, b.p_fiber);
}

TEST(Forest, ChannelManifestMismatchThrows) {
  const Toy t = separable({6, 6, 6}, 9);
  const TrainedForest f = train_forest(t.stack, t.labels, small_config());
  FeatureStack other = t.stack;
  other.names = {"signal", "other"};
  EXPECT_THROW(forest_predict(f, other), ShapeMismatch);
}

TEST(Forest, CorruptFileThrows) {
  testutil::TempDir dir("forest_bad");
  {
    std::ofstream out(dir.file("bad.txt"));
    out << "FOREST1 n_trees=1\nchannels=a\n0,0,split,5,0.5,1,2,0.5\n";
  }
  EXPECT_THROW(load_forest(dir.file("bad.txt")), FormatError);
  {
    std::ofstream out(dir.file("nothing.txt"));
    out << "hello\n";
  }
  EXPECT_THROW(load_forest(dir.file("nothing.txt")), FormatError);
}
