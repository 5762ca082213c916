#pragma once

// Residual fully convolutional segmentation networks without pooling:
//   stem conv (1 -> stem_width) -> residual blocks -> head conv (-> 2 channels)
// All convolutions are same-padded with extent 3 per axis, so the logits have
// the spatial shape of the input. Channel 0 is background, channel 1 fiber.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fiberseg/autodiff.hpp"

namespace fiberseg {

enum class Variant { kShallow, kDeep };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  int dimensionality = 3;  // 2: slice-wise, 3: volumetric
  Variant variant = Variant::kShallow;
  std::vector<std::int64_t> block_widths{16, 32, 64};
  std::int64_t stem_width = 16;

  /// Shallow: [16, 32, 64]; deep: [16, 16, 32, 32, 64, 64]; stem 16.
  static ModelConfig standard(int dimensionality, Variant variant);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
class Network {
 public:
  explicit Network(ModelConfig cfg);

  /// He-normal weights, zero biases, unit BN scale; deterministic in `seed`.
  void init(std::uint64_t seed);

  /// x: (N, 1, H, W) for 2D models or (N, 1, D, H, W) for 3D models.
  ad::Tensor<T> forward(const ad::Tensor<T>& x, ad::Mode mode);
  /// Back-propagates dL/dlogits through the whole chain; returns dL/dx.
  ad::Tensor<T> backward(const ad::Tensor<T>& dlogits);

  /// Learnable tensors in a fixed order.
  std::vector<std::pair<std::string, ad::Tensor<T>*>> parameters();
  /// Batch-norm running statistics in a fixed order.
  std::vector<std::pair<std::string, std::vector<T>*>> buffers();
  std::size_t parameter_count() const;
  void zero_grad();

  const ModelConfig& config() const { return config_; }

  ad::Conv<T> stem;
  std::vector<ad::ResidualBlock<T>> blocks;
  ad::Conv<T> head;

 private:
  ModelConfig config_;
};

using Model = Network<float>;

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct CheckpointInfo {
  std::int64_t iterations = 0;
  std::uint64_t seed = 0;
};

struct LoadedCheckpoint {
  Model model;
  CheckpointInfo info;
};

/// Text manifest (config, run info, named sections with element counts) ending
/// in a line `end`, followed by the little-endian float32 payload.
void save_checkpoint(Model& model, const CheckpointInfo& info, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 std::optional<int> expected_dimensionality = std::nullopt);

}  // namespace fiberseg
