#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmtumor/data.hpp"
#include "mmtumor/nn/layers.hpp"
#include "mmtumor/tensor.hpp"

namespace mmtumor {

struct DenseNetConfig {
  std::size_t initial_features = 64;
  std::size_t growth_rate = 32;
  std::vector<std::size_t> block_layers = {6, 12, 24, 16};
  double compression = 0.5;
  /// Bottleneck 1x1 convolutions emit bottleneck_width * growth_rate channels.
  std::size_t bottleneck_width = 4;

  friend bool operator==(const DenseNetConfig&, const DenseNetConfig&) = default;
};

enum class FusionNorm { Batch, Layer };

struct ModelSpec {
  std::size_t image_height = 240;
  std::size_t image_width = 240;
  std::size_t image_channels = 3;
  DenseNetConfig image_head;
  std::size_t tabular_inputs = kFeatureCount;
  std::vector<std::size_t> tabular_widths = {64, 32};
  FusionNorm fusion_norm = FusionNorm::Batch;
  std::vector<std::size_t> classifier_widths = {256, 64};
  std::size_t output_classes = 2;

  /// Throws BuildError on an inconsistent spec.
  void validate() const;

  /// (channels, height, width) of the image head's final feature map.
  std::array<std::size_t, 3> image_head_output() const;
  std::size_t image_feature_width() const;
  std::size_t tabular_feature_width() const;
  std::size_t fused_width() const { return image_feature_width() + tabular_feature_width(); }

  bool is_default() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

/// One mini-batch. Images are NCHW with values scaled to [0, 1].
struct Batch {
  Tensor images;    // (B, C, H, W)
  Tensor features;  // (B, 13)
  std::vector<Label> labels;  // empty at inference

  std::size_t size() const { return images.rank() ? images.dim(0) : 0; }
};

/// Stacks the given samples into a batch: the grayscale image is divided by
/// 255 and replicated into every input channel.
Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                 std::size_t channels);

/// Two-head network: DenseNet image head and ReLU MLP tabular head,
/// concatenated, normalized, then a ReLU MLP ending in a 2-way softmax.
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  const ModelSpec& spec() const noexcept { return spec_; }

  /// Row-stochastic (B, 2) matrix. Train mode caches activations for
  /// backward() and normalizes with batch statistics.
  Tensor forward(const Batch& batch, nn::Mode mode);

  /// Raw image-head output (B, C, H, W), inference mode.
  Tensor image_head_output(const Tensor& images);

  /// Backpropagates d(loss)/d(logits) through the most recent Train-mode
  /// forward. Gradients accumulate until zero_grad().
  void backward(const Tensor& grad_logits);
  void zero_grad();

  std::vector<nn::Parameter*> parameters();
  /// Parameters plus normalization running statistics, in a fixed order.
  std::vector<nn::StateRef> state();
  std::size_t parameter_count();

  void clear_cache();

 private:
  struct Net;
  ModelSpec spec_;
  std::unique_ptr<Net> net_;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Row-wise argmax; an exact tie predicts Ill.
std::vector<Label> predict_class(const Tensor& probabilities);

/// Numerically stable row softmax of (B, K) logits.
Tensor softmax_rows(const Tensor& logits);

}  // namespace mmtumor
