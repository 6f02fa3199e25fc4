#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmtumor/rng.hpp"
#include "mmtumor/tensor.hpp"

namespace mmtumor::nn {

enum class Mode { Train, Infer };

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

/// Named tensor that belongs in a checkpoint (parameters and running
/// statistics alike).
using StateRef = std::pair<std::string, Tensor*>;

/// A differentiable layer. forward() in Train mode caches what backward()
/// needs; Infer mode leaves the layer untouched so concurrent inference on a
/// shared instance is safe. backward() accumulates into parameter grads and
/// returns the gradient with respect to the layer input.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
  virtual void collect_state(std::vector<StateRef>& /*out*/) {}
  virtual void clear_cache() {}
};

class Conv2d : public Layer {
 public:
  /// No bias (every convolution here feeds a normalization). He-normal init.
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override { out.push_back(&weight_); }
  void collect_state(std::vector<StateRef>& out) override { out.emplace_back(weight_.name, &weight_.value); }
  void clear_cache() override { input_ = Tensor(); }

  /// Skips the input-gradient computation (first layer of a network).
  void set_input_grad(bool enabled) { input_grad_ = enabled; }

  std::size_t out_size(std::size_t in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

  // Helpers shared with fused units; `input` is one sample (Cin, H, W).
  void forward_sample(const double* input, std::size_t h, std::size_t w, double* out,
                      std::vector<double>& col) const;
  void backward_sample(const double* input, std::size_t h, std::size_t w, const double* grad_out,
                       double* grad_input, std::vector<double>& col);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }

 private:
  bool pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }

  std::size_t in_channels_, out_channels_, kernel_, stride_, padding_;
  Parameter weight_;  // (Cout, Cin * k * k)
  bool input_grad_ = true;
  Tensor input_;
};

/// Batch normalization over axis 1 of (N, C) or (N, C, H, W) inputs.
/// Train mode normalizes with batch statistics and updates the running
/// estimates; Infer mode uses the running estimates only.
class BatchNorm : public Layer {
 public:
  BatchNorm(std::string name, std::size_t channels, double eps = 1e-5, double momentum = 0.1);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override { xhat_ = Tensor(); }

  /// Normalizes without the affine step; fills `inv_std` per channel.
  void normalize(const Tensor& x, Mode mode, Tensor& xhat, std::vector<double>& inv_std);
  /// Gradient w.r.t. the BN input given the gradient w.r.t. its output.
  Tensor backward_from(const Tensor& xhat, const std::vector<double>& inv_std,
                       const Tensor& grad_out);

  const Parameter& gamma() const { return gamma_; }
  const Parameter& beta() const { return beta_; }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  std::string name_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

/// Per-sample normalization over the feature axis of an (N, F) input, with a
/// learned per-feature scale and shift.
class LayerNorm : public Layer {
 public:
  LayerNorm(std::string name, std::size_t features, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override { xhat_ = Tensor(); }

 private:
  std::size_t features_;
  double eps_;
  Parameter gamma_, beta_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class Relu : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void clear_cache() override { output_ = Tensor(); }

 private:
  Tensor output_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t padding)
      : kernel_(kernel), stride_(stride), padding_(padding) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void clear_cache() override { argmax_.clear(); }

  std::size_t out_size(std::size_t in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

 private:
  std::size_t kernel_, stride_, padding_;
  std::vector<std::size_t> input_shape_;
  std::vector<std::size_t> argmax_;  // flat input index per output cell
};

/// Non-overlapping average pooling (kernel == stride, no padding; trailing
/// rows/columns that do not fill a window are dropped).
class AvgPool2d : public Layer {
 public:
  explicit AvgPool2d(std::size_t kernel) : kernel_(kernel) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::size_t kernel_;
  std::vector<std::size_t> input_shape_;
};

/// y = x W^T + b. Glorot-uniform weights, zero bias.
class Linear : public Layer {
 public:
  Linear(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override { input_ = Tensor(); }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_, out_;
  Parameter weight_;  // (out, in)
  Parameter bias_;
  Tensor input_;
};

/// BN -> ReLU -> Conv with a single cached tensor (the normalized input);
/// the activation is recomputed during backward.
class PreActConv : public Layer {
 public:
  PreActConv(const std::string& name, std::size_t in_channels, std::size_t out_channels,
             std::size_t kernel, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override;

 private:
  BatchNorm norm_;
  Conv2d conv_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override;

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Densely connected block: layer l sees the concatenation of the block
/// input and every earlier layer's output, and appends `growth` channels.
class DenseBlock : public Layer {
 public:
  DenseBlock(const std::string& name, std::size_t in_channels, std::size_t layers,
             std::size_t growth, std::size_t bottleneck_width, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void clear_cache() override;

  std::size_t out_channels() const { return in_channels_ + layers_.size() * growth_; }

 private:
  struct Unit {
    PreActConv bottleneck;  // 1x1, c_in -> bottleneck_width * growth
    PreActConv conv;        // 3x3, -> growth
  };
  std::size_t in_channels_, growth_;
  std::vector<std::unique_ptr<Unit>> layers_;
};

// Channel-range helpers for (N, C, H, W) tensors.
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
void write_channels(Tensor& dst, const Tensor& src, std::size_t begin);
void add_channels(Tensor& dst, const Tensor& src, std::size_t begin);

}  // namespace mmtumor::nn
