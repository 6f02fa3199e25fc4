#include "mmtumor/model.hpp"

#include <algorithm>
#include <cmath>

#include "mmtumor/errors.hpp"

namespace mmtumor {

namespace {

std::size_t stem_size(std::size_t in) {
  const std::size_t conv = (in + 2 * 3 - 7) / 2 + 1;  // 7x7 stride 2 pad 3
  return (conv + 2 * 1 - 3) / 2 + 1;                  // 3x3 max-pool stride 2 pad 1
}

}  // namespace

std::array<std::size_t, 3> ModelSpec::image_head_output() const {
  const DenseNetConfig& d = image_head;
  std::size_t c = d.initial_features;
  std::size_t h = stem_size(image_height);
  std::size_t w = stem_size(image_width);
  for (std::size_t b = 0; b < d.block_layers.size(); ++b) {
    c += d.block_layers[b] * d.growth_rate;
    if (b + 1 < d.block_layers.size()) {
      c = static_cast<std::size_t>(std::floor(static_cast<double>(c) * d.compression));
      h /= 2;
      w /= 2;
    }
  }
  return {c, h, w};
}

std::size_t ModelSpec::image_feature_width() const {
  const auto [c, h, w] = image_head_output();
  return c * h * w;
}

std::size_t ModelSpec::tabular_feature_width() const {
  return tabular_widths.empty() ? tabular_inputs : tabular_widths.back();
}

bool ModelSpec::is_default() const { return *this == ModelSpec{}; }

void ModelSpec::validate() const {
  auto fail = [](const std::string& what) { throw BuildError("invalid model spec: " + what); };
  if (image_height < 8 || image_width < 8) fail("image input must be at least 8x8");
  if (image_channels == 0) fail("image_channels must be positive");
  if (tabular_inputs != kFeatureCount) {
    fail("tabular input width is " + std::to_string(tabular_inputs) + " but samples carry " +
         std::to_string(kFeatureCount) + " features");
  }
  if (output_classes != 2) fail("output_classes must be 2, got " + std::to_string(output_classes));
  const DenseNetConfig& d = image_head;
  if (d.initial_features == 0 || d.growth_rate == 0 || d.bottleneck_width == 0) {
    fail("DenseNet widths must be positive");
  }
  if (d.block_layers.empty()) fail("DenseNet needs at least one dense block");
  if (std::find(d.block_layers.begin(), d.block_layers.end(), 0) != d.block_layers.end()) {
    fail("dense blocks must have at least one layer");
  }
  if (!(d.compression > 0.0 && d.compression <= 1.0)) fail("compression must be in (0, 1]");
  std::size_t h = stem_size(image_height);
  std::size_t w = stem_size(image_width);
  for (std::size_t b = 0; b + 1 < d.block_layers.size(); ++b) {
    if (h < 2 || w < 2) fail("input too small for " + std::to_string(d.block_layers.size()) + " dense blocks");
    h /= 2;
    w /= 2;
  }
  if (image_head_output()[0] == 0) fail("compression leaves no channels");
  for (std::size_t v : tabular_widths) if (v == 0) fail("tabular head widths must be positive");
  for (std::size_t v : classifier_widths) if (v == 0) fail("classifier widths must be positive");
}

NLOHMANN_JSON_SERIALIZE_ENUM(FusionNorm, {{FusionNorm::Batch, "batch"}, {FusionNorm::Layer, "layer"}})

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{
      {"image_input_shape", {s.image_height, s.image_width, s.image_channels}},
      {"image_head",
       {{"initial_features", s.image_head.initial_features},
        {"growth_rate", s.image_head.growth_rate},
        {"block_layers", s.image_head.block_layers},
        {"compression", s.image_head.compression},
        {"bottleneck_width", s.image_head.bottleneck_width}}},
      {"tabular_inputs", s.tabular_inputs},
      {"tabular_widths", s.tabular_widths},
      {"fusion_norm", s.fusion_norm},
      {"classifier_widths", s.classifier_widths},
      {"output_classes", s.output_classes},
  };
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  const auto& shape = j.at("image_input_shape");
  s.image_height = shape.at(0).get<std::size_t>();
  s.image_width = shape.at(1).get<std::size_t>();
  s.image_channels = shape.at(2).get<std::size_t>();
  const auto& d = j.at("image_head");
  d.at("initial_features").get_to(s.image_head.initial_features);
  d.at("growth_rate").get_to(s.image_head.growth_rate);
  d.at("block_layers").get_to(s.image_head.block_layers);
  d.at("compression").get_to(s.image_head.compression);
  d.at("bottleneck_width").get_to(s.image_head.bottleneck_width);
  j.at("tabular_inputs").get_to(s.tabular_inputs);
  j.at("tabular_widths").get_to(s.tabular_widths);
  j.at("fusion_norm").get_to(s.fusion_norm);
  j.at("classifier_widths").get_to(s.classifier_widths);
  j.at("output_classes").get_to(s.output_classes);
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                 std::size_t channels) {
  Batch b;
  if (indices.empty()) throw ShapeError("cannot build an empty batch");
  const GrayImage& first = *ds[indices.front()].image;
  const std::size_t h = first.height, w = first.width;
  b.images = Tensor({indices.size(), channels, h, w});
  b.features = Tensor({indices.size(), kFeatureCount});
  b.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = ds[indices[r]];
    if (s.image->height != h || s.image->width != w) {
      throw ShapeError("sample '" + s.id + "' image size differs from the rest of the batch");
    }
    auto dst = b.images.sample(r);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < h * w; ++i) dst[c * h * w + i] = s.image->pixels[i] / 255.0;
    }
    for (std::size_t f = 0; f < kFeatureCount; ++f) b.features.sample(r)[f] = s.features[f];
    b.labels.push_back(s.label);
  }
  return b;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    auto z = logits.sample(i);
    auto out = p.sample(i);
    const double top = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      out[k] = std::exp(z[k] - top);
      sum += out[k];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

std::vector<Label> predict_class(const Tensor& probabilities) {
  std::vector<Label> out;
  out.reserve(probabilities.dim(0));
  for (std::size_t i = 0; i < probabilities.dim(0); ++i) {
    auto row = probabilities.sample(i);
    out.push_back(row[1] >= row[0] ? Label::Ill : Label::Healthy);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Model::Net {
  nn::Sequential image_head;
  nn::Sequential tabular_head;
  std::unique_ptr<nn::Layer> fusion_norm;
  nn::Sequential classifier;

  // Shape of the last Train-mode image-head output, for backward.
  std::vector<std::size_t> image_shape;
  std::size_t tabular_width = 0;
};

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), net_(std::make_unique<Net>()) {
  spec_.validate();
  Rng rng(seed);
  const DenseNetConfig& d = spec_.image_head;

  auto& stem = net_->image_head.add<nn::Conv2d>("image.stem.conv", spec_.image_channels,
                                                d.initial_features, 7, 2, 3, rng);
  stem.set_input_grad(false);
  net_->image_head.add<nn::BatchNorm>("image.stem.norm", d.initial_features);
  net_->image_head.add<nn::Relu>();
  net_->image_head.add<nn::MaxPool2d>(3, 2, 1);

  std::size_t c = d.initial_features;
  for (std::size_t b = 0; b < d.block_layers.size(); ++b) {
    const std::string block = "image.block" + std::to_string(b + 1);
    auto& dense = net_->image_head.add<nn::DenseBlock>(block, c, d.block_layers[b], d.growth_rate,
                                                       d.bottleneck_width, rng);
    c = dense.out_channels();
    if (b + 1 < d.block_layers.size()) {
      const auto reduced =
          static_cast<std::size_t>(std::floor(static_cast<double>(c) * d.compression));
      net_->image_head.add<nn::PreActConv>("image.transition" + std::to_string(b + 1), c, reduced,
                                           1, 0, rng);
      net_->image_head.add<nn::AvgPool2d>(2);
      c = reduced;
    }
  }
  net_->image_head.add<nn::BatchNorm>("image.final.norm", c);
  net_->image_head.add<nn::Relu>();

  std::size_t width = spec_.tabular_inputs;
  for (std::size_t i = 0; i < spec_.tabular_widths.size(); ++i) {
    net_->tabular_head.add<nn::Linear>("tabular.dense" + std::to_string(i + 1), width,
                                       spec_.tabular_widths[i], rng);
    net_->tabular_head.add<nn::Relu>();
    width = spec_.tabular_widths[i];
  }
  net_->tabular_width = width;

  const std::size_t fused = spec_.fused_width();
  if (spec_.fusion_norm == FusionNorm::Batch) {
    net_->fusion_norm = std::make_unique<nn::BatchNorm>("fusion.norm", fused);
  } else {
    net_->fusion_norm = std::make_unique<nn::LayerNorm>("fusion.norm", fused);
  }

  width = fused;
  for (std::size_t i = 0; i < spec_.classifier_widths.size(); ++i) {
    net_->classifier.add<nn::Linear>("classifier.dense" + std::to_string(i + 1), width,
                                     spec_.classifier_widths[i], rng);
    net_->classifier.add<nn::Relu>();
    width = spec_.classifier_widths[i];
  }
  net_->classifier.add<nn::Linear>("classifier.output", width, spec_.output_classes, rng);
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

Tensor Model::image_head_output(const Tensor& images) {
  return net_->image_head.forward(images, nn::Mode::Infer);
}

Tensor Model::forward(const Batch& batch, nn::Mode mode) {
  const Tensor& images = batch.images;
  if (images.rank() != 4) throw ShapeError("images must be (B, C, H, W), got " + images.shape_string());
  const std::size_t n = images.dim(0);
  if (n == 0) throw ShapeError("empty batch");
  if (images.dim(1) != spec_.image_channels) {
    throw ShapeError("image channel dimension is " + std::to_string(images.dim(1)) +
                     ", expected " + std::to_string(spec_.image_channels));
  }
  if (images.dim(2) != spec_.image_height) {
    throw ShapeError("image height dimension is " + std::to_string(images.dim(2)) +
                     ", expected " + std::to_string(spec_.image_height));
  }
  if (images.dim(3) != spec_.image_width) {
    throw ShapeError("image width dimension is " + std::to_string(images.dim(3)) +
                     ", expected " + std::to_string(spec_.image_width));
  }
  if (batch.features.rank() != 2 || batch.features.dim(0) != n) {
    throw ShapeError("feature batch dimension is " +
                     (batch.features.rank() ? std::to_string(batch.features.dim(0)) : std::string("missing")) +
                     ", expected " + std::to_string(n));
  }
  if (batch.features.dim(1) != spec_.tabular_inputs) {
    throw ShapeError("feature width dimension is " + std::to_string(batch.features.dim(1)) +
                     ", expected " + std::to_string(spec_.tabular_inputs));
  }
  if (!batch.labels.empty() && batch.labels.size() != n) {
    throw ShapeError("label batch dimension is " + std::to_string(batch.labels.size()) +
                     ", expected " + std::to_string(n));
  }

  const Tensor img = net_->image_head.forward(images, mode);
  const Tensor tab = net_->tabular_head.forward(batch.features, mode);
  const std::size_t img_width = img.stride0();
  const std::size_t tab_width = tab.stride0();

  Tensor fused({n, img_width + tab_width});
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = fused.sample(i);
    std::copy(img.sample(i).begin(), img.sample(i).end(), dst.begin());
    std::copy(tab.sample(i).begin(), tab.sample(i).end(), dst.begin() + static_cast<std::ptrdiff_t>(img_width));
  }
  if (mode == nn::Mode::Train) net_->image_shape = img.shape();

  const Tensor normalized = net_->fusion_norm->forward(fused, mode);
  return softmax_rows(net_->classifier.forward(normalized, mode));
}

void Model::backward(const Tensor& grad_logits) {
  if (net_->image_shape.empty()) throw TrainingError("backward() without a Train-mode forward()");
  const Tensor g_fused = net_->fusion_norm->backward(net_->classifier.backward(grad_logits));

  const std::size_t n = g_fused.dim(0);
  Tensor g_img(net_->image_shape);
  Tensor g_tab({n, net_->tabular_width});
  const std::size_t img_width = g_img.stride0();
  for (std::size_t i = 0; i < n; ++i) {
    auto src = g_fused.sample(i);
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(img_width), g_img.sample(i).begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(img_width), src.end(), g_tab.sample(i).begin());
  }
  net_->tabular_head.backward(g_tab);
  net_->image_head.backward(g_img);
}

std::vector<nn::Parameter*> Model::parameters() {
  std::vector<nn::Parameter*> out;
  net_->image_head.collect_parameters(out);
  net_->tabular_head.collect_parameters(out);
  net_->fusion_norm->collect_parameters(out);
  net_->classifier.collect_parameters(out);
  return out;
}

std::vector<nn::StateRef> Model::state() {
  std::vector<nn::StateRef> out;
  net_->image_head.collect_state(out);
  net_->tabular_head.collect_state(out);
  net_->fusion_norm->collect_state(out);
  net_->classifier.collect_state(out);
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t total = 0;
  for (const nn::Parameter* p : parameters()) total += p->value.size();
  return total;
}

void Model::zero_grad() {
  for (nn::Parameter* p : parameters()) p->grad.zero();
}

void Model::clear_cache() {
  net_->image_head.clear_cache();
  net_->tabular_head.clear_cache();
  net_->fusion_norm->clear_cache();
  net_->classifier.clear_cache();
  net_->image_shape.clear();
}

}  // namespace mmtumor
