#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/nn/graph.hpp"

namespace frk::nn {

/// Mobile inverted residual block configuration.
struct MBConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t expand_ratio = 1;
  std::size_t kernel_size = 3;
  std::size_t stride = 1;

  bool use_residual() const { return stride == 1 && in_channels == out_channels; }
  std::size_t hidden_channels() const { return in_channels * expand_ratio; }
};

namespace detail {

inline void require_classes(std::size_t num_classes) {
  if (num_classes < 1) throw ArgumentError("num_classes must be >= 1");
}

/// fr_conv2d (bias-free) + batchnorm2d + relu6.
inline void conv_bn_relu(std::vector<LayerSpec>& out, const std::string& prefix, std::size_t in,
                         std::size_t outc, std::size_t kernel, std::size_t stride, std::size_t padding) {
  out.push_back({prefix + ".0", Conv2dSpec{in, outc, kernel, stride, padding, false}});
  out.push_back({prefix + ".1", BatchNorm2dSpec{outc}});
  out.push_back({prefix + ".2", Relu6Spec{}});
}

inline std::vector<LayerSpec> mbconv_layers(const MBConvSpec& b, const std::string& prefix) {
  std::vector<LayerSpec> layers;
  const std::size_t hidden = b.hidden_channels();
  std::size_t idx = 0;
  if (b.expand_ratio != 1) conv_bn_relu(layers, prefix + ".layers." + std::to_string(idx++), b.in_channels, hidden, 1, 1, 0);
  conv_bn_relu(layers, prefix + ".layers." + std::to_string(idx++), hidden, hidden, b.kernel_size, b.stride,
               b.kernel_size / 2);
  layers.push_back({prefix + ".layers." + std::to_string(idx++), Conv2dSpec{hidden, b.out_channels, 1, 1, 0, false}});
  layers.push_back({prefix + ".layers." + std::to_string(idx++), BatchNorm2dSpec{b.out_channels}});
  return layers;
}

}  // namespace detail

inline ModelGraph build_alexnet_fr(std::size_t num_classes) {
  detail::require_classes(num_classes);
  ModelGraph g{"alexnet", num_classes, {3, 224, 224}, {}};
  auto& l = g.layers;
  l.push_back({"features.0", Conv2dSpec{3, 64, 11, 4, 2, true}});
  l.push_back({"features.1", ReluSpec{}});
  l.push_back({"features.2", MaxPool2dSpec{3, 2}});
  l.push_back({"features.3", Conv2dSpec{64, 192, 5, 1, 2, true}});
  l.push_back({"features.4", ReluSpec{}});
  l.push_back({"features.5", MaxPool2dSpec{3, 2}});
  l.push_back({"features.6", Conv2dSpec{192, 384, 3, 1, 1, true}});
  l.push_back({"features.7", ReluSpec{}});
  l.push_back({"features.8", Conv2dSpec{384, 256, 3, 1, 1, true}});
  l.push_back({"features.9", ReluSpec{}});
  l.push_back({"features.10", Conv2dSpec{256, 256, 3, 1, 1, true}});
  l.push_back({"features.11", ReluSpec{}});
  l.push_back({"features.12", MaxPool2dSpec{3, 2}});
  l.push_back({"avgpool", AdaptiveAvgPool2dSpec{6, 6}});
  l.push_back({"flatten", FlattenSpec{}});
  l.push_back({"classifier.0", DropoutSpec{0.5}});
  l.push_back({"classifier.1", LinearSpec{256 * 6 * 6, 4096, true}});
  l.push_back({"classifier.2", ReluSpec{}});
  l.push_back({"classifier.3", DropoutSpec{0.5}});
  l.push_back({"classifier.4", LinearSpec{4096, 4096, true}});
  l.push_back({"classifier.5", ReluSpec{}});
  l.push_back({"classifier.6", LinearSpec{4096, num_classes, true}});
  g.infer_shapes();
  return g;
}

/// Block table: the five listed blocks followed by the remaining B0 stages
/// (80 x3, 112 x3, 192 x4, 320 x1) so the head receives 320 channels.
inline std::vector<MBConvSpec> efficientnetb0_blocks() {
  return {
      {32, 16, 1, 3, 1},   {16, 24, 6, 3, 2},   {24, 24, 6, 3, 1},   {24, 40, 6, 5, 2},
      {40, 40, 6, 5, 1},   {40, 80, 6, 3, 2},   {80, 80, 6, 3, 1},   {80, 80, 6, 3, 1},
      {80, 112, 6, 5, 1},  {112, 112, 6, 5, 1}, {112, 112, 6, 5, 1}, {112, 192, 6, 5, 2},
      {192, 192, 6, 5, 1}, {192, 192, 6, 5, 1}, {192, 192, 6, 5, 1}, {192, 320, 6, 3, 1},
  };
}

inline ModelGraph build_efficientnetb0_fr(std::size_t num_classes) {
  detail::require_classes(num_classes);
  ModelGraph g{"efficientnetb0", num_classes, {3, 224, 224}, {}};
  auto& l = g.layers;
  detail::conv_bn_relu(l, "stem", 3, 32, 3, 2, 1);
  const auto blocks = efficientnetb0_blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "blocks." + std::to_string(i);
    auto body = detail::mbconv_layers(blocks[i], prefix);
    if (blocks[i].use_residual()) {
      l.push_back({prefix, ResidualSpec{std::move(body)}});
    } else {
      for (auto& layer : body) l.push_back(std::move(layer));
    }
  }
  detail::conv_bn_relu(l, "head", 320, 1280, 1, 1, 0);
  l.push_back({"avg_pool", AdaptiveAvgPool2dSpec{1, 1}});
  l.push_back({"flatten", FlattenSpec{}});
  l.push_back({"classifier", LinearSpec{1280, num_classes, true}});
  g.infer_shapes();
  return g;
}

inline ModelGraph build_lenet5_fr(std::size_t num_classes) {
  detail::require_classes(num_classes);
  ModelGraph g{"lenet5", num_classes, {1, 32, 32}, {}};
  auto& l = g.layers;
  l.push_back({"conv1", Conv2dSpec{1, 6, 5, 1, 0, true}});
  l.push_back({"relu1", ReluSpec{}});
  l.push_back({"pool1", MaxPool2dSpec{2, 2}});
  l.push_back({"conv2", Conv2dSpec{6, 16, 5, 1, 0, true}});
  l.push_back({"relu2", ReluSpec{}});
  l.push_back({"pool2", MaxPool2dSpec{2, 2}});
  l.push_back({"flatten", FlattenSpec{}});
  l.push_back({"fc1", LinearSpec{400, 120, true}});
  l.push_back({"relu3", ReluSpec{}});
  l.push_back({"fc2", LinearSpec{120, 84, true}});
  l.push_back({"relu4", ReluSpec{}});
  l.push_back({"fc3", LinearSpec{84, num_classes, true}});
  g.infer_shapes();
  return g;
}

/// Small classifier over 1x8x8 images used by the desk-scale training demo.
inline ModelGraph build_tiny_convnet(std::size_t num_classes) {
  detail::require_classes(num_classes);
  ModelGraph g{"tiny_convnet", num_classes, {1, 8, 8}, {}};
  auto& l = g.layers;
  l.push_back({"conv1", Conv2dSpec{1, 4, 3, 1, 1, true}});
  l.push_back({"relu1", ReluSpec{}});
  l.push_back({"pool1", MaxPool2dSpec{2, 2}});
  l.push_back({"flatten", FlattenSpec{}});
  l.push_back({"fc", LinearSpec{64, num_classes, true}});
  g.infer_shapes();
  return g;
}

inline const std::vector<std::string>& builder_names() {
  static const std::vector<std::string> names{"alexnet", "efficientnetb0", "lenet5", "tiny_convnet"};
  return names;
}

inline ModelGraph build_by_name(const std::string& name, std::size_t num_classes) {
  if (name == "alexnet") return build_alexnet_fr(num_classes);
  if (name == "efficientnetb0") return build_efficientnetb0_fr(num_classes);
  if (name == "lenet5") return build_lenet5_fr(num_classes);
  if (name == "tiny_convnet") return build_tiny_convnet(num_classes);
  throw UsageError("unknown architecture '" + name + "' (expected alexnet, efficientnetb0, lenet5, tiny_convnet)");
}

}  // namespace frk::nn
