#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/tensor.hpp"

namespace frk::nn {

enum class LayerKind {
  fr_conv2d,
  fr_linear,
  relu,
  relu6,
  maxpool2d,
  adaptive_avgpool2d,
  dropout,
  batchnorm2d,
  flatten,
  residual_add,
};

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::fr_conv2d: return "fr_conv2d";
    case LayerKind::fr_linear: return "fr_linear";
    case LayerKind::relu: return "relu";
    case LayerKind::relu6: return "relu6";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::adaptive_avgpool2d: return "adaptive_avgpool2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual_add";
  }
  return "unknown";
}

struct Conv2dSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

struct LinearSpec {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool bias = true;
};

struct ReluSpec {};
struct Relu6Spec {};

struct MaxPool2dSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct AdaptiveAvgPool2dSpec {
  std::size_t out_h = 1;
  std::size_t out_w = 1;
};

struct DropoutSpec {
  double p = 0.5;
};

struct BatchNorm2dSpec {
  std::size_t channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct FlattenSpec {};

struct LayerSpec;

/// y = x + body(x); the body must preserve the activation shape.
struct ResidualSpec {
  std::vector<LayerSpec> body;
};

using LayerOp = std::variant<Conv2dSpec, LinearSpec, ReluSpec, Relu6Spec, MaxPool2dSpec,
                             AdaptiveAvgPool2dSpec, DropoutSpec, BatchNorm2dSpec, FlattenSpec,
                             ResidualSpec>;

struct LayerSpec {
  std::string name;
  LayerOp op;

  LayerKind kind() const {
    return std::visit(
        [](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Conv2dSpec>) return LayerKind::fr_conv2d;
          else if constexpr (std::is_same_v<T, LinearSpec>) return LayerKind::fr_linear;
          else if constexpr (std::is_same_v<T, ReluSpec>) return LayerKind::relu;
          else if constexpr (std::is_same_v<T, Relu6Spec>) return LayerKind::relu6;
          else if constexpr (std::is_same_v<T, MaxPool2dSpec>) return LayerKind::maxpool2d;
          else if constexpr (std::is_same_v<T, AdaptiveAvgPool2dSpec>) return LayerKind::adaptive_avgpool2d;
          else if constexpr (std::is_same_v<T, DropoutSpec>) return LayerKind::dropout;
          else if constexpr (std::is_same_v<T, BatchNorm2dSpec>) return LayerKind::batchnorm2d;
          else if constexpr (std::is_same_v<T, FlattenSpec>) return LayerKind::flatten;
          else return LayerKind::residual_add;
        },
        op);
  }
};

/// A named trainable tensor. Frequency parameters live as FreqParam
/// coefficients; the rest (batch-norm affine terms) are plain tensors.
struct ParamDecl {
  std::string name;
  Shape shape;
  bool frequency = true;
};

/// Output extent of a sliding window, floor((in + 2p - k) / s) + 1.
inline std::size_t window_output(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t padding, const std::string& where) {
  if (kernel == 0 || stride == 0) throw ShapeError(where + ": kernel and stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw ShapeError(where + ": window " + std::to_string(kernel) + " exceeds padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

inline void require_chw(const Shape& in, const std::string& where) {
  if (in.size() != 3) throw ShapeError(where + " expects (C,H,W), got " + shape_string(in));
}

}  // namespace detail

/// Per-sample output shape of one layer (batch axis excluded).
inline Shape infer_layer_shape(const LayerSpec& layer, const Shape& in) {
  const std::string& where = layer.name;
  return std::visit(
      [&](const auto& s) -> Shape {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          detail::require_chw(in, where);
          if (in[0] != s.in_channels) {
            throw ShapeError(where + ": expected " + std::to_string(s.in_channels) +
                             " input channels, got " + std::to_string(in[0]));
          }
          return {s.out_channels, window_output(in[1], s.kernel, s.stride, s.padding, where),
                  window_output(in[2], s.kernel, s.stride, s.padding, where)};
        } else if constexpr (std::is_same_v<T, LinearSpec>) {
          if (in.size() != 1 || in[0] != s.in_features) {
            throw ShapeError(where + ": expected (" + std::to_string(s.in_features) + "), got " +
                             shape_string(in));
          }
          return {s.out_features};
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          detail::require_chw(in, where);
          return {in[0], window_output(in[1], s.kernel, s.stride, 0, where),
                  window_output(in[2], s.kernel, s.stride, 0, where)};
        } else if constexpr (std::is_same_v<T, AdaptiveAvgPool2dSpec>) {
          detail::require_chw(in, where);
          return {in[0], s.out_h, s.out_w};
        } else if constexpr (std::is_same_v<T, BatchNorm2dSpec>) {
          detail::require_chw(in, where);
          if (in[0] != s.channels) throw ShapeError(where + ": channel count mismatch");
          return in;
        } else if constexpr (std::is_same_v<T, FlattenSpec>) {
          return {param_count(in)};
        } else if constexpr (std::is_same_v<T, ResidualSpec>) {
          Shape cur = in;
          for (const auto& inner : s.body) cur = infer_layer_shape(inner, cur);
          if (cur != in) {
            throw ShapeError(where + ": residual body maps " + shape_string(in) + " to " +
                             shape_string(cur));
          }
          return in;
        } else {
          return in;
        }
      },
      layer.op);
}

inline void collect_param_decls(const LayerSpec& layer, std::vector<ParamDecl>& out) {
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          out.push_back({layer.name + ".weight", {s.out_channels, s.in_channels, s.kernel, s.kernel}, true});
          if (s.bias) out.push_back({layer.name + ".bias", {s.out_channels}, true});
        } else if constexpr (std::is_same_v<T, LinearSpec>) {
          out.push_back({layer.name + ".weight", {s.out_features, s.in_features}, true});
          if (s.bias) out.push_back({layer.name + ".bias", {s.out_features}, true});
        } else if constexpr (std::is_same_v<T, BatchNorm2dSpec>) {
          out.push_back({layer.name + ".weight", {s.channels}, false});
          out.push_back({layer.name + ".bias", {s.channels}, false});
        } else if constexpr (std::is_same_v<T, ResidualSpec>) {
          for (const auto& inner : s.body) collect_param_decls(inner, out);
        }
      },
      layer.op);
}

inline json layer_to_json(const LayerSpec& layer) {
  json j = {{"name", layer.name}, {"kind", to_string(layer.kind())}};
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          j["in_channels"] = s.in_channels;
          j["out_channels"] = s.out_channels;
          j["kernel_size"] = s.kernel;
          j["stride"] = s.stride;
          j["padding"] = s.padding;
          j["bias"] = s.bias;
        } else if constexpr (std::is_same_v<T, LinearSpec>) {
          j["in_features"] = s.in_features;
          j["out_features"] = s.out_features;
          j["bias"] = s.bias;
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          j["kernel_size"] = s.kernel;
          j["stride"] = s.stride;
        } else if constexpr (std::is_same_v<T, AdaptiveAvgPool2dSpec>) {
          j["output_size"] = {s.out_h, s.out_w};
        } else if constexpr (std::is_same_v<T, DropoutSpec>) {
          j["p"] = s.p;
        } else if constexpr (std::is_same_v<T, BatchNorm2dSpec>) {
          j["num_features"] = s.channels;
          j["momentum"] = s.momentum;
          j["eps"] = s.eps;
        } else if constexpr (std::is_same_v<T, ResidualSpec>) {
          json body = json::array();
          for (const auto& inner : s.body) body.push_back(layer_to_json(inner));
          j["body"] = std::move(body);
        }
      },
      layer.op);
  return j;
}

/// Architecture description: an ordered layer list over a fixed per-sample
/// input shape. Shapes are validated when the graph is finalized, and no
/// weights are allocated until a Network is instantiated from it.
struct ModelGraph {
  std::string builder;
  std::size_t num_classes = 0;
  Shape input;
  std::vector<LayerSpec> layers;

  /// Per-sample shape after each top-level layer; throws ShapeError on the
  /// first incompatible pair.
  std::vector<std::pair<std::string, Shape>> infer_shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    Shape cur = input;
    for (const auto& layer : layers) {
      cur = infer_layer_shape(layer, cur);
      out.emplace_back(layer.name, cur);
    }
    return out;
  }

  Shape output_shape() const {
    const auto shapes = infer_shapes();
    return shapes.empty() ? input : shapes.back().second;
  }

  std::vector<ParamDecl> parameters() const {
    std::vector<ParamDecl> out;
    for (const auto& layer : layers) collect_param_decls(layer, out);
    return out;
  }

  std::size_t total_parameters() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += param_count(p.shape);
    return total;
  }

  std::size_t frequency_parameters() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) {
      if (p.frequency) total += param_count(p.shape);
    }
    return total;
  }

  json to_json() const {
    json layer_list = json::array();
    for (const auto& layer : layers) layer_list.push_back(layer_to_json(layer));
    return {{"builder", builder}, {"num_classes", num_classes}, {"input", input}, {"layers", layer_list}};
  }
};

}  // namespace frk::nn
