#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/rng.hpp"
#include "frk/core/tensor.hpp"
#include "frk/freqparam/freq_param.hpp"
#include "frk/nn/graph.hpp"

namespace frk::nn {

enum class Mode { train, eval };

struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // consumed by dropout in train mode
};

/// Frequency-regularized parameter with its spatial-gradient accumulator.
struct FrSlot {
  std::string name;
  FreqParam param;
  Tensor grad;    // dL/d(spatial weight), same shape as the spatial tensor
  Tensor weight;  // reconstruction used by the last forward

  std::uint64_t built_from = 0;

  void refresh() {
    if (built_from == param.version() && !weight.empty()) return;
    weight = param.reconstruct();
    built_from = param.version();
  }
  void zero_grad() { grad = Tensor(param.spatial_shape(), 0.0); }
};

struct DenseSlot {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

struct ParamRefs {
  std::vector<FrSlot*> frequency;
  std::vector<DenseSlot*> dense;
  std::vector<std::pair<std::string, Tensor*>> buffers;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const noexcept { return name_; }
  virtual LayerKind kind() const = 0;

  /// Input carries a leading batch axis. Caches what backward needs.
  virtual Tensor forward(const Tensor& input, const ForwardContext& ctx) = 0;

  /// Returns dL/d(input) and accumulates parameter gradients.
  virtual Tensor backward(const Tensor& grad_output) = 0;

  virtual void collect(ParamRefs&) {}

 private:
  std::string name_;
};

namespace detail {

inline void require_nchw(const Tensor& x, std::size_t channels, const std::string& where) {
  if (x.rank() != 4) throw ShapeError(where + " expects (N,C,H,W), got " + shape_string(x.shape()));
  if (channels != 0 && x.dim(1) != channels) {
    throw ShapeError(where + ": expected " + std::to_string(channels) + " channels, got " +
                     std::to_string(x.dim(1)));
  }
}

}  // namespace detail

/// Cross-correlation with zero padding, realised as patch unfolding followed
/// by a matrix product with the reconstructed (O x C*k*k) weight.
class FrConv2d final : public Layer {
 public:
  FrConv2d(std::string name, const Conv2dSpec& spec, FreqParam weight, std::optional<FreqParam> bias)
      : Layer(std::move(name)), spec_(spec) {
    weight_.name = this->name() + ".weight";
    weight_.param = std::move(weight);
    weight_.zero_grad();
    if (bias) {
      bias_ = std::make_unique<FrSlot>();
      bias_->name = this->name() + ".bias";
      bias_->param = std::move(*bias);
      bias_->zero_grad();
    }
  }

  LayerKind kind() const override { return LayerKind::fr_conv2d; }
  const Conv2dSpec& spec() const { return spec_; }
  FrSlot& weight() { return weight_; }
  FrSlot* bias() { return bias_.get(); }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    detail::require_nchw(input, spec_.in_channels, name());
    const std::size_t n = input.dim(0);
    in_h_ = input.dim(2);
    in_w_ = input.dim(3);
    out_h_ = window_output(in_h_, spec_.kernel, spec_.stride, spec_.padding, name());
    out_w_ = window_output(in_w_, spec_.kernel, spec_.stride, spec_.padding, name());
    weight_.refresh();
    if (bias_) bias_->refresh();

    const std::size_t patch = spec_.in_channels * spec_.kernel * spec_.kernel;
    const std::size_t positions = out_h_ * out_w_;
    columns_.assign(n, std::vector<double>(patch * positions));
    Tensor out(Shape{n, spec_.out_channels, out_h_, out_w_}, 0.0);
    const std::size_t in_stride = spec_.in_channels * in_h_ * in_w_;
    const std::size_t out_stride = spec_.out_channels * positions;
    for (std::size_t b = 0; b < n; ++b) {
      unfold(input.data().subspan(b * in_stride, in_stride), columns_[b]);
      auto y = out.data().subspan(b * out_stride, out_stride);
      gemm(weight_.weight.data(), columns_[b], y, spec_.out_channels, positions, patch, false, false, false);
      if (bias_) {
        for (std::size_t o = 0; o < spec_.out_channels; ++o) {
          const double bv = bias_->weight[o];
          for (std::size_t p = 0; p < positions; ++p) y[o * positions + p] += bv;
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    const std::size_t n = columns_.size();
    const std::size_t patch = spec_.in_channels * spec_.kernel * spec_.kernel;
    const std::size_t positions = out_h_ * out_w_;
    if (grad_output.shape() != Shape{n, spec_.out_channels, out_h_, out_w_}) {
      throw ShapeError(name() + ": upstream gradient shape mismatch");
    }
    Tensor grad_input(Shape{n, spec_.in_channels, in_h_, in_w_}, 0.0);
    std::vector<double> grad_columns(patch * positions);
    const std::size_t in_stride = spec_.in_channels * in_h_ * in_w_;
    const std::size_t out_stride = spec_.out_channels * positions;
    for (std::size_t b = 0; b < n; ++b) {
      const auto dy = grad_output.data().subspan(b * out_stride, out_stride);
      // dW (O x patch) += dY (O x P) * cols^T (P x patch)
      gemm(dy, columns_[b], weight_.grad.data(), spec_.out_channels, patch, positions, false, true, true);
      if (bias_) {
        for (std::size_t o = 0; o < spec_.out_channels; ++o) {
          double acc = 0.0;
          for (std::size_t p = 0; p < positions; ++p) acc += dy[o * positions + p];
          bias_->grad[o] += acc;
        }
      }
      // dcols (patch x P) = W^T (patch x O) * dY (O x P)
      gemm(weight_.weight.data(), dy, grad_columns, patch, positions, spec_.out_channels, true, false, false);
      fold(grad_columns, grad_input.data().subspan(b * in_stride, in_stride));
    }
    return grad_input;
  }

  void collect(ParamRefs& refs) override {
    refs.frequency.push_back(&weight_);
    if (bias_) refs.frequency.push_back(bias_.get());
  }

 private:
  // columns[(c*k + i)*k + j][oy*out_w + ox] = x[c][oy*s + i - p][ox*s + j - p]
  void unfold(std::span<const double> x, std::vector<double>& columns) const {
    const std::size_t k = spec_.kernel;
    const std::size_t positions = out_h_ * out_w_;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          double* row = columns.data() + ((c * k + i) * k + j) * positions;
          for (std::size_t oy = 0; oy < out_h_; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec_.stride + i) -
                                      static_cast<std::ptrdiff_t>(spec_.padding);
            for (std::size_t ox = 0; ox < out_w_; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec_.stride + j) -
                                        static_cast<std::ptrdiff_t>(spec_.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(in_h_) &&
                                  ix < static_cast<std::ptrdiff_t>(in_w_);
              row[oy * out_w_ + ox] =
                  inside ? x[(c * in_h_ + static_cast<std::size_t>(iy)) * in_w_ + static_cast<std::size_t>(ix)]
                         : 0.0;
            }
          }
        }
      }
    }
  }

  void fold(const std::vector<double>& columns, std::span<double> dx) const {
    const std::size_t k = spec_.kernel;
    const std::size_t positions = out_h_ * out_w_;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double* row = columns.data() + ((c * k + i) * k + j) * positions;
          for (std::size_t oy = 0; oy < out_h_; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec_.stride + i) -
                                      static_cast<std::ptrdiff_t>(spec_.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h_)) continue;
            for (std::size_t ox = 0; ox < out_w_; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec_.stride + j) -
                                        static_cast<std::ptrdiff_t>(spec_.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w_)) continue;
              dx[(c * in_h_ + static_cast<std::size_t>(iy)) * in_w_ + static_cast<std::size_t>(ix)] +=
                  row[oy * out_w_ + ox];
            }
          }
        }
      }
    }
  }

  Conv2dSpec spec_;
  FrSlot weight_;
  std::unique_ptr<FrSlot> bias_;
  std::vector<std::vector<double>> columns_;
  std::size_t in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

/// y = x W^T + b with W reconstructed from its coefficients.
class FrLinear final : public Layer {
 public:
  FrLinear(std::string name, const LinearSpec& spec, FreqParam weight, std::optional<FreqParam> bias)
      : Layer(std::move(name)), spec_(spec) {
    weight_.name = this->name() + ".weight";
    weight_.param = std::move(weight);
    weight_.zero_grad();
    if (bias) {
      bias_ = std::make_unique<FrSlot>();
      bias_->name = this->name() + ".bias";
      bias_->param = std::move(*bias);
      bias_->zero_grad();
    }
  }

  LayerKind kind() const override { return LayerKind::fr_linear; }
  const LinearSpec& spec() const { return spec_; }
  FrSlot& weight() { return weight_; }
  FrSlot* bias() { return bias_.get(); }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    if (input.rank() != 2 || input.dim(1) != spec_.in_features) {
      throw ShapeError(name() + ": expected (N," + std::to_string(spec_.in_features) + "), got " +
                       shape_string(input.shape()));
    }
    weight_.refresh();
    if (bias_) bias_->refresh();
    input_ = input;
    const std::size_t n = input.dim(0);
    Tensor out(Shape{n, spec_.out_features}, 0.0);
    gemm(input.data(), weight_.weight.data(), out.data(), n, spec_.out_features, spec_.in_features,
         false, true, false);
    if (bias_) {
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < spec_.out_features; ++o) out[b * spec_.out_features + o] += bias_->weight[o];
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    const std::size_t n = input_.dim(0);
    if (grad_output.shape() != Shape{n, spec_.out_features}) {
      throw ShapeError(name() + ": upstream gradient shape mismatch");
    }
    // dW (out x in) += dY^T (out x N) * X (N x in)
    gemm(grad_output.data(), input_.data(), weight_.grad.data(), spec_.out_features, spec_.in_features,
         n, true, false, true);
    if (bias_) {
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < spec_.out_features; ++o) bias_->grad[o] += grad_output[b * spec_.out_features + o];
      }
    }
    Tensor grad_input(Shape{n, spec_.in_features}, 0.0);
    gemm(grad_output.data(), weight_.weight.data(), grad_input.data(), n, spec_.in_features,
         spec_.out_features, false, false, false);
    return grad_input;
  }

  void collect(ParamRefs& refs) override {
    refs.frequency.push_back(&weight_);
    if (bias_) refs.frequency.push_back(bias_.get());
  }

 private:
  LinearSpec spec_;
  FrSlot weight_;
  std::unique_ptr<FrSlot> bias_;
  Tensor input_;
};

/// Elementwise clamp to [0, cap]; cap = +inf gives ReLU, 6 gives ReLU6.
class ClampedRelu final : public Layer {
 public:
  ClampedRelu(std::string name, double cap) : Layer(std::move(name)), cap_(cap) {}

  LayerKind kind() const override { return std::isinf(cap_) ? LayerKind::relu : LayerKind::relu6; }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    pass_.assign(input.size(), 0);
    Tensor out = input;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = out[i];
      if (v <= 0.0) {
        out[i] = 0.0;
      } else if (v >= cap_) {
        out[i] = cap_;
      } else {
        pass_[i] = 1;
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    Tensor g = grad_output;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!pass_[i]) g[i] = 0.0;
    }
    return g;
  }

 private:
  double cap_;
  std::vector<unsigned char> pass_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::string name, const MaxPool2dSpec& spec) : Layer(std::move(name)), spec_(spec) {}

  LayerKind kind() const override { return LayerKind::maxpool2d; }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    detail::require_nchw(input, 0, name());
    in_shape_ = input.shape();
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t oh = window_output(h, spec_.kernel, spec_.stride, 0, name());
    const std::size_t ow = window_output(w, spec_.kernel, spec_.stride, 0, name());
    Tensor out(Shape{n, c, oh, ow}, 0.0);
    argmax_.assign(out.size(), 0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = base + oy * spec_.stride * w + ox * spec_.stride;
          for (std::size_t i = 0; i < spec_.kernel; ++i) {
            for (std::size_t j = 0; j < spec_.kernel; ++j) {
              const std::size_t at = base + (oy * spec_.stride + i) * w + ox * spec_.stride + j;
              if (input[at] > best || std::isnan(input[at])) {
                best = input[at];
                best_at = at;
              }
            }
          }
          const std::size_t o = (plane * oh + oy) * ow + ox;
          out[o] = best;
          argmax_[o] = best_at;
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    Tensor g(in_shape_, 0.0);
    for (std::size_t o = 0; o < grad_output.size(); ++o) g[argmax_[o]] += grad_output[o];
    return g;
  }

 private:
  MaxPool2dSpec spec_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

/// Bins follow [floor(i*H/out), ceil((i+1)*H/out)).
class AdaptiveAvgPool2d final : public Layer {
 public:
  AdaptiveAvgPool2d(std::string name, const AdaptiveAvgPool2dSpec& spec) : Layer(std::move(name)), spec_(spec) {}

  LayerKind kind() const override { return LayerKind::adaptive_avgpool2d; }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    detail::require_nchw(input, 0, name());
    in_shape_ = input.shape();
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    Tensor out(Shape{n, c, spec_.out_h, spec_.out_w}, 0.0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t oy = 0; oy < spec_.out_h; ++oy) {
        const auto [y0, y1] = bin(oy, h, spec_.out_h);
        for (std::size_t ox = 0; ox < spec_.out_w; ++ox) {
          const auto [x0, x1] = bin(ox, w, spec_.out_w);
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) acc += input[(plane * h + y) * w + x];
          }
          out[(plane * spec_.out_h + oy) * spec_.out_w + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    const std::size_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    Tensor g(in_shape_, 0.0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t oy = 0; oy < spec_.out_h; ++oy) {
        const auto [y0, y1] = bin(oy, h, spec_.out_h);
        for (std::size_t ox = 0; ox < spec_.out_w; ++ox) {
          const auto [x0, x1] = bin(ox, w, spec_.out_w);
          const double share = grad_output[(plane * spec_.out_h + oy) * spec_.out_w + ox] /
                               static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) g[(plane * h + y) * w + x] += share;
          }
        }
      }
    }
    return g;
  }

 private:
  static std::pair<std::size_t, std::size_t> bin(std::size_t i, std::size_t in, std::size_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
  }

  AdaptiveAvgPool2dSpec spec_;
  Shape in_shape_;
};

/// Inverted dropout: scales kept units by 1/(1-p) in training, identity in eval.
class Dropout final : public Layer {
 public:
  Dropout(std::string name, const DropoutSpec& spec) : Layer(std::move(name)), spec_(spec) {
    if (!(spec.p >= 0.0 && spec.p < 1.0)) throw RangeError(this->name() + ": dropout p must lie in [0, 1)");
  }

  LayerKind kind() const override { return LayerKind::dropout; }

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override {
    if (ctx.mode == Mode::eval || spec_.p == 0.0) {
      scale_.clear();
      return input;
    }
    if (ctx.rng == nullptr) throw ArgumentError(name() + ": training-mode dropout needs an rng");
    const double keep_scale = 1.0 / (1.0 - spec_.p);
    scale_.resize(input.size());
    Tensor out = input;
    for (std::size_t i = 0; i < out.size(); ++i) {
      scale_[i] = ctx.rng->uniform() < spec_.p ? 0.0 : keep_scale;
      out[i] *= scale_[i];
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    if (scale_.empty()) return grad_output;
    Tensor g = grad_output;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale_[i];
    return g;
  }

 private:
  DropoutSpec spec_;
  std::vector<double> scale_;
};

/// Batch statistics in training (running stats updated with momentum and the
/// unbiased variance), running statistics in eval.
class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(std::string name, const BatchNorm2dSpec& spec)
      : Layer(std::move(name)),
        spec_(spec),
        running_mean_(Shape{spec.channels}, 0.0),
        running_var_(Shape{spec.channels}, 1.0) {
    gamma_.name = this->name() + ".weight";
    gamma_.value = Tensor(Shape{spec.channels}, 1.0);
    gamma_.zero_grad();
    beta_.name = this->name() + ".bias";
    beta_.value = Tensor(Shape{spec.channels}, 0.0);
    beta_.zero_grad();
  }

  LayerKind kind() const override { return LayerKind::batchnorm2d; }
  DenseSlot& gamma() { return gamma_; }
  DenseSlot& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override {
    detail::require_nchw(input, spec_.channels, name());
    in_shape_ = input.shape();
    training_ = ctx.mode == Mode::train;
    const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    const auto count = static_cast<double>(n * hw);
    xhat_ = Tensor(input.shape(), 0.0);
    inv_std_.assign(c, 0.0);
    Tensor out(input.shape(), 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = running_mean_[ch];
      double var = running_var_[ch];
      if (training_) {
        double sum = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < hw; ++p) sum += input[(b * c + ch) * hw + p];
        }
        mean = sum / count;
        double sq = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < hw; ++p) {
            const double d = input[(b * c + ch) * hw + p] - mean;
            sq += d * d;
          }
        }
        var = sq / count;
        const double unbiased = count > 1.0 ? sq / (count - 1.0) : var;
        running_mean_[ch] = (1.0 - spec_.momentum) * running_mean_[ch] + spec_.momentum * mean;
        running_var_[ch] = (1.0 - spec_.momentum) * running_var_[ch] + spec_.momentum * unbiased;
      }
      inv_std_[ch] = 1.0 / std::sqrt(var + spec_.eps);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t at = (b * c + ch) * hw + p;
          xhat_[at] = (input[at] - mean) * inv_std_[ch];
          out[at] = gamma_.value[ch] * xhat_[at] + beta_.value[ch];
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_output) override {
    const std::size_t n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
    const auto count = static_cast<double>(n * hw);
    Tensor g(in_shape_, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0;
      double sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t at = (b * c + ch) * hw + p;
          sum_dy += grad_output[at];
          sum_dy_xhat += grad_output[at] * xhat_[at];
        }
      }
      gamma_.grad[ch] += sum_dy_xhat;
      beta_.grad[ch] += sum_dy;
      const double scale = gamma_.value[ch] * inv_std_[ch];
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t at = (b * c + ch) * hw + p;
          g[at] = training_ ? scale * (grad_output[at] - sum_dy / count - xhat_[at] * sum_dy_xhat / count)
                            : scale * grad_output[at];
        }
      }
    }
    return g;
  }

  void collect(ParamRefs& refs) override {
    refs.dense.push_back(&gamma_);
    refs.dense.push_back(&beta_);
    refs.buffers.emplace_back(name() + ".running_mean", &running_mean_);
    refs.buffers.emplace_back(name() + ".running_var", &running_var_);
  }

 private:
  BatchNorm2dSpec spec_;
  DenseSlot gamma_;
  DenseSlot beta_;
  Tensor running_mean_;
  Tensor running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  Shape in_shape_;
  bool training_ = false;
};

class Flatten final : public Layer {
 public:
  explicit Flatten(std::string name) : Layer(std::move(name)) {}

  LayerKind kind() const override { return LayerKind::flatten; }

  Tensor forward(const Tensor& input, const ForwardContext&) override {
    in_shape_ = input.shape();
    return input.reshaped(Shape{input.dim(0), input.size() / input.dim(0)});
  }

  Tensor backward(const Tensor& grad_output) override { return grad_output.reshaped(in_shape_); }

 private:
  Shape in_shape_;
};

/// y = x + body(x)
class Residual final : public Layer {
 public:
  Residual(std::string name, std::vector<std::unique_ptr<Layer>> body)
      : Layer(std::move(name)), body_(std::move(body)) {}

  LayerKind kind() const override { return LayerKind::residual_add; }

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override {
    Tensor cur = input;
    for (auto& layer : body_) cur = layer->forward(cur, ctx);
    require_same_shape(cur, input, "residual_add");
    return cur + input;
  }

  Tensor backward(const Tensor& grad_output) override {
    Tensor g = grad_output;
    for (auto it = body_.rbegin(); it != body_.rend(); ++it) g = (*it)->backward(g);
    return g + grad_output;
  }

  void collect(ParamRefs& refs) override {
    for (auto& layer : body_) layer->collect(refs);
  }

  const std::vector<std::unique_ptr<Layer>>& body() const { return body_; }

 private:
  std::vector<std::unique_ptr<Layer>> body_;
};

/// Instantiates a runtime layer; weights come from `weights` when present
/// (checkpoint load) or from a He-style init drawn from `rng`.
inline std::unique_ptr<Layer> make_layer(
    const LayerSpec& spec, Rng& rng,
    const std::function<std::optional<FreqParam>(const std::string&)>& weights) {
  const auto fetch = [&](const std::string& pname, const Shape& shape, bool is_bias) -> FreqParam {
    if (weights) {
      if (auto stored = weights(pname)) {
        if (stored->spatial_shape() != shape) {
          throw ShapeError(pname + ": stored shape " + shape_string(stored->spatial_shape()) +
                           " vs expected " + shape_string(shape));
        }
        return std::move(*stored);
      }
    }
    return is_bias ? FreqParam::zeros(shape) : FreqParam::init(shape, 1.0, rng);
  };
  return std::visit(
      [&](const auto& s) -> std::unique_ptr<Layer> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          if (s.kernel == 0 || s.stride == 0) throw ShapeError(spec.name + ": kernel/stride must be >= 1");
          FreqParam w = fetch(spec.name + ".weight", {s.out_channels, s.in_channels, s.kernel, s.kernel}, false);
          std::optional<FreqParam> b;
          if (s.bias) b = fetch(spec.name + ".bias", {s.out_channels}, true);
          return std::make_unique<FrConv2d>(spec.name, s, std::move(w), std::move(b));
        } else if constexpr (std::is_same_v<T, LinearSpec>) {
          FreqParam w = fetch(spec.name + ".weight", {s.out_features, s.in_features}, false);
          std::optional<FreqParam> b;
          if (s.bias) b = fetch(spec.name + ".bias", {s.out_features}, true);
          return std::make_unique<FrLinear>(spec.name, s, std::move(w), std::move(b));
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          return std::make_unique<ClampedRelu>(spec.name, std::numeric_limits<double>::infinity());
        } else if constexpr (std::is_same_v<T, Relu6Spec>) {
          return std::make_unique<ClampedRelu>(spec.name, 6.0);
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          return std::make_unique<MaxPool2d>(spec.name, s);
        } else if constexpr (std::is_same_v<T, AdaptiveAvgPool2dSpec>) {
          return std::make_unique<AdaptiveAvgPool2d>(spec.name, s);
        } else if constexpr (std::is_same_v<T, DropoutSpec>) {
          return std::make_unique<Dropout>(spec.name, s);
        } else if constexpr (std::is_same_v<T, BatchNorm2dSpec>) {
          return std::make_unique<BatchNorm2d>(spec.name, s);
        } else if constexpr (std::is_same_v<T, FlattenSpec>) {
          return std::make_unique<Flatten>(spec.name);
        } else {
          std::vector<std::unique_ptr<Layer>> body;
          for (const auto& inner : s.body) body.push_back(make_layer(inner, rng, weights));
          return std::make_unique<Residual>(spec.name, std::move(body));
        }
      },
      spec.op);
}

}  // namespace frk::nn
