#pragma once

#include <atomic>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <memory>
#include <utility>

#include "frk/core/error.hpp"
#include "frk/core/rng.hpp"
#include "frk/core/tensor.hpp"
#include "frk/spectral/dct.hpp"
#include "frk/spectral/zigzag.hpp"

namespace frk {

/// 2-D folding used for every parameter: rank-1 (n) -> 1 x n, otherwise
/// the leading axis stays as rows and the rest collapses into columns, so a
/// conv kernel (O, I, kh, kw) becomes O x (I*kh*kw).
inline std::pair<std::size_t, std::size_t> fold_shape(const Shape& spatial) {
  validate_shape(spatial);
  if (spatial.size() == 1) return {1, spatial[0]};
  return {spatial[0], param_count(spatial) / spatial[0]};
}

/// A trainable tensor kept as frequency coefficients.
///
/// Invariant: coefficients whose zigzag rank is >= keep() are exactly zero,
/// and 1 <= keep() <= total().
class FreqParam {
 public:
  FreqParam() = default;

  FreqParam(Shape spatial_shape, Tensor coeffs, std::size_t keep)
      : spatial_shape_(std::move(spatial_shape)), coeffs_(std::move(coeffs)), keep_(keep) {
    const auto [rows, cols] = fold_shape(spatial_shape_);
    if (coeffs_.shape() != Shape{rows, cols}) {
      throw ShapeError("coefficients " + shape_string(coeffs_.shape()) + " do not fold " +
                       shape_string(spatial_shape_));
    }
    if (keep_ < 1 || keep_ > coeffs_.size()) throw ArgumentError("keep must be in [1, rows*cols]");
    zigzag_ = std::make_shared<const ZigzagOrder>(rows, cols);
    zero_tail(keep_);
  }

  /// He-style normal init in the spatial domain (std = scale * sqrt(2 / fan_in)),
  /// transformed into coefficients. Nothing is truncated yet.
  static FreqParam init(const Shape& spatial_shape, double init_scale, Rng& rng) {
    const auto [rows, cols] = fold_shape(spatial_shape);
    const std::size_t fan_in = spatial_shape.size() == 1 ? spatial_shape[0] : cols;
    const double stddev = init_scale * std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor spatial = tensor_rand_normal(Shape{rows, cols}, 0.0, stddev, rng);
    return from_spatial(spatial_shape, std::move(spatial));
  }

  static FreqParam zeros(const Shape& spatial_shape) {
    const auto [rows, cols] = fold_shape(spatial_shape);
    return FreqParam(spatial_shape, Tensor(Shape{rows, cols}, 0.0), rows * cols);
  }

  static FreqParam from_spatial(const Shape& spatial_shape, Tensor spatial) {
    const auto [rows, cols] = fold_shape(spatial_shape);
    if (spatial.size() != rows * cols) throw ShapeError("spatial tensor size mismatch");
    Tensor coeffs = dct2(std::move(spatial).reshaped(Shape{rows, cols}));
    return FreqParam(spatial_shape, std::move(coeffs), rows * cols);
  }

  const Shape& spatial_shape() const noexcept { return spatial_shape_; }
  std::size_t rows() const { return coeffs_.dim(0); }
  std::size_t cols() const { return coeffs_.dim(1); }
  std::size_t total() const noexcept { return coeffs_.size(); }
  std::size_t keep() const noexcept { return keep_; }
  const Tensor& coeffs() const noexcept { return coeffs_; }
  const ZigzagOrder& zigzag() const { return *zigzag_; }

  bool is_kept(std::size_t flat) const { return zigzag_->rank(flat) < keep_; }

  Tensor mask() const { return zigzag_mask(rows(), cols(), keep_); }

  /// idct2(mask * coeffs) in the original spatial shape.
  Tensor reconstruct() const { return idct2(coeffs_).reshaped(spatial_shape_); }

  /// Exact gradient w.r.t. the coefficients given dL/d(spatial):
  /// mask * dct2(fold(spatial_grad)). Zero outside the kept prefix.
  Tensor grad_to_freq(const Tensor& spatial_grad) const {
    if (spatial_grad.shape() != spatial_shape_) {
      throw ShapeError("spatial gradient " + shape_string(spatial_grad.shape()) +
                       " does not match parameter " + shape_string(spatial_shape_));
    }
    Tensor g = dct2(spatial_grad.reshaped(Shape{rows(), cols()}));
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!is_kept(i)) g[i] = 0.0;
    }
    return g;
  }

  /// Zeroes every coefficient past zigzag prefix `new_keep`. Never regrows.
  void truncate(std::size_t new_keep) {
    if (new_keep > keep_) {
      throw MonotonicityError("cannot raise keep from " + std::to_string(keep_) + " to " +
                              std::to_string(new_keep));
    }
    if (new_keep < 1) throw ArgumentError("keep must stay >= 1");
    keep_ = new_keep;
    version_ = next_version();
    zero_tail(new_keep);
  }

  /// coeffs -= lr * freq_grad on kept positions only.
  void sgd_step(const Tensor& freq_grad, double lr) {
    require_same_shape(coeffs_, freq_grad, "sgd_step");
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      if (is_kept(i)) coeffs_[i] -= lr * freq_grad[i];
    }
    version_ = next_version();
  }

  /// Direct coefficient write, used by gradient checks. Tail cells are
  /// rejected to keep the invariant.
  void set_coeff(std::size_t flat, double value) {
    if (!is_kept(flat)) throw ArgumentError("coefficient outside the kept prefix");
    coeffs_[flat] = value;
    version_ = next_version();
  }

 /// Changes whenever the coefficients do; copies share it.
  std::uint64_t version() const noexcept { return version_; }

 private:
  static std::uint64_t next_version() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  void zero_tail(std::size_t keep) {
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      if (zigzag_->rank(i) >= keep) coeffs_[i] = 0.0;
    }
  }

  Shape spatial_shape_;
  Tensor coeffs_;
  std::size_t keep_ = 0;
  std::uint64_t version_ = next_version();
  std::shared_ptr<const ZigzagOrder> zigzag_;
};

inline FreqParam freqparam_init(const Shape& spatial_shape, double init_scale, Rng& rng) {
  return FreqParam::init(spatial_shape, init_scale, rng);
}

inline Tensor reconstruct(const FreqParam& p) { return p.reconstruct(); }

inline Tensor grad_to_freq(const FreqParam& p, const Tensor& spatial_grad) {
  return p.grad_to_freq(spatial_grad);
}

inline FreqParam apply_truncation(FreqParam p, std::size_t new_keep) {
  p.truncate(new_keep);
  return p;
}

}  // namespace frk
