#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/rng.hpp"

namespace frk {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline void validate_shape(std::span<const std::size_t> shape) {
  if (shape.empty()) throw ShapeError("shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero dimension in shape " + shape_string(shape));
  }
}

/// Builds a shape from signed extents, rejecting zero and negative entries.
inline Shape checked_shape(std::span<const std::int64_t> dims) {
  Shape shape;
  shape.reserve(dims.size());
  for (auto d : dims) {
    if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d));
    shape.push_back(static_cast<std::size_t>(d));
  }
  validate_shape(shape);
  return shape;
}

inline Shape checked_shape(std::initializer_list<std::int64_t> dims) {
  return checked_shape(std::span<const std::int64_t>(dims.begin(), dims.size()));
}

/// Number of scalars held by a tensor of the given shape.
inline std::size_t param_count(std::span<const std::size_t> shape) {
  validate_shape(shape);
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::size_t param_count(std::initializer_list<std::size_t> shape) {
  return param_count(std::span<const std::size_t>(shape.begin(), shape.size()));
}

/// Dense row-major array of doubles.
///
/// A default-constructed tensor is empty (rank 0, no data) and is only
/// used as a placeholder; every other tensor satisfies
/// product(shape) == size() with all extents >= 1.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(param_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (param_count(shape_) != data_.size()) {
      throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  Shape strides() const {
    Shape s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
    return s;
  }

  std::size_t offset(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= shape_[i]) throw ShapeError("index out of bounds");
      flat = flat * shape_[i] + index[i];
    }
    return flat;
  }

  std::vector<std::size_t> unravel(std::size_t flat) const {
    if (flat >= data_.size()) throw ShapeError("flat offset out of bounds");
    std::vector<std::size_t> index(shape_.size());
    for (std::size_t i = shape_.size(); i-- > 0;) {
      index[i] = flat % shape_[i];
      flat /= shape_[i];
    }
    return index;
  }

  double& at(std::initializer_list<std::size_t> index) {
    return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
  }
  double at(std::initializer_list<std::size_t> index) const {
    return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
  }

  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor tensor_new(Shape shape, double fill) { return Tensor(std::move(shape), fill); }

inline Tensor tensor_rand_uniform(Shape shape, double lo, double hi, Rng& rng) {
  if (!(lo < hi)) throw RangeError("uniform range requires lo < hi");
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor tensor_rand_normal(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(mean, stddev);
  return t;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  require_same_shape(dst, src, "add_into");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// C (m x n) = op(A) * op(B), optionally accumulating into C.
/// A is m x k (or k x m when trans_a), B is k x n (or n x k when trans_b).
inline void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k, bool trans_a, bool trans_b,
                 bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.data() + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a[p * m + i];
        double* crow = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b.data() + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

}  // namespace frk
