#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/tensor.hpp"

namespace frk {

/// Zigzag scan over a rows x cols grid.
///
/// Anti-diagonals s = i + j are visited in increasing order. Even diagonals
/// run bottom-left to top-right, odd ones top-right to bottom-left, so the
/// first step is (0,0) -> (0,1). Only the per-diagonal start ranks are
/// stored; rank and position lookups are O(1) / O(log) without
/// materialising the permutation, which matters for 4096 x 9216 weights.
class ZigzagOrder {
 public:
  ZigzagOrder(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
    if (rows == 0 || cols == 0) throw ShapeError("zigzag order needs positive extents");
    const std::size_t diagonals = rows + cols - 1;
    diag_start_.resize(diagonals + 1, 0);
    for (std::size_t s = 0; s < diagonals; ++s) {
      const auto [lo, hi] = row_range(s);
      diag_start_[s + 1] = diag_start_[s] + (hi - lo + 1);
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return rows_ * cols_; }

  /// Position in the scan of the cell at flat row-major offset `flat`.
  std::size_t rank(std::size_t flat) const {
    const std::size_t i = flat / cols_;
    const std::size_t j = flat % cols_;
    const std::size_t s = i + j;
    const auto [lo, hi] = row_range(s);
    const std::size_t within = (s % 2 == 1) ? i - lo : hi - i;
    return diag_start_[s] + within;
  }

  /// Flat row-major offset of the k-th cell in the scan.
  std::size_t at(std::size_t k) const {
    if (k >= size()) throw ArgumentError("zigzag position out of range");
    const auto it = std::upper_bound(diag_start_.begin(), diag_start_.end(), k);
    const auto s = static_cast<std::size_t>(it - diag_start_.begin()) - 1;
    const auto [lo, hi] = row_range(s);
    const std::size_t within = k - diag_start_[s];
    const std::size_t i = (s % 2 == 1) ? lo + within : hi - within;
    return i * cols_ + (s - i);
  }

  std::vector<std::size_t> order() const {
    std::vector<std::size_t> out;
    out.reserve(size());
    for (std::size_t s = 0; s + 1 < diag_start_.size(); ++s) {
      const auto [lo, hi] = row_range(s);
      if (s % 2 == 1) {
        for (std::size_t i = lo; i <= hi; ++i) out.push_back(i * cols_ + (s - i));
      } else {
        for (std::size_t i = hi + 1; i-- > lo;) out.push_back(i * cols_ + (s - i));
      }
    }
    return out;
  }

  std::vector<std::pair<std::size_t, std::size_t>> cells() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto flat : order()) out.emplace_back(flat / cols_, flat % cols_);
    return out;
  }

 private:
  std::pair<std::size_t, std::size_t> row_range(std::size_t s) const {
    const std::size_t lo = s + 1 > cols_ ? s + 1 - cols_ : 0;
    const std::size_t hi = std::min(s, rows_ - 1);
    return {lo, hi};
  }

  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::size_t> diag_start_;
};

inline ZigzagOrder zigzag_order(std::size_t rows, std::size_t cols) { return ZigzagOrder(rows, cols); }

/// Binary rows x cols mask with ones on the first `keep` zigzag cells.
inline Tensor zigzag_mask(std::size_t rows, std::size_t cols, std::size_t keep) {
  const ZigzagOrder zz(rows, cols);
  if (keep > zz.size()) throw ArgumentError("keep exceeds rows*cols");
  Tensor mask(Shape{rows, cols}, 0.0);
  for (std::size_t flat = 0; flat < zz.size(); ++flat) {
    if (zz.rank(flat) < keep) mask[flat] = 1.0;
  }
  return mask;
}

}  // namespace frk
