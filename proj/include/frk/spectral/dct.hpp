#pragma once

#include <fftw3.h>

#include <cmath>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/tensor.hpp"

namespace frk {

enum class DctBackend {
  automatic,  // direct for small matrices, FFTW above a work threshold
  direct,
  fftw,
};

namespace detail {

/// Row-major N x N orthonormal DCT-II matrix: C[k][n] = a_k cos(pi (2n+1) k / 2N).
inline std::vector<double> dct_matrix(std::size_t n) {
  std::vector<double> c(n * n);
  const double dc = std::sqrt(1.0 / static_cast<double>(n));
  const double ac = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    const double scale = k == 0 ? dc : ac;
    for (std::size_t i = 0; i < n; ++i) {
      c[k * n + i] = scale * std::cos(std::numbers::pi * static_cast<double>((2 * i + 1) * k) /
                                      (2.0 * static_cast<double>(n)));
    }
  }
  return c;
}

inline void dct2_direct(Tensor& x, bool inverse) {
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  const auto cr = dct_matrix(rows);
  const auto cc = dct_matrix(cols);
  std::vector<double> tmp(rows * cols);
  if (!inverse) {
    // Y = Cr X Cc^T
    gemm(x.data(), cc, tmp, rows, cols, cols, false, true, false);
    gemm(cr, tmp, x.data(), rows, cols, rows, false, false, false);
  } else {
    // X = Cr^T Y Cc
    gemm(x.data(), cc, tmp, rows, cols, cols, false, false, false);
    gemm(cr, tmp, x.data(), rows, cols, rows, true, false, false);
  }
}

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

inline void dct2_fftw(Tensor& x, bool inverse) {
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  double* buf = x.data().data();
  const auto axis_scale = [inverse](std::size_t n) {
    std::vector<double> s(n);
    const double nd = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (!inverse) {
        // FFTW's REDFT10 is 2 * sum x_n cos(.), so halve the orthonormal factor
        s[k] = 0.5 * (k == 0 ? std::sqrt(1.0 / nd) : std::sqrt(2.0 / nd));
      } else {
        // REDFT01 computes x_0 + 2 * sum_{k>0} x_k cos(.)
        s[k] = k == 0 ? std::sqrt(1.0 / nd) : std::sqrt(1.0 / (2.0 * nd));
      }
    }
    return s;
  };
  const auto sr = axis_scale(rows);
  const auto sc = axis_scale(cols);

  const fftw_r2r_kind kind = inverse ? FFTW_REDFT01 : FFTW_REDFT10;
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    // UNALIGNED keeps the chosen codelets independent of buffer alignment,
    // so results are bit-identical run to run.
    plan = fftw_plan_r2r_2d(static_cast<int>(rows), static_cast<int>(cols), buf, buf, kind, kind,
                            FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  if (plan == nullptr) throw ShapeError("fftw could not plan a transform of this size");

  const auto apply_scale = [&] {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) buf[r * cols + c] *= sr[r] * sc[c];
    }
  };
  if (inverse) apply_scale();
  fftw_execute(plan);
  if (!inverse) apply_scale();

  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan);
}

inline bool use_fftw(std::size_t rows, std::size_t cols, DctBackend backend) {
  if (backend == DctBackend::direct) return false;
  if (backend == DctBackend::fftw) return true;
  const double work = static_cast<double>(rows) * static_cast<double>(cols) *
                      static_cast<double>(rows + cols);
  return work > double(1 << 22);
}

inline void require_matrix(const Tensor& x, const char* what) {
  if (x.rank() != 2) {
    throw ShapeError(std::string(what) + " expects a 2-D tensor, got " + shape_string(x.shape()));
  }
}

}  // namespace detail

/// Orthonormal 2-D DCT-II (rows then columns). Linear and norm preserving.
inline Tensor dct2(Tensor x, DctBackend backend = DctBackend::automatic) {
  detail::require_matrix(x, "dct2");
  if (detail::use_fftw(x.dim(0), x.dim(1), backend)) {
    detail::dct2_fftw(x, false);
  } else {
    detail::dct2_direct(x, false);
  }
  return x;
}

/// Inverse of dct2 (orthonormal DCT-III, i.e. the transpose).
inline Tensor idct2(Tensor c, DctBackend backend = DctBackend::automatic) {
  detail::require_matrix(c, "idct2");
  if (detail::use_fftw(c.dim(0), c.dim(1), backend)) {
    detail::dct2_fftw(c, true);
  } else {
    detail::dct2_direct(c, true);
  }
  return c;
}

}  // namespace frk
