#pragma once

#include <cmath>
#include <cstddef>
#include <utility>

#include "frk/core/error.hpp"

namespace frk {

/// Dynamic tail truncation: each step removes ceil(decay * remaining gap)
/// coefficients, so per-step removals shrink as the total removed grows.
struct TruncationSchedule {
  std::size_t total_size = 0;
  std::size_t target_keep = 0;
  double decay = 0.5;
  std::size_t current_keep = 0;

  static TruncationSchedule make(std::size_t total_size, std::size_t target_keep, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw RangeError("decay must lie in (0, 1)");
    if (target_keep < 1 || target_keep > total_size) {
      throw RangeError("target keep must lie in [1, total size]");
    }
    return {total_size, target_keep, decay, total_size};
  }

  bool done() const noexcept { return current_keep == target_keep; }
};

struct ScheduleStep {
  TruncationSchedule next;
  std::size_t truncate_now = 0;
};

inline ScheduleStep schedule_step(const TruncationSchedule& s) {
  if (s.current_keep < s.target_keep) throw RangeError("schedule already below its target");
  const std::size_t gap = s.current_keep - s.target_keep;
  if (gap == 0) return {s, 0};
  // the epsilon absorbs products like 0.7 * 10 = 7.000000000000001
  auto cut = static_cast<std::size_t>(std::ceil(s.decay * static_cast<double>(gap) - 1e-9));
  cut = std::min(std::max<std::size_t>(cut, 1), gap);
  TruncationSchedule next = s;
  next.current_keep -= cut;
  return {next, cut};
}

}  // namespace frk
