#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/freqparam/freq_param.hpp"

namespace frk {

struct NamedFreqParam {
  std::string name;
  const FreqParam* param = nullptr;
};

struct CompressionEntry {
  std::string name;
  std::size_t original_count = 0;
  std::size_t kept_count = 0;
};

struct CompressionReport {
  std::vector<CompressionEntry> entries;
  std::size_t original_total = 0;
  std::size_t kept_total = 0;

  double ratio() const {
    return static_cast<double>(original_total) / static_cast<double>(kept_total);
  }
};

inline CompressionReport compression_report(const std::vector<NamedFreqParam>& params) {
  if (params.empty()) throw ArgumentError("compression report needs at least one parameter");
  CompressionReport report;
  for (const auto& [name, p] : params) {
    report.entries.push_back({name, p->total(), p->keep()});
    report.original_total += p->total();
    report.kept_total += p->keep();
  }
  return report;
}

/// Per-parameter target for a keep fraction: ceil(fraction * size), at least 1.
inline std::size_t keep_for_fraction(std::size_t size, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw RangeError("keep fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(size) - 1e-9));
  return std::min(size, std::max<std::size_t>(k, 1));
}

/// Splits a global keep budget over parameters proportionally to size
/// (largest remainder, ties to the lower index), with every parameter
/// keeping at least one coefficient. The result sums to exactly `total_keep`.
inline std::vector<std::size_t> allocate_keep_total(const std::vector<std::size_t>& sizes,
                                                    std::size_t total_keep) {
  if (sizes.empty()) throw ArgumentError("no parameters to allocate over");
  std::size_t grand = 0;
  for (auto s : sizes) grand += s;
  if (total_keep < sizes.size() || total_keep > grand) {
    throw RangeError("keep total " + std::to_string(total_keep) + " outside [" +
                     std::to_string(sizes.size()) + ", " + std::to_string(grand) + "]");
  }
  const std::size_t n = sizes.size();
  std::vector<std::size_t> keep(n);
  std::vector<std::uint64_t> remainder(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto scaled = static_cast<unsigned __int128>(total_keep) * sizes[i];
    keep[i] = static_cast<std::size_t>(scaled / grand);
    remainder[i] = static_cast<std::uint64_t>(scaled % grand);
    if (keep[i] < 1) {
      keep[i] = 1;
      remainder[i] = 0;
    }
    assigned += keep[i];
  }
  // Too few: hand out units by largest remainder.
  while (assigned < total_keep) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (keep[i] >= sizes[i]) continue;
      if (best == n || remainder[i] > remainder[best]) best = i;
    }
    ++keep[best];
    remainder[best] = 0;
    ++assigned;
  }
  // Too many (min-1 bumps): take back from the largest allocations.
  while (assigned > total_keep) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (keep[i] <= 1) continue;
      if (best == n || keep[i] > keep[best]) best = i;
    }
    --keep[best];
    --assigned;
  }
  return keep;
}

}  // namespace frk
