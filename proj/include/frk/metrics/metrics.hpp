#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/metrics/porter.hpp"

namespace frk::metrics {

using TokenSeq = std::vector<std::string>;

/// Lowercases, drops .,!?;:"() and splits on whitespace. "sos"/"eos"
/// markers at either end are removed.
inline TokenSeq tokenize(std::string_view caption) {
  TokenSeq out;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char raw : caption) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      flush();
    } else if (std::string_view(".,!?;:\"()").find(raw) == std::string_view::npos) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  std::size_t first = 0, last = out.size();
  const auto marker = [](const std::string& t) { return t == "sos" || t == "eos"; };
  while (first < last && marker(out[first])) ++first;
  while (last > first && marker(out[last - 1])) --last;
  return TokenSeq(out.begin() + static_cast<std::ptrdiff_t>(first), out.begin() + static_cast<std::ptrdiff_t>(last));
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts ngram_counts(const TokenSeq& seq, std::size_t n) {
  NgramCounts counts;
  if (n == 0 || seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[std::vector<std::string>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                      seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

/// Sum over candidate n-grams of min(count in candidate, count in reference).
inline std::size_t clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t total = 0;
  for (const auto& [gram, count] : cand) {
    const auto it = ref.find(gram);
    if (it != ref.end()) total += std::min(count, it->second);
  }
  return total;
}

inline void require_order(std::size_t n, std::size_t max_n, const char* what) {
  if (n < 1 || n > max_n) {
    throw ArgumentError(std::string(what) + " order must be in 1.." + std::to_string(max_n));
  }
}

/// Clipped n-gram precision times min(1, exp(1 - |ref|/|cand|)).
inline double bleu_n(const TokenSeq& cand, const TokenSeq& ref, std::size_t n) {
  require_order(n, 4, "bleu");
  if (cand.size() < n) return 0.0;
  const std::size_t total = cand.size() - n + 1;
  const double precision =
      static_cast<double>(clipped_overlap(ngram_counts(cand, n), ngram_counts(ref, n))) / static_cast<double>(total);
  const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size())));
  return precision * bp;
}

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline double rouge_n(const TokenSeq& cand, const TokenSeq& ref, std::size_t n) {
  require_order(n, 2, "rouge");
  if (cand.size() < n || ref.size() < n) return 0.0;
  const double overlap = static_cast<double>(clipped_overlap(ngram_counts(cand, n), ngram_counts(ref, n)));
  return f1(overlap / static_cast<double>(cand.size() - n + 1), overlap / static_cast<double>(ref.size() - n + 1));
}

/// O(|a||b|) time, O(|b|) memory.
inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const TokenSeq& cand, const TokenSeq& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(cand, ref));
  return f1(lcs / static_cast<double>(cand.size()), lcs / static_cast<double>(ref.size()));
}

/// Candidate index -> reference index, or npos when unmatched.
struct Alignment {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> to_ref;
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Exact stage then Porter-stem stage. Each candidate token, left to right,
/// takes the leftmost unused reference token it matches.
inline Alignment meteor_align(const TokenSeq& cand, const TokenSeq& ref) {
  Alignment a;
  a.to_ref.assign(cand.size(), Alignment::npos);
  std::vector<bool> used(ref.size(), false);
  const auto stage = [&](const TokenSeq& c, const TokenSeq& r) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (a.to_ref[i] != Alignment::npos) continue;
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (!used[j] && c[i] == r[j]) {
          used[j] = true;
          a.to_ref[i] = j;
          ++a.matches;
          break;
        }
      }
    }
  };
  stage(cand, ref);
  TokenSeq cs, rs;
  for (const auto& t : cand) cs.push_back(porter_stem(t));
  for (const auto& t : ref) rs.push_back(porter_stem(t));
  stage(cs, rs);
  // a chunk is a maximal run adjacent in both sequences
  std::size_t prev = Alignment::npos;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const std::size_t j = a.to_ref[i];
    if (j == Alignment::npos) {
      prev = Alignment::npos;
      continue;
    }
    if (prev == Alignment::npos || j != prev + 1) ++a.chunks;
    prev = j;
  }
  return a;
}

inline double meteor(const TokenSeq& cand, const TokenSeq& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const Alignment a = meteor_align(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return fmean * (1.0 - penalty);
}

struct MetricReport {
  double bleu[4] = {0, 0, 0, 0};
  double rouge_1 = 0, rouge_2 = 0, rouge_l = 0;
  double meteor = 0;

  double bleu_avg() const { return (bleu[0] + bleu[1] + bleu[2] + bleu[3]) / 4.0; }
  double rouge_avg() const { return (rouge_1 + rouge_2 + rouge_l) / 3.0; }

  MetricReport& operator+=(const MetricReport& o) {
    for (int i = 0; i < 4; ++i) bleu[i] += o.bleu[i];
    rouge_1 += o.rouge_1;
    rouge_2 += o.rouge_2;
    rouge_l += o.rouge_l;
    meteor += o.meteor;
    return *this;
  }

  MetricReport& operator/=(double d) {
    for (double& b : bleu) b /= d;
    rouge_1 /= d;
    rouge_2 /= d;
    rouge_l /= d;
    meteor /= d;
    return *this;
  }

  json to_json() const {
    return {{"bleu", {{"bleu_1", bleu[0]}, {"bleu_2", bleu[1]}, {"bleu_3", bleu[2]}, {"bleu_4", bleu[3]}}},
            {"rouge", {{"rouge_1", rouge_1}, {"rouge_2", rouge_2}, {"rouge_l", rouge_l}}},
            {"meteor", meteor},
            {"averages", {{"bleu_avg", bleu_avg()}, {"rouge_avg", rouge_avg()}}}};
  }
};

inline MetricReport score_pair(const TokenSeq& cand, const TokenSeq& ref) {
  MetricReport r;
  for (std::size_t n = 1; n <= 4; ++n) r.bleu[n - 1] = bleu_n(cand, ref, n);
  r.rouge_1 = rouge_n(cand, ref, 1);
  r.rouge_2 = rouge_n(cand, ref, 2);
  r.rouge_l = metrics::rouge_l(cand, ref);
  r.meteor = metrics::meteor(cand, ref);
  return r;
}

inline constexpr std::size_t kReferencesPerImage = 5;

/// Every metric against each reference separately, then the mean.
inline MetricReport score_image(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
  if (refs.size() != kReferencesPerImage) {
    throw CardinalityError("expected " + std::to_string(kReferencesPerImage) + " references, got " +
                           std::to_string(refs.size()));
  }
  MetricReport total;
  for (const auto& ref : refs) total += score_pair(cand, ref);
  total /= static_cast<double>(refs.size());
  return total;
}

struct ImageScore {
  std::string key;
  std::string prediction;
  MetricReport report;
};

struct CorpusReport {
  MetricReport mean;
  std::vector<ImageScore> per_image;

  json to_json() const {
    json j = mean.to_json();
    j["images"] = per_image.size();
    json rows = json::array();
    for (const auto& img : per_image) {
      json row = img.report.to_json();
      row["image"] = img.key;
      row["prediction"] = img.prediction;
      rows.push_back(std::move(row));
    }
    j["per_image"] = std::move(rows);
    return j;
  }
};

/// Keys missing from `ground_truth`, in sorted order.
inline std::vector<std::string> missing_keys(const std::map<std::string, std::string>& predictions,
                                             const std::map<std::string, std::vector<std::string>>& ground_truth) {
  std::vector<std::string> out;
  for (const auto& [key, _] : predictions) {
    if (!ground_truth.count(key)) out.push_back(key);
  }
  return out;
}

/// Per-image reports in key order, averaged arithmetically.
inline CorpusReport score_corpus(const std::map<std::string, std::string>& predictions,
                                 const std::map<std::string, std::vector<std::string>>& ground_truth) {
  if (predictions.empty()) throw ArgumentError("no predictions to score");
  CorpusReport report;
  for (const auto& [key, caption] : predictions) {
    const auto it = ground_truth.find(key);
    if (it == ground_truth.end()) throw LookupError("prediction for unknown image " + key);
    std::vector<TokenSeq> refs;
    for (const auto& r : it->second) refs.push_back(tokenize(r));
    MetricReport img;
    try {
      img = score_image(tokenize(caption), refs);
    } catch (const CardinalityError& e) {
      throw CardinalityError(key + ": " + e.what());
    }
    report.mean += img;
    report.per_image.push_back({key, caption, img});
  }
  report.mean /= static_cast<double>(predictions.size());
  return report;
}

}  // namespace frk::metrics
