#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/rng.hpp"

namespace frk::dataio {

/// image path -> captions, in order of appearance
using CaptionSet = std::map<std::string, std::vector<std::string>>;
/// image path -> predicted caption
using PredictionSet = std::map<std::string, std::string>;

/// Joins COCO-style "images" (id, file_name) with "annotations"
/// (image_id, caption). Images without captions are dropped. Blank input is
/// an empty set.
inline CaptionSet ingest_annotations(std::string_view text, const std::string& source = "annotations") {
  CaptionSet out;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) return out;
  const json root = parse_strict_json(std::string(text), source);
  if (!root.is_object()) throw FormatError(source + ": top level must be an object");

  std::map<std::int64_t, std::string> paths;
  if (root.contains("images")) {
    for (const auto& img : root.at("images")) {
      if (!img.contains("id") || !img.contains("file_name")) throw FormatError(source + ": image record needs id and file_name");
      paths[img.at("id").get<std::int64_t>()] = img.at("file_name").get<std::string>();
    }
  }
  if (root.contains("annotations")) {
    std::vector<std::int64_t> dangling;
    for (const auto& ann : root.at("annotations")) {
      if (!ann.contains("image_id") || !ann.contains("caption")) {
        throw FormatError(source + ": annotation record needs image_id and caption");
      }
      const auto id = ann.at("image_id").get<std::int64_t>();
      const auto it = paths.find(id);
      if (it == paths.end()) {
        dangling.push_back(id);
        continue;
      }
      out[it->second].push_back(ann.at("caption").get<std::string>());
    }
    if (!dangling.empty()) {
      std::sort(dangling.begin(), dangling.end());
      dangling.erase(std::unique(dangling.begin(), dangling.end()), dangling.end());
      std::string ids;
      for (auto id : dangling) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
      throw IntegrityError(source + ": captions reference unknown image ids " + ids);
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline bool is_wrapped(std::string_view caption) {
  return caption.size() >= 8 && caption.substr(0, 4) == "sos " &&
         caption.substr(caption.size() - 4) == " eos";
}

/// "sos <caption> eos", unless already wrapped.
inline std::string wrap_caption(std::string_view caption) {
  std::string t = trim(caption);
  if (is_wrapped(t)) return t;
  return "sos " + t + " eos";
}

inline constexpr std::size_t kCaptionsPerImage = 5;

inline CaptionSet filter_exactly_five(const CaptionSet& cs) {
  CaptionSet out;
  for (const auto& [path, caps] : cs) {
    if (caps.size() != kCaptionsPerImage) continue;
    auto& dst = out[path];
    for (const auto& c : caps) dst.push_back(wrap_caption(c));
  }
  return out;
}

struct SplitSpec {
  std::size_t train = 68363;
  std::size_t valid = 31432;
  std::size_t test = 2000;
  std::uint64_t seed = 0;

  std::size_t total() const { return train + valid + test; }
};

struct Splits {
  CaptionSet train, valid, test;
};

/// Seeded shuffle of the sorted keys, then contiguous train/valid/test runs.
inline Splits split_captions(const CaptionSet& cs, const SplitSpec& spec) {
  if (spec.total() > cs.size()) {
    throw CapacityError("split needs more images than available: requested " + std::to_string(spec.total()) +
                        ", available " + std::to_string(cs.size()));
  }
  std::vector<std::string> keys;
  for (const auto& [k, _] : cs) keys.push_back(k);
  Rng rng(spec.seed);
  rng.shuffle(std::span<std::string>(keys));
  Splits out;
  std::size_t i = 0;
  for (auto [dst, count] : {std::pair{&out.train, spec.train}, {&out.valid, spec.valid}, {&out.test, spec.test}}) {
    for (std::size_t n = 0; n < count; ++n, ++i) (*dst)[keys[i]] = cs.at(keys[i]);
  }
  return out;
}

/// Sorted keys, two-space indent, trailing newline.
inline std::string caption_set_json(const CaptionSet& cs) {
  json j = json::object();
  for (const auto& [k, v] : cs) j[k] = v;
  return dump_json(j);
}

inline Splits split_and_write(const CaptionSet& cs, const SplitSpec& spec, const std::filesystem::path& out_dir) {
  Splits s = split_captions(cs, spec);
  ensure_directory(out_dir);
  write_text_file(out_dir / "train.json", caption_set_json(s.train));
  write_text_file(out_dir / "valid.json", caption_set_json(s.valid));
  write_text_file(out_dir / "test.json", caption_set_json(s.test));
  return s;
}

inline CaptionSet parse_caption_set(std::string_view text, const std::string& source) {
  const json j = parse_strict_json(std::string(text), source);
  if (!j.is_object()) throw FormatError(source + ": expected an object of path -> caption list");
  CaptionSet out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_array()) throw FormatError(source + ": captions for " + k + " must be a list");
    for (const auto& c : v) {
      if (!c.is_string()) throw FormatError(source + ": non-string caption for " + k);
      out[k].push_back(c.get<std::string>());
    }
  }
  return out;
}

inline CaptionSet read_caption_set(const std::filesystem::path& path) {
  return parse_caption_set(read_text_file(path), path.string());
}

inline std::string prediction_set_json(const PredictionSet& ps) {
  json j = json::object();
  for (const auto& [k, v] : ps) j[k] = v;
  return dump_json(j);
}

inline PredictionSet parse_predictions(std::string_view text, const std::string& source) {
  const json j = parse_strict_json(std::string(text), source);
  if (!j.is_object()) throw FormatError(source + ": expected an object of path -> caption");
  PredictionSet out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw FormatError(source + ": prediction for " + k + " must be a string");
    out[k] = v.get<std::string>();
  }
  return out;
}

inline void write_predictions(const PredictionSet& ps, const std::filesystem::path& path) {
  write_text_file(path, prediction_set_json(ps));
}

inline PredictionSet read_predictions(const std::filesystem::path& path) {
  return parse_predictions(read_text_file(path), path.string());
}

}  // namespace frk::dataio
