#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/rng.hpp"
#include "frk/core/tensor.hpp"
#include "frk/freqparam/compression.hpp"
#include "frk/freqparam/serialize.hpp"
#include "frk/nn/graph.hpp"
#include "frk/nn/layers.hpp"

namespace frk::nn {

/// Runtime model instantiated from a ModelGraph.
class Network {
 public:
  Network(ModelGraph graph, Rng& rng) : Network(std::move(graph), rng, {}) {}

  Network(ModelGraph graph, Rng& rng,
          const std::function<std::optional<FreqParam>(const std::string&)>& weights)
      : graph_(std::move(graph)) {
    graph_.infer_shapes();
    for (const auto& spec : graph_.layers) layers_.push_back(make_layer(spec, rng, weights));
    for (auto& layer : layers_) layer->collect(refs_);
  }

  const ModelGraph& graph() const noexcept { return graph_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const noexcept { return layers_; }

  Tensor forward(const Tensor& input, const ForwardContext& ctx = {}) {
    check_input(input);
    Tensor cur = input;
    for (auto& layer : layers_) cur = layer->forward(cur, ctx);
    return cur;
  }

  Tensor backward(const Tensor& grad_output) {
    Tensor g = grad_output;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  /// Name of the first top-level layer whose output contains a non-finite
  /// value, if any.
  std::optional<std::string> first_nonfinite_layer(const Tensor& input, const ForwardContext& ctx = {}) {
    if (!input.all_finite()) return std::string("input");
    Tensor cur = input;
    for (auto& layer : layers_) {
      cur = layer->forward(cur, ctx);
      if (!cur.all_finite()) return layer->name();
    }
    return std::nullopt;
  }

  const std::vector<FrSlot*>& frequency_params() const noexcept { return refs_.frequency; }
  const std::vector<DenseSlot*>& dense_params() const noexcept { return refs_.dense; }
  const std::vector<std::pair<std::string, Tensor*>>& buffers() const noexcept { return refs_.buffers; }

  void zero_grad() {
    for (auto* p : refs_.frequency) p->zero_grad();
    for (auto* p : refs_.dense) p->zero_grad();
  }

  std::vector<NamedFreqParam> named_freq_params() const {
    std::vector<NamedFreqParam> out;
    for (const auto* p : refs_.frequency) out.push_back({p->name, &p->param});
    return out;
  }

  CompressionReport compression() const { return compression_report(named_freq_params()); }

  std::size_t kept_total() const {
    std::size_t total = 0;
    for (const auto* p : refs_.frequency) total += p->param.keep();
    return total;
  }

  /// Truncates every frequency parameter to ceil(fraction * size), min 1.
  void truncate_to_fraction(double fraction) {
    for (auto* p : refs_.frequency) p->param.truncate(keep_for_fraction(p->param.total(), fraction));
  }

  /// Truncates so that the kept coefficients over the whole model sum to
  /// exactly `total`.
  void truncate_to_total(std::size_t total) {
    std::vector<std::size_t> sizes;
    for (const auto* p : refs_.frequency) sizes.push_back(p->param.total());
    const auto keeps = allocate_keep_total(sizes, total);
    for (std::size_t i = 0; i < keeps.size(); ++i) {
      auto& param = refs_.frequency[i]->param;
      if (keeps[i] > param.keep()) {
        throw MonotonicityError(refs_.frequency[i]->name + " is already below its allocated keep");
      }
      param.truncate(keeps[i]);
    }
  }

  /// Writes the FRP1 directory format plus an architecture manifest carrying
  /// dense parameters and batch-norm buffers as plain arrays.
  void save(const std::filesystem::path& dir, json extra = json::object()) const {
    extra["architecture"] = graph_.to_json();
    json dense = json::object();
    for (const auto* p : refs_.dense) dense[p->name] = p->value.storage();
    for (const auto& [name, t] : refs_.buffers) dense[name] = t->storage();
    extra["dense"] = std::move(dense);
    write_checkpoint(dir, named_freq_params(), std::move(extra));
  }

 private:
  void check_input(const Tensor& input) const {
    Shape expected{0};
    expected.insert(expected.end(), graph_.input.begin(), graph_.input.end());
    if (input.rank() != expected.size() ||
        !std::equal(graph_.input.begin(), graph_.input.end(), input.shape().begin() + 1)) {
      throw ShapeError("network expects (N," + shape_string(graph_.input).substr(1) + ", got " +
                       shape_string(input.shape()));
    }
  }

  ModelGraph graph_;
  std::vector<std::unique_ptr<Layer>> layers_;
  ParamRefs refs_;
};

/// Restores dense parameters and buffers written by Network::save.
inline void load_dense_state(Network& net, const json& manifest) {
  if (!manifest.contains("dense")) return;
  const auto& dense = manifest["dense"];
  const auto restore = [&](const std::string& name, Tensor& target) {
    if (!dense.contains(name)) throw FormatError("checkpoint lacks dense entry " + name);
    auto values = dense[name].get<std::vector<double>>();
    if (values.size() != target.size()) throw FormatError("dense entry " + name + " has wrong size");
    target = Tensor(target.shape(), std::move(values));
  };
  for (auto* p : net.dense_params()) restore(p->name, p->value);
  for (const auto& [name, t] : net.buffers()) restore(name, *t);
}

}  // namespace frk::nn
