#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/rng.hpp"
#include "frk/core/tensor.hpp"
#include "frk/freqparam/compression.hpp"
#include "frk/freqparam/schedule.hpp"
#include "frk/freqparam/serialize.hpp"
#include "frk/nn/builders.hpp"
#include "frk/nn/network.hpp"

namespace frk::nn {

struct LossResult {
  double loss = 0.0;  // mean over the batch
  Tensor grad;        // dL/dlogits
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy over a (N, K) logit batch.
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits " + shape_string(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape(), 0.0), 0};
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] >= k) throw ArgumentError("label out of range");
    const double* row = logits.data().data() + b * k;
    const double peak = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - peak);
    const double log_z = peak + std::log(z);
    r.loss += log_z - row[labels[b]];
    for (std::size_t j = 0; j < k; ++j) {
      const double prob = std::exp(row[j] - log_z);
      r.grad[b * k + j] = (prob - (j == labels[b] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    if (static_cast<std::size_t>(std::max_element(row, row + k) - row) == labels[b]) ++r.correct;
  }
  r.loss /= static_cast<double>(n);
  return r;
}

struct ClassificationSet {
  Tensor inputs;  // (N, C, H, W)
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }

  Tensor gather(std::span<const std::size_t> rows) const {
    const std::size_t stride = inputs.size() / inputs.dim(0);
    Shape shape = inputs.shape();
    shape[0] = rows.size();
    Tensor out(shape, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return out;
  }
};

/// Seeded single-channel Gaussian blob images. Class c puts a bump of
/// amplitude 1 and width `sigma` at its own centre; pixel noise is N(0, noise).
inline ClassificationSet make_blobs(std::size_t per_class, std::size_t classes, std::size_t size,
                                    double noise, Rng& rng) {
  if (per_class == 0 || classes == 0 || size == 0) throw ArgumentError("empty blob dataset");
  const double sigma = static_cast<double>(size) / 6.0;
  const std::size_t n = per_class * classes;
  ClassificationSet set{Tensor(Shape{n, 1, size, size}, 0.0), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % classes;
    // centres sweep the main diagonal
    const double centre = (static_cast<double>(cls) + 0.5) * static_cast<double>(size) / static_cast<double>(classes);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - centre;
        const double dx = static_cast<double>(x) + 0.5 - centre;
        set.inputs[(i * size + y) * size + x] =
            std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) + rng.normal(0.0, noise);
      }
    }
    set.labels.push_back(cls);
  }
  return set;
}

struct TrainConfig {
  double lr = 0.05;
  std::size_t epochs = 14;
  std::size_t batch = 16;
  double keep_fraction = 1.0;
  double decay = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw RangeError("lr must be finite and >= 0");
    if (epochs == 0) throw RangeError("epochs must be >= 1");
    if (batch == 0) throw RangeError("batch must be >= 1");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw RangeError("keep fraction must lie in (0, 1]");
    if (!(decay > 0.0 && decay < 1.0)) throw RangeError("decay must lie in (0, 1)");
  }

  json to_json() const {
    return {{"lr", lr}, {"epochs", epochs}, {"batch", batch}, {"keep_fraction", keep_fraction},
            {"decay", decay}, {"seed", seed}};
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t kept_total = 0;
  std::size_t truncated_this_epoch = 0;

  json to_json() const {
    return {{"epoch", epoch}, {"loss", loss}, {"accuracy", accuracy}, {"kept_total", kept_total},
            {"truncated_this_epoch", truncated_this_epoch}};
  }
};

struct TrainingLog {
  std::vector<EpochLog> epochs;

  /// One compact JSON object per line.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) out += e.to_json().dump() + "\n";
    return out;
  }

  static TrainingLog from_jsonl(const std::string& text) {
    TrainingLog log;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = parse_strict_json(line, "training log");
      log.epochs.push_back({j.at("epoch").get<std::size_t>(), j.at("loss").get<double>(),
                            j.at("accuracy").get<double>(), j.at("kept_total").get<std::size_t>(),
                            j.at("truncated_this_epoch").get<std::size_t>()});
    }
    return log;
  }
};

/// Eval-mode accuracy over the whole set.
inline double evaluate_accuracy(Network& net, const ClassificationSet& data, std::size_t batch = 64) {
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch, data.size()); ++i) rows.push_back(i);
    const Tensor logits = net.forward(data.gather(rows), {Mode::eval, nullptr});
    const std::size_t k = logits.dim(1);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const double* row = logits.data().data() + b * k;
      if (static_cast<std::size_t>(std::max_element(row, row + k) - row) == data.labels[rows[b]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Minibatch SGD on the kept coefficients with dynamic tail truncation.
///
/// Each epoch: shuffled minibatches (forward with reconstructed weights,
/// softmax cross-entropy, backward, grad_to_freq, SGD on kept coefficients
/// and on dense parameters), then one schedule step and truncation per
/// frequency parameter, then eval accuracy of the truncated model.
inline TrainingLog train(Network& net, const ClassificationSet& data, const TrainConfig& config,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  config.validate();
  if (data.size() == 0) throw ArgumentError("training set is empty");
  Rng rng(config.seed);
  Rng dropout_rng = rng.split();

  std::vector<TruncationSchedule> schedules;
  for (const auto* slot : net.frequency_params()) {
    const std::size_t total = slot->param.total();
    TruncationSchedule s = TruncationSchedule::make(total, keep_for_fraction(total, config.keep_fraction), config.decay);
    s.current_keep = slot->param.keep();
    if (s.current_keep < s.target_keep) s.target_keep = s.current_keep;
    schedules.push_back(s);
  }

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainingLog log;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(start + config.batch, order.size());
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Tensor batch = data.gather(rows);
      std::vector<std::size_t> labels;
      for (auto r : rows) labels.push_back(data.labels[r]);

      net.zero_grad();
      const ForwardContext ctx{Mode::train, &dropout_rng};
      const Tensor logits = net.forward(batch, ctx);
      LossResult res = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(res.loss)) {
        const auto where = net.first_nonfinite_layer(batch, {Mode::eval, nullptr});
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) +
                              (where ? ", first non-finite activation in layer " + *where
                                     : ", activations finite (loss overflow)"));
      }
      loss_sum += res.loss * static_cast<double>(rows.size());
      net.backward(res.grad);
      for (auto* slot : net.frequency_params()) {
        slot->param.sgd_step(slot->param.grad_to_freq(slot->grad), config.lr);
      }
      for (auto* slot : net.dense_params()) {
        for (std::size_t i = 0; i < slot->value.size(); ++i) slot->value[i] -= config.lr * slot->grad[i];
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_sum / static_cast<double>(data.size());
    const auto& slots = net.frequency_params();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto step = schedule_step(schedules[i]);
      schedules[i] = step.next;
      if (step.truncate_now > 0) slots[i]->param.truncate(step.next.current_keep);
      entry.truncated_this_epoch += step.truncate_now;
    }
    entry.kept_total = net.kept_total();
    entry.accuracy = evaluate_accuracy(net, data);
    log.epochs.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

/// Rebuilds a network from a directory written by Network::save.
inline Network load_network(const std::filesystem::path& dir) {
  LoadedCheckpoint ckpt = read_checkpoint(dir);
  if (!ckpt.manifest.contains("architecture")) throw FormatError("checkpoint has no architecture manifest");
  const auto& arch = ckpt.manifest["architecture"];
  ModelGraph graph = build_by_name(arch.at("builder").get<std::string>(), arch.at("num_classes").get<std::size_t>());
  Rng unused(0);
  auto& stored = ckpt.params;
  const auto weights = [&](const std::string& name) -> std::optional<FreqParam> {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("checkpoint lacks parameter " + name);
    return std::move(it->second);
  };
  Network net(std::move(graph), unused, weights);
  load_dense_state(net, ckpt.manifest);
  return net;
}

}  // namespace frk::nn
