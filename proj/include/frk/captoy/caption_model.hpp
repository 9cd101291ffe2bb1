#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/rng.hpp"
#include "frk/core/tensor.hpp"
#include "frk/freqparam/compression.hpp"
#include "frk/freqparam/schedule.hpp"
#include "frk/freqparam/serialize.hpp"
#include "frk/nn/layers.hpp"
#include "frk/nn/train.hpp"

namespace frk::captoy {

inline constexpr std::size_t kSos = 0;
inline constexpr std::size_t kEos = 1;
inline constexpr std::size_t kPad = 2;
inline constexpr std::size_t kUnk = 3;

/// Token table with "sos", "eos", "pad", "unk" pinned to ids 0..3.
class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  explicit Vocab(const std::vector<std::string>& words) {
    for (const char* reserved : {"sos", "eos", "pad", "unk"}) add(reserved);
    for (const auto& w : words) add(w);
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::size_t id(const std::string& token) const {
    const auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw ArgumentError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::vector<std::size_t> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) out.push_back(id(word));
    return out;
  }

  json to_json() const { return tokens_; }

  static Vocab from_json(const json& j) {
    auto tokens = j.get<std::vector<std::string>>();
    if (tokens.size() < 4 || tokens[0] != "sos" || tokens[1] != "eos" || tokens[2] != "pad" || tokens[3] != "unk") {
      throw FormatError("vocab must start with sos, eos, pad, unk");
    }
    Vocab v;
    for (std::size_t i = 4; i < tokens.size(); ++i) {
      if (v.ids_.count(tokens[i])) throw FormatError("duplicate vocab token " + tokens[i]);
      v.add(tokens[i]);
    }
    return v;
  }

 private:
  void add(const std::string& token) {
    if (ids_.count(token)) return;
    ids_.emplace(token, tokens_.size());
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

inline const std::vector<std::string>& scene_colors() {
  static const std::vector<std::string> c{"red", "green", "blue", "yellow"};
  return c;
}

inline const std::vector<std::string>& scene_objects() {
  static const std::vector<std::string> o{"ball", "cube", "cup", "car"};
  return o;
}

inline Vocab scene_vocab() {
  std::vector<std::string> words{"a"};
  for (const auto& c : scene_colors()) words.push_back(c);
  for (const auto& o : scene_objects()) words.push_back(o);
  return Vocab(words);
}

struct Scene {
  std::string key;
  Tensor features;
  std::string caption;  // "sos a <color> <object> eos"
};

/// one-hot(color) ++ one-hot(object) + N(0, noise) per component.
inline Tensor scene_features(std::size_t color, std::size_t object, double noise, Rng& rng) {
  const std::size_t nc = scene_colors().size(), no = scene_objects().size();
  if (color >= nc || object >= no) throw ArgumentError("scene index out of range");
  Tensor f(Shape{nc + no}, 0.0);
  f[color] = 1.0;
  f[nc + object] = 1.0;
  if (noise > 0.0) {
    for (auto& v : f.data()) v += rng.normal(0.0, noise);
  }
  return f;
}

/// Parses "<color>:<object>" into noise-free features.
inline Tensor parse_scene(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ArgumentError("scene must look like <color>:<object>");
  const auto color = spec.substr(0, colon), object = spec.substr(colon + 1);
  const auto& cs = scene_colors();
  const auto& os = scene_objects();
  const auto ci = std::find(cs.begin(), cs.end(), color);
  const auto oi = std::find(os.begin(), os.end(), object);
  if (ci == cs.end()) throw ArgumentError("unknown color '" + color + "'");
  if (oi == os.end()) throw ArgumentError("unknown object '" + object + "'");
  Rng unused(0);
  return scene_features(static_cast<std::size_t>(ci - cs.begin()), static_cast<std::size_t>(oi - os.begin()), 0.0, unused);
}

/// Scene i uses combination i mod 16 so every (color, object) pair appears.
inline std::vector<Scene> synth_dataset(std::size_t n_scenes, Rng& rng, double noise = 0.05,
                                        const std::string& key_prefix = "synthetic/scene_") {
  if (n_scenes < 1) throw ArgumentError("n_scenes must be >= 1");
  const std::size_t nc = scene_colors().size(), no = scene_objects().size();
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const std::size_t combo = i % (nc * no);
    const std::size_t color = combo / no, object = combo % no;
    char key[64];
    std::snprintf(key, sizeof key, "%04zu.jpg", i);
    out.push_back({key_prefix + key, scene_features(color, object, noise, rng),
                   "sos a " + scene_colors()[color] + " " + scene_objects()[object] + " eos"});
  }
  return out;
}

struct CaptionConfig {
  std::size_t feat_dim = 8;
  std::size_t embed_dim = 32;
  std::size_t seq_length = 25;

  void validate() const {
    if (feat_dim == 0 || embed_dim == 0) throw RangeError("feat_dim and embed_dim must be >= 1");
    if (seq_length < 2) throw RangeError("seq_length must be >= 2");
  }
};

/// Incremental decoding state: the encoded memory slot plus every token
/// consumed so far.
struct DecoderState {
  Tensor memory;
  std::vector<std::size_t> tokens;
  std::vector<double> attention;  // weights of the most recent step
};

/// One-layer, single-head attention decoder over a single memory slot.
///
/// memory = Wf f + bf. At step i the input x_i = E[token_i] + PE(i) queries
/// the slots [memory, x_0..x_i]; h_i = x_i + Wo ctx_i + bo; logits = Wout h_i + bout.
/// Every matrix is an FR-linear map; the embedding table is a plain tensor.
class CaptionModel {
 public:
  CaptionModel(Vocab vocab, CaptionConfig config, Rng& rng) : vocab_(std::move(vocab)), config_(config) {
    config_.validate();
    const std::size_t d = config_.embed_dim, v = vocab_.size();
    const auto linear = [&](const std::string& name, std::size_t in, std::size_t out, bool bias) {
      std::optional<FreqParam> b;
      if (bias) b = FreqParam::zeros({out});
      return std::make_unique<nn::FrLinear>(name, nn::LinearSpec{in, out, bias},
                                            FreqParam::init({out, in}, 0.5, rng), std::move(b));
    };
    feat_ = linear("encoder.proj", config_.feat_dim, d, true);
    query_ = linear("decoder.query", d, d, false);
    key_ = linear("decoder.key", d, d, false);
    value_ = linear("decoder.value", d, d, false);
    attn_out_ = linear("decoder.attn_out", d, d, true);
    out_ = linear("decoder.out", d, v, true);
    embedding_->name = "decoder.embedding";
    embedding_->value = tensor_rand_normal(Shape{v, d}, 0.0, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    embedding_->zero_grad();
    collect();
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  const CaptionConfig& config() const noexcept { return config_; }

  const std::vector<nn::FrSlot*>& frequency_params() const noexcept { return refs_.frequency; }
  const std::vector<nn::DenseSlot*>& dense_params() const noexcept { return refs_.dense; }

  std::vector<NamedFreqParam> named_freq_params() const {
    std::vector<NamedFreqParam> out;
    for (const auto* p : refs_.frequency) out.push_back({p->name, &p->param});
    return out;
  }

  void zero_grad() {
    for (auto* p : refs_.frequency) p->zero_grad();
    for (auto* p : refs_.dense) p->zero_grad();
  }

  Tensor encode(const Tensor& features) {
    if (features.size() != config_.feat_dim) {
      throw ShapeError("expected " + std::to_string(config_.feat_dim) + " features, got " +
                       std::to_string(features.size()));
    }
    return feat_->forward(features.reshaped(Shape{1, config_.feat_dim}), {}).reshaped(Shape{config_.embed_dim});
  }

  DecoderState start(const Tensor& features) { return {encode(features), {}, {}}; }

  /// Consumes `prev_token` and returns unnormalised scores for the next one.
  Tensor decode_step(DecoderState& state, std::size_t prev_token) {
    if (prev_token >= vocab_.size()) {
      throw ArgumentError("token id " + std::to_string(prev_token) + " outside vocab of " +
                          std::to_string(vocab_.size()));
    }
    if (state.tokens.size() >= config_.seq_length) throw ArgumentError("decoder state already at seq_length");
    state.tokens.push_back(prev_token);
    const Pass pass = run(state.memory, state.tokens);
    state.attention = pass.attention.back();
    const std::size_t v = vocab_.size();
    const std::size_t last = state.tokens.size() - 1;
    return Tensor(Shape{v}, std::vector<double>(pass.logits.data().begin() + static_cast<std::ptrdiff_t>(last * v),
                                                pass.logits.data().begin() + static_cast<std::ptrdiff_t>((last + 1) * v)));
  }

  /// Greedy decoding from "sos"; stops at "eos" or after seq_length - 1 tokens.
  std::vector<std::size_t> generate_ids(const Tensor& features) {
    DecoderState state = start(features);
    std::vector<std::size_t> out;
    std::size_t prev = kSos;
    while (out.size() + 1 < config_.seq_length) {
      const Tensor logits = decode_step(state, prev);
      std::size_t best = kEos;
      for (std::size_t t = 0; t < logits.size(); ++t) {
        if (t == kSos || t == kPad) continue;
        if (logits[t] > logits[best]) best = t;
      }
      if (best == kEos) break;
      out.push_back(best);
      prev = best;
    }
    return out;
  }

  std::string generate(const Tensor& features) {
    std::string text;
    for (auto id : generate_ids(features)) {
      if (!text.empty()) text += ' ';
      text += vocab_.token(id);
    }
    return text;
  }

  /// Teacher-forced cross-entropy summed over steps of `tokens`
  /// (sos ... eos). With `backprop`, gradients are accumulated.
  double sequence_loss(const Tensor& features, const std::vector<std::size_t>& tokens, bool backprop) {
    if (tokens.size() < 2) throw ArgumentError("sequence needs at least sos and one target");
    if (tokens.size() > config_.seq_length) throw ArgumentError("sequence longer than seq_length");
    const std::vector<std::size_t> inputs(tokens.begin(), tokens.end() - 1);
    const Tensor memory = encode(features);
    Pass pass = run(memory, inputs);
    const std::size_t steps = inputs.size(), v = vocab_.size();
    Tensor dlogits(Shape{steps, v}, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
      const double* row = pass.logits.data().data() + i * v;
      const double peak = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t t = 0; t < v; ++t) z += std::exp(row[t] - peak);
      const double log_z = peak + std::log(z);
      const std::size_t target = tokens[i + 1];
      if (target >= v) throw ArgumentError("target token outside vocab");
      loss += log_z - row[target];
      for (std::size_t t = 0; t < v; ++t) dlogits[i * v + t] = std::exp(row[t] - log_z) - (t == target ? 1.0 : 0.0);
    }
    if (backprop) backward(pass, inputs, dlogits);
    return loss;
  }

  struct EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;  // mean per caption
    std::size_t kept_total = 0;
    std::size_t truncated_this_epoch = 0;
  };

  /// Minibatch SGD on teacher-forced loss, with the same per-parameter
  /// truncation schedule as the classifier trainer.
  std::vector<EpochStats> train(const std::vector<Scene>& scenes, const nn::TrainConfig& cfg) {
    cfg.validate();
    if (scenes.empty()) throw ArgumentError("no training scenes");
    Rng rng(cfg.seed);
    std::vector<std::vector<std::size_t>> targets;
    for (const auto& s : scenes) targets.push_back(vocab_.encode(s.caption));
    std::vector<TruncationSchedule> schedules;
    for (const auto* slot : refs_.frequency) {
      const std::size_t total = slot->param.total();
      auto s = TruncationSchedule::make(total, keep_for_fraction(total, cfg.keep_fraction), cfg.decay);
      s.current_keep = slot->param.keep();
      s.target_keep = std::min(s.target_keep, s.current_keep);
      schedules.push_back(s);
    }
    std::vector<std::size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochStats> log;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      rng.shuffle(std::span<std::size_t>(order));
      double total_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(start + cfg.batch, order.size());
        zero_grad();
        for (std::size_t i = start; i < end; ++i) {
          total_loss += sequence_loss(scenes[order[i]].features, targets[order[i]], true);
        }
        if (!std::isfinite(total_loss)) {
          throw DivergenceError("caption loss became non-finite at epoch " + std::to_string(epoch));
        }
        const double lr = cfg.lr / static_cast<double>(end - start);
        for (auto* slot : refs_.frequency) slot->param.sgd_step(slot->param.grad_to_freq(slot->grad), lr);
        for (auto* slot : refs_.dense) {
          for (std::size_t i = 0; i < slot->value.size(); ++i) slot->value[i] -= lr * slot->grad[i];
        }
      }
      EpochStats stats{epoch, total_loss / static_cast<double>(scenes.size()), 0, 0};
      for (std::size_t i = 0; i < refs_.frequency.size(); ++i) {
        const auto step = schedule_step(schedules[i]);
        schedules[i] = step.next;
        if (step.truncate_now > 0) refs_.frequency[i]->param.truncate(step.next.current_keep);
        stats.truncated_this_epoch += step.truncate_now;
      }
      for (const auto* slot : refs_.frequency) stats.kept_total += slot->param.keep();
      log.push_back(stats);
    }
    return log;
  }

  void save(const std::filesystem::path& dir) const {
    json extra;
    extra["architecture"] = {{"builder", "captoy"},
                             {"feat_dim", config_.feat_dim},
                             {"embed_dim", config_.embed_dim},
                             {"seq_length", config_.seq_length},
                             {"vocab_size", vocab_.size()}};
    extra["dense"] = {{embedding_->name, embedding_->value.storage()}};
    write_checkpoint(dir, named_freq_params(), std::move(extra));
    write_text_file(dir / "vocab.json", dump_json(vocab_.to_json()));
  }

  static CaptionModel load(const std::filesystem::path& dir) {
    LoadedCheckpoint ckpt = read_checkpoint(dir);
    const auto& arch = ckpt.manifest.at("architecture");
    if (arch.at("builder") != "captoy") throw FormatError("not a captoy checkpoint");
    const auto vocab_path = dir / "vocab.json";
    Vocab vocab = Vocab::from_json(parse_strict_json(read_text_file(vocab_path), vocab_path.string()));
    CaptionConfig config{arch.at("feat_dim").get<std::size_t>(), arch.at("embed_dim").get<std::size_t>(),
                         arch.at("seq_length").get<std::size_t>()};
    Rng unused(0);
    CaptionModel model(std::move(vocab), config, unused);
    for (auto* slot : model.refs_.frequency) {
      auto it = ckpt.params.find(slot->name);
      if (it == ckpt.params.end()) throw FormatError("checkpoint lacks " + slot->name);
      if (it->second.spatial_shape() != slot->param.spatial_shape()) throw FormatError(slot->name + " has wrong shape");
      slot->param = std::move(it->second);
    }
    auto values = ckpt.manifest.at("dense").at(model.embedding_->name).get<std::vector<double>>();
    if (values.size() != model.embedding_->value.size()) throw FormatError("embedding has wrong size");
    model.embedding_->value = Tensor(model.embedding_->value.shape(), std::move(values));
    return model;
  }

 private:
  struct Pass {
    Tensor slots;    // (T+1, d): memory then token inputs
    Tensor queries;  // (T, d)
    Tensor keys;     // (T+1, d)
    Tensor values;   // (T+1, d)
    std::vector<std::vector<double>> attention;
    Tensor logits;   // (T, V)
  };

  static double positional(std::size_t pos, std::size_t dim, std::size_t d) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (dim / 2)) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * rate;
    return dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }

  Pass run(const Tensor& memory, const std::vector<std::size_t>& inputs) {
    const std::size_t d = config_.embed_dim, steps = inputs.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Pass p;
    p.slots = Tensor(Shape{steps + 1, d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) p.slots[j] = memory[j];
    Tensor x(Shape{steps, d}, 0.0);
    for (std::size_t i = 0; i < steps; ++i) {
      if (inputs[i] >= vocab_.size()) throw ArgumentError("token id outside vocab");
      for (std::size_t j = 0; j < d; ++j) {
        const double v = embedding_->value[inputs[i] * d + j] + positional(i, j, d);
        x[i * d + j] = v;
        p.slots[(i + 1) * d + j] = v;
      }
    }
    p.queries = query_->forward(x, {});
    p.keys = key_->forward(p.slots, {});
    p.values = value_->forward(p.slots, {});
    Tensor context(Shape{steps, d}, 0.0);
    for (std::size_t i = 0; i < steps; ++i) {
      const std::size_t visible = i + 2;  // memory + x_0..x_i
      std::vector<double> score(visible);
      for (std::size_t s = 0; s < visible; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += p.queries[i * d + j] * p.keys[s * d + j];
        score[s] = acc * inv_sqrt_d;
      }
      const double peak = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (auto& s : score) {
        s = std::exp(s - peak);
        z += s;
      }
      for (auto& s : score) s /= z;
      for (std::size_t s = 0; s < visible; ++s) {
        for (std::size_t j = 0; j < d; ++j) context[i * d + j] += score[s] * p.values[s * d + j];
      }
      p.attention.push_back(std::move(score));
    }
    Tensor hidden = x + attn_out_->forward(context, {});
    p.logits = out_->forward(hidden, {});
    return p;
  }

  void backward(const Pass& p, const std::vector<std::size_t>& inputs, const Tensor& dlogits) {
    const std::size_t d = config_.embed_dim, steps = inputs.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const Tensor dhidden = out_->backward(dlogits);
    Tensor dx = dhidden;
    const Tensor dcontext = attn_out_->backward(dhidden);
    Tensor dq(Shape{steps, d}, 0.0), dk(Shape{steps + 1, d}, 0.0), dv(Shape{steps + 1, d}, 0.0);
    for (std::size_t i = 0; i < steps; ++i) {
      const auto& alpha = p.attention[i];
      const std::size_t visible = alpha.size();
      std::vector<double> dalpha(visible, 0.0);
      double weighted = 0.0;
      for (std::size_t s = 0; s < visible; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
          dalpha[s] += dcontext[i * d + j] * p.values[s * d + j];
          dv[s * d + j] += alpha[s] * dcontext[i * d + j];
        }
        weighted += alpha[s] * dalpha[s];
      }
      for (std::size_t s = 0; s < visible; ++s) {
        const double dscore = alpha[s] * (dalpha[s] - weighted) * inv_sqrt_d;
        for (std::size_t j = 0; j < d; ++j) {
          dq[i * d + j] += dscore * p.keys[s * d + j];
          dk[s * d + j] += dscore * p.queries[i * d + j];
        }
      }
    }
    add_into(dx, query_->backward(dq));
    Tensor dslots = key_->backward(dk);
    add_into(dslots, value_->backward(dv));
    for (std::size_t i = 0; i < steps; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double g = dx[i * d + j] + dslots[(i + 1) * d + j];
        embedding_->grad[inputs[i] * d + j] += g;
      }
    }
    Tensor dmemory(Shape{1, d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) dmemory[j] = dslots[j];
    feat_->backward(dmemory);
  }

  void collect() {
    refs_ = {};
    for (auto* layer : {feat_.get(), query_.get(), key_.get(), value_.get(), attn_out_.get(), out_.get()}) {
      layer->collect(refs_);
    }
    refs_.dense.push_back(embedding_.get());
  }

  Vocab vocab_;
  CaptionConfig config_;
  std::unique_ptr<nn::FrLinear> feat_, query_, key_, value_, attn_out_, out_;
  std::unique_ptr<nn::DenseSlot> embedding_ = std::make_unique<nn::DenseSlot>();
  nn::ParamRefs refs_;
};

}  // namespace frk::captoy
