// frk: command-line driver for preprocessing, compression audits, demo
// training runs and caption evaluation.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "frk/captoy/caption_model.hpp"
#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/core/rng.hpp"
#include "frk/dataio/captions.hpp"
#include "frk/metrics/metrics.hpp"
#include "frk/nn/builders.hpp"
#include "frk/nn/network.hpp"
#include "frk/nn/train.hpp"

namespace fs = std::filesystem;
using namespace frk;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::divergence: return 1;
    case ErrorKind::io:
    case ErrorKind::parse:
    case ErrorKind::format: return 2;
    case ErrorKind::usage: return 4;
    default: return 3;
  }
}

void print_config(const std::string& command, const json& config) {
  std::cerr << command << " " << config.dump() << "\n";
}

// ---- preprocess ----

struct PreprocessArgs {
  std::string annotations;
  std::string out;
  dataio::SplitSpec split;
};

int run_preprocess(const PreprocessArgs& a) {
  print_config("preprocess", {{"annotations", a.annotations}, {"out", a.out}, {"train", a.split.train},
                              {"valid", a.split.valid}, {"test", a.split.test}, {"seed", a.split.seed}});
  const auto raw = dataio::ingest_annotations(read_text_file(a.annotations), a.annotations);
  const auto filtered = dataio::filter_exactly_five(raw);
  const auto splits = dataio::split_and_write(filtered, a.split, a.out);
  json summary = {{"images", raw.size()},
                  {"exactly_five", filtered.size()},
                  {"train", splits.train.size()},
                  {"valid", splits.valid.size()},
                  {"test", splits.test.size()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- compress-audit ----

struct AuditArgs {
  std::string arch;
  std::optional<double> keep_fraction;
  std::optional<std::size_t> keep_total;
  std::string out;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  bool forward_check = true;
};

std::size_t default_classes(const std::string& arch) { return arch == "lenet5" || arch == "tiny_convnet" ? 10 : 1000; }

json forward_probe(nn::Network& net, std::uint64_t seed) {
  Rng rng(seed);
  Shape shape{1};
  shape.insert(shape.end(), net.graph().input.begin(), net.graph().input.end());
  const Tensor out = net.forward(tensor_rand_normal(shape, 0.0, 1.0, rng), {nn::Mode::eval, nullptr});
  return {{"output_shape", out.shape()}, {"finite", out.all_finite()}};
}

int run_compress_audit(AuditArgs a) {
  if (a.num_classes == 0) a.num_classes = default_classes(a.arch);
  const auto& names = nn::builder_names();
  if (std::find(names.begin(), names.end(), a.arch) == names.end()) {
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw UsageError("unknown architecture '" + a.arch + "' (known: " + known + ")");
  }
  if (a.keep_fraction && !(*a.keep_fraction > 0.0 && *a.keep_fraction <= 1.0)) {
    throw UsageError("--keep-fraction must lie in (0, 1]; every parameter keeps at least one coefficient");
  }
  if (!a.keep_fraction && !a.keep_total) a.keep_fraction = 1.0;
  print_config("compress-audit",
               {{"arch", a.arch}, {"num_classes", a.num_classes},
                {"keep_fraction", a.keep_fraction ? json(*a.keep_fraction) : json(nullptr)},
                {"keep_total", a.keep_total ? json(*a.keep_total) : json(nullptr)},
                {"out", a.out.empty() ? json(nullptr) : json(a.out)}, {"seed", a.seed},
                {"forward_check", a.forward_check}});

  Rng rng(a.seed);
  nn::Network net(nn::build_by_name(a.arch, a.num_classes), rng);
  if (a.keep_total) {
    const std::size_t params = net.frequency_params().size();
    std::size_t grand = 0;
    for (const auto* p : net.frequency_params()) grand += p->param.total();
    if (*a.keep_total < params || *a.keep_total > grand) {
      throw UsageError("--keep-total must lie in [" + std::to_string(params) + ", " + std::to_string(grand) + "]");
    }
    net.truncate_to_total(*a.keep_total);
  } else {
    net.truncate_to_fraction(*a.keep_fraction);
  }

  const auto report = net.compression();
  json params = json::array();
  for (const auto& e : report.entries) {
    params.push_back({{"name", e.name}, {"original", e.original_count}, {"kept", e.kept_count}});
  }
  json out = {{"architecture", a.arch},
              {"num_classes", a.num_classes},
              {"original", report.original_total},
              {"kept", report.kept_total},
              {"ratio", report.ratio()},
              {"total_parameters", net.graph().total_parameters()},
              {"parameters", params}};
  if (!a.out.empty()) {
    net.save(a.out);
    out["checkpoint"] = a.out;
    // payload actually on disk, counted from the reloaded files
    nn::Network reloaded = nn::load_network(a.out);
    std::size_t payload = 0;
    for (const auto* p : reloaded.frequency_params()) payload += p->param.keep();
    out["payload_half_values"] = payload;
    if (a.forward_check) out["forward_check"] = forward_probe(reloaded, a.seed);
  } else if (a.forward_check) {
    out["forward_check"] = forward_probe(net, a.seed);
  }
  std::cout << out.dump(2) << "\n";
  if (out.contains("forward_check") && !out["forward_check"]["finite"].get<bool>()) {
    throw DivergenceError("forward pass produced non-finite outputs");
  }
  return 0;
}

// ---- train-demo ----

struct TrainDemoArgs {
  nn::TrainConfig config;
  std::string out;
  std::size_t per_class = 32;
  double noise = 0.3;
};

int run_train_demo(TrainDemoArgs a) {
  a.config.validate();
  if (a.per_class == 0) throw RangeError("--per-class must be >= 1");
  if (!(a.noise >= 0.0) || !std::isfinite(a.noise)) throw RangeError("--noise must be finite and >= 0");
  json cfg = a.config.to_json();
  cfg["out"] = a.out;
  cfg["per_class"] = a.per_class;
  cfg["noise"] = a.noise;
  cfg["model"] = "tiny_convnet";
  print_config("train-demo", cfg);

  Rng root(a.config.seed);
  Rng data_rng = root.split();
  Rng init_rng = root.split();
  const auto data = nn::make_blobs(a.per_class, 2, 8, a.noise, data_rng);
  nn::Network net(nn::build_tiny_convnet(2), init_rng);
  nn::TrainConfig config = a.config;
  config.seed = root.next_u64();

  ensure_directory(a.out);
  const auto log = nn::train(net, data, config, [](const nn::EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " loss " << e.loss << " accuracy " << e.accuracy << " kept "
              << e.kept_total << "\n";
  });
  write_text_file(fs::path(a.out) / "training_log.jsonl", log.to_jsonl());
  net.save(fs::path(a.out) / "checkpoint", {{"train_config", a.config.to_json()}});
  json summary = log.epochs.back().to_json();
  summary["epochs_logged"] = log.epochs.size();
  summary["original_total"] = net.compression().original_total;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- caption-demo ----

struct CaptionDemoArgs {
  nn::TrainConfig config;
  captoy::CaptionConfig model;
  std::size_t scenes = 64;
  std::size_t test_scenes = 16;
  std::string scene;
  std::string out;
};

/// Five reference phrasings per synthetic scene; the first is the training caption.
std::vector<std::string> scene_references(const std::string& caption) {
  const auto words = metrics::tokenize(caption);  // a <color> <object>
  const std::string& color = words.at(1);
  const std::string& object = words.at(2);
  std::vector<std::string> refs{"a " + color + " " + object, "the " + color + " " + object,
                                "a " + object + " that is " + color, "one " + color + " " + object,
                                "a " + color + " " + object + " in view"};
  for (auto& r : refs) r = dataio::wrap_caption(r);
  return refs;
}

int run_caption_demo(CaptionDemoArgs a) {
  a.config.validate();
  a.model.validate();
  if (a.scenes == 0 || a.test_scenes == 0) throw RangeError("scene counts must be >= 1");
  if (a.scene.empty() && a.out.empty()) throw UsageError("batch mode needs --out (or pass --scene)");
  std::optional<Tensor> query;
  if (!a.scene.empty()) query = captoy::parse_scene(a.scene);

  json cfg = a.config.to_json();
  cfg["embed_dim"] = a.model.embed_dim;
  cfg["seq_length"] = a.model.seq_length;
  cfg["scenes"] = a.scenes;
  cfg["test_scenes"] = a.test_scenes;
  cfg["scene"] = a.scene.empty() ? json(nullptr) : json(a.scene);
  cfg["out"] = a.out.empty() ? json(nullptr) : json(a.out);
  print_config("caption-demo", cfg);

  Rng root(a.config.seed);
  Rng data_rng = root.split();
  Rng init_rng = root.split();
  const auto train_set = captoy::synth_dataset(a.scenes, data_rng);
  captoy::CaptionModel model(captoy::scene_vocab(), a.model, init_rng);
  nn::TrainConfig config = a.config;
  config.seed = root.next_u64();
  const auto log = model.train(train_set, config);
  std::cerr << "final loss " << log.back().loss << " kept " << log.back().kept_total << "\n";

  if (query) {
    std::cout << model.generate(*query) << "\n";
    if (!a.out.empty()) model.save(fs::path(a.out) / "checkpoint");
    return 0;
  }

  const auto test_set = captoy::synth_dataset(a.test_scenes, data_rng, 0.05, "synthetic/test_");
  dataio::CaptionSet test_json;
  dataio::PredictionSet predictions;
  for (const auto& s : test_set) {
    test_json[s.key] = scene_references(s.caption);
    predictions[s.key] = model.generate(s.features);
  }
  const fs::path out(a.out);
  ensure_directory(out);
  write_text_file(out / "test.json", dataio::caption_set_json(test_json));
  dataio::write_predictions(predictions, out / "prediction.json");
  model.save(out / "checkpoint");
  std::size_t exact = 0;
  for (const auto& s : test_set) exact += "sos " + predictions[s.key] + " eos" == s.caption;
  std::cout << json{{"test_images", test_set.size()},
                    {"exact_match", static_cast<double>(exact) / static_cast<double>(test_set.size())},
                    {"final_loss", log.back().loss},
                    {"predictions", (out / "prediction.json").string()}}
                   .dump(2)
            << "\n";
  return 0;
}

// ---- evaluate ----

struct EvaluateArgs {
  std::string test;
  std::string predictions;
  std::string out;
};

std::string summary_table(const metrics::MetricReport& r, std::size_t images) {
  std::string s;
  char line[64];
  const auto row = [&](const char* name, double v) {
    std::snprintf(line, sizeof line, "%-10s %.4f\n", name, v);
    s += line;
  };
  std::snprintf(line, sizeof line, "images     %zu\n", images);
  s += line;
  row("BLEU-1", r.bleu[0]);
  row("BLEU-2", r.bleu[1]);
  row("BLEU-3", r.bleu[2]);
  row("BLEU-4", r.bleu[3]);
  row("ROUGE-1", r.rouge_1);
  row("ROUGE-2", r.rouge_2);
  row("ROUGE-L", r.rouge_l);
  row("METEOR", r.meteor);
  row("BLEU avg", r.bleu_avg());
  row("ROUGE avg", r.rouge_avg());
  return s;
}

int run_evaluate(const EvaluateArgs& a) {
  const auto truth = dataio::read_caption_set(a.test);
  const auto preds = dataio::read_predictions(a.predictions);
  std::vector<std::string> unpredicted;
  for (const auto& [k, _] : truth) {
    if (!preds.count(k)) unpredicted.push_back(k);
  }
  const auto unknown = metrics::missing_keys(preds, truth);
  if (!unpredicted.empty() || !unknown.empty()) {
    std::string msg = "prediction keys do not match test keys";
    const auto list = [&](const char* label, const std::vector<std::string>& keys) {
      if (keys.empty()) return;
      msg += std::string("\n  ") + label + " (" + std::to_string(keys.size()) + "):";
      for (const auto& k : keys) msg += "\n    " + k;
    };
    list("missing from predictions", unpredicted);
    list("missing from test set", unknown);
    throw LookupError(msg);
  }
  const auto report = metrics::score_corpus(preds, truth);
  const std::string table = summary_table(report.mean, report.per_image.size());
  if (a.out.empty()) {
    std::cout << report.to_json().dump(2) << "\n";
    std::cerr << table;
  } else {
    write_text_file(a.out, dump_json(report.to_json()));
    std::cout << table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frk: frequency-regularized models, caption toy and metrics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "frk 0.1.0");

  PreprocessArgs pre;
  auto* pre_cmd = app.add_subcommand("preprocess", "filter COCO-style annotations to 5-caption images and split");
  pre_cmd->add_option("--annotations", pre.annotations, "annotation JSON")->required();
  pre_cmd->add_option("--out", pre.out, "output directory for train/valid/test JSON")->required();
  pre_cmd->add_option("--train", pre.split.train, "training images")->capture_default_str();
  pre_cmd->add_option("--valid", pre.split.valid, "validation images")->capture_default_str();
  pre_cmd->add_option("--test", pre.split.test, "test images")->capture_default_str();
  pre_cmd->add_option("--seed", pre.split.seed, "shuffle seed")->capture_default_str();

  AuditArgs audit;
  auto* audit_cmd = app.add_subcommand("compress-audit", "build an FR model, truncate it and report the kept size");
  audit_cmd->add_option("arch", audit.arch, "alexnet | efficientnetb0 | lenet5 | tiny_convnet")->required();
  auto* kf = audit_cmd->add_option("--keep-fraction", audit.keep_fraction, "per-parameter kept fraction, (0, 1]");
  auto* kt = audit_cmd->add_option("--keep-total", audit.keep_total, "kept coefficients over the whole model");
  kf->excludes(kt);
  audit_cmd->add_option("--out", audit.out, "checkpoint directory");
  audit_cmd->add_option("--num-classes", audit.num_classes, "classifier width (default 10 for lenet5, else 1000)");
  audit_cmd->add_option("--seed", audit.seed, "initialization seed")->capture_default_str();
  audit_cmd->add_flag("--forward-check,!--no-forward-check", audit.forward_check,
                      "run one forward pass on the (reloaded) model")
      ->capture_default_str();

  TrainDemoArgs train;
  auto* train_cmd = app.add_subcommand("train-demo", "train the tiny FR conv net on synthetic blobs");
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--epochs", train.config.epochs)->capture_default_str();
  train_cmd->add_option("--batch", train.config.batch)->capture_default_str();
  train_cmd->add_option("--lr", train.config.lr)->capture_default_str();
  train_cmd->add_option("--keep-fraction", train.config.keep_fraction)->capture_default_str();
  train_cmd->add_option("--decay", train.config.decay, "truncation decay per epoch")->capture_default_str();
  train_cmd->add_option("--seed", train.config.seed)->capture_default_str();
  train_cmd->add_option("--per-class", train.per_class, "images per class")->capture_default_str();
  train_cmd->add_option("--noise", train.noise, "pixel noise sigma")->capture_default_str();

  CaptionDemoArgs cap;
  cap.config.epochs = 200;
  auto* cap_cmd = app.add_subcommand("caption-demo", "train the toy captioner and caption one scene or a test split");
  cap_cmd->add_option("--scene", cap.scene, "caption a single <color>:<object> scene");
  cap_cmd->add_option("--out", cap.out, "output directory");
  cap_cmd->add_option("--epochs", cap.config.epochs)->capture_default_str();
  cap_cmd->add_option("--batch", cap.config.batch)->capture_default_str();
  cap_cmd->add_option("--lr", cap.config.lr)->capture_default_str();
  cap_cmd->add_option("--keep-fraction", cap.config.keep_fraction)->capture_default_str();
  cap_cmd->add_option("--decay", cap.config.decay)->capture_default_str();
  cap_cmd->add_option("--seed", cap.config.seed)->capture_default_str();
  cap_cmd->add_option("--embed-dim", cap.model.embed_dim)->capture_default_str();
  cap_cmd->add_option("--seq-length", cap.model.seq_length)->capture_default_str();
  cap_cmd->add_option("--scenes", cap.scenes, "training scenes")->capture_default_str();
  cap_cmd->add_option("--test-scenes", cap.test_scenes, "scenes in the test split")->capture_default_str();

  EvaluateArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "score predictions against 5-reference test captions");
  eval_cmd->add_option("--test", eval.test, "test JSON (path -> 5 captions)")->required();
  eval_cmd->add_option("--predictions", eval.predictions, "prediction JSON (path -> caption)")->required();
  eval_cmd->add_option("--out", eval.out, "report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 4;
  }

  try {
    if (*pre_cmd) return run_preprocess(pre);
    if (*audit_cmd) return run_compress_audit(audit);
    if (*train_cmd) return run_train_demo(train);
    if (*cap_cmd) return run_caption_demo(cap);
    if (*eval_cmd) return run_evaluate(eval);
  } catch (const Error& e) {
    std::cerr << "frk: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "frk: format error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "frk: internal error: " << e.what() << "\n";
    return 1;
  }
  return 4;
}
