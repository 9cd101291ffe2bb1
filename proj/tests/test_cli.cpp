#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "frk/core/io.hpp"
#include "frk/dataio/captions.hpp"
#include "frk/nn/train.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using frk::json;
using frk::read_text_file;
using frk::write_text_file;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

RunResult frk_run(const std::vector<std::string>& args, const fs::path& scratch) {
  std::string cmd = quote(FRK_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text_file(out);
  r.err = read_text_file(err);
  return r;
}

// every regular file under `dir`, relative path -> bytes
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  }
  return files;
}

std::string annotation_fixture(const std::vector<std::size_t>& counts) {
  json images = json::array(), anns = json::array();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    images.push_back({{"id", i + 1}, {"file_name", "coco/img_" + std::to_string(i) + ".jpg"}});
    for (std::size_t c = 0; c < counts[i]; ++c) {
      anns.push_back({{"image_id", i + 1}, {"caption", "Picture " + std::to_string(i) + " view " + std::to_string(c) + "."}});
    }
  }
  return json{{"images", images}, {"annotations", anns}}.dump();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = testing_support::scratch_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
  }
  RunResult run(const std::vector<std::string>& args) { return frk_run(args, dir_); }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpVersionAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"--version"}).code, 0);
  EXPECT_EQ(run({}).code, 4);
  EXPECT_EQ(run({"frobnicate"}).code, 4);
  EXPECT_EQ(run({"preprocess", "--out", "x"}).code, 4);
  EXPECT_EQ(run({"train-demo", "--out", (dir_ / "t").string(), "--epochs", "many"}).code, 4);
}

TEST_F(Cli, PreprocessWritesSplitsAndPrintsCounts) {
  std::vector<std::size_t> counts;
  for (int i = 0; i < 10; ++i) counts.push_back(5);
  for (std::size_t c : {1, 2, 3, 4, 6}) counts.push_back(c);
  write_text_file(dir_ / "ann.json", annotation_fixture(counts));
  const auto r = run({"preprocess", "--annotations", (dir_ / "ann.json").string(), "--out", (dir_ / "splits").string(),
                      "--train", "6", "--valid", "3", "--test", "1", "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = json::parse(r.out);
  EXPECT_EQ(summary.at("images"), 15);
  EXPECT_EQ(summary.at("exactly_five"), 10);
  for (const auto& [name, n] : std::map<std::string, int>{{"train", 6}, {"valid", 3}, {"test", 1}}) {
    const auto cs = frk::dataio::read_caption_set(dir_ / "splits" / (name + ".json"));
    EXPECT_EQ(static_cast<int>(cs.size()), n);
    EXPECT_EQ(summary.at(name), n);
    for (const auto& [_, caps] : cs) {
      ASSERT_EQ(caps.size(), 5u);
      for (const auto& c : caps) EXPECT_TRUE(frk::dataio::is_wrapped(c)) << c;
    }
  }
  // config echoed before work
  EXPECT_NE(r.err.find("preprocess"), std::string::npos);
}

TEST_F(Cli, PreprocessErrorClasses) {
  auto r = run({"preprocess", "--annotations", (dir_ / "nope.json").string(), "--out", (dir_ / "o").string()});
  EXPECT_EQ(r.code, 2) << r.err;

  write_text_file(dir_ / "bad.json", "{\"images\": [");
  r = run({"preprocess", "--annotations", (dir_ / "bad.json").string(), "--out", (dir_ / "o").string()});
  EXPECT_EQ(r.code, 2) << r.err;

  write_text_file(dir_ / "ann.json", annotation_fixture({5, 5, 5}));
  r = run({"preprocess", "--annotations", (dir_ / "ann.json").string(), "--out", (dir_ / "o").string(), "--train", "3",
           "--valid", "1", "--test", "0"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("requested 4, available 3"), std::string::npos) << r.err;

  write_text_file(dir_ / "dangling.json",
                  R"({"images": [{"id": 1, "file_name": "a.jpg"}], "annotations": [{"image_id": 2, "caption": "x"}]})");
  r = run({"preprocess", "--annotations", (dir_ / "dangling.json").string(), "--out", (dir_ / "o").string()});
  EXPECT_EQ(r.code, 3);
}

TEST_F(Cli, CompressAuditLeNet776) {
  const auto r = run({"compress-audit", "lenet5", "--keep-total", "776", "--out", (dir_ / "ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_EQ(rep.at("kept"), 776);
  EXPECT_EQ(rep.at("original"), 61706);
  EXPECT_EQ(rep.at("payload_half_values"), 776);
  EXPECT_TRUE(rep.at("forward_check").at("finite").get<bool>());
  EXPECT_EQ(rep.at("forward_check").at("output_shape"), json::array({1, 10}));
}

TEST_F(Cli, CompressAuditAlexNetUntruncated) {
  const auto r = run({"compress-audit", "alexnet", "--keep-fraction", "1.0", "--no-forward-check"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_EQ(rep.at("original"), 61100840);
  EXPECT_EQ(rep.at("kept"), 61100840);
  EXPECT_DOUBLE_EQ(rep.at("ratio").get<double>(), 1.0);
}

TEST_F(Cli, CompressAuditUsageErrors) {
  EXPECT_EQ(run({"compress-audit", "lenet5", "--keep-fraction", "0"}).code, 4);
  EXPECT_EQ(run({"compress-audit", "lenet5", "--keep-fraction", "1.5"}).code, 4);
  EXPECT_EQ(run({"compress-audit", "vgg16"}).code, 4);
  EXPECT_EQ(run({"compress-audit", "lenet5", "--keep-total", "3"}).code, 4);
  EXPECT_EQ(run({"compress-audit", "lenet5", "--keep-total", "5", "--keep-fraction", "0.5"}).code, 4);
}

TEST_F(Cli, TrainDemoDefaultRun) {
  const auto r = run({"train-demo", "--out", (dir_ / "a").string(), "--seed", "3", "--keep-fraction", "0.2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = frk::nn::TrainingLog::from_jsonl(read_text_file(dir_ / "a" / "training_log.jsonl"));
  ASSERT_EQ(log.epochs.size(), 14u);
  for (std::size_t e = 1; e < log.epochs.size(); ++e) {
    EXPECT_LE(log.epochs[e].kept_total, log.epochs[e - 1].kept_total);
  }
  EXPECT_TRUE(fs::exists(dir_ / "a" / "checkpoint" / "manifest.json"));
  EXPECT_EQ(json::parse(r.out).at("epoch"), 14);
  // the defaults are echoed at start
  EXPECT_NE(r.err.find("\"epochs\":14"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("\"batch\":16"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainDemoIsDeterministic) {
  for (const char* d : {"a", "b"}) {
    ASSERT_EQ(run({"train-demo", "--out", (dir_ / d).string(), "--epochs", "4", "--seed", "8"}).code, 0);
  }
  EXPECT_EQ(snapshot(dir_ / "a"), snapshot(dir_ / "b"));
  ASSERT_EQ(run({"train-demo", "--out", (dir_ / "c").string(), "--epochs", "4", "--seed", "9"}).code, 0);
  EXPECT_NE(snapshot(dir_ / "a"), snapshot(dir_ / "c"));
}

TEST_F(Cli, TrainDemoValidatesKnobs) {
  EXPECT_EQ(run({"train-demo", "--out", (dir_ / "x").string(), "--lr", "-1"}).code, 3);
  EXPECT_EQ(run({"train-demo", "--out", (dir_ / "x").string(), "--keep-fraction", "0"}).code, 3);
  EXPECT_EQ(run({"train-demo", "--out", (dir_ / "x").string(), "--per-class", "0"}).code, 3);
  EXPECT_FALSE(fs::exists(dir_ / "x" / "training_log.jsonl"));
}

TEST_F(Cli, CaptionDemoSingleScene) {
  const auto r = run({"caption-demo", "--scene", "red:ball", "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "a red ball\n");
  EXPECT_EQ(run({"caption-demo", "--scene", "mauve:ball"}).code, 3);
  EXPECT_EQ(run({"caption-demo"}).code, 4);
}

TEST_F(Cli, CaptionDemoBatchThenEvaluate) {
  const auto r = run({"caption-demo", "--out", (dir_ / "cap").string(), "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto truth = frk::dataio::read_caption_set(dir_ / "cap" / "test.json");
  const auto preds = frk::dataio::read_predictions(dir_ / "cap" / "prediction.json");
  ASSERT_EQ(truth.size(), preds.size());
  for (const auto& [k, caption] : preds) {
    EXPECT_TRUE(truth.count(k)) << k;
    EXPECT_EQ(truth.at(k).size(), 5u);
    EXPECT_EQ(caption.find("sos"), std::string::npos);
    EXPECT_EQ(caption.find("eos"), std::string::npos);
  }
  const auto ev = run({"evaluate", "--test", (dir_ / "cap" / "test.json").string(), "--predictions",
                       (dir_ / "cap" / "prediction.json").string(), "--out", (dir_ / "report.json").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const json rep = json::parse(read_text_file(dir_ / "report.json"));
  EXPECT_EQ(rep.at("per_image").size(), truth.size());
}

TEST_F(Cli, EvaluateHandFixture) {
  // prediction equals the first reference; the other four are disjoint from it
  const frk::dataio::CaptionSet truth{
      {"one.jpg", {"sos a red ball eos", "sos x eos", "sos y eos", "sos z eos", "sos w eos"}},
      {"two.jpg", {"sos the blue cup eos", "sos q eos", "sos r eos", "sos s eos", "sos t eos"}}};
  write_text_file(dir_ / "test.json", frk::dataio::caption_set_json(truth));
  frk::dataio::write_predictions({{"one.jpg", "a red ball"}, {"two.jpg", "the blue cup"}}, dir_ / "pred.json");
  const auto r = run({"evaluate", "--test", (dir_ / "test.json").string(), "--predictions", (dir_ / "pred.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_NEAR(rep.at("bleu").at("bleu_1").get<double>(), 0.2, 1e-12);
  EXPECT_NEAR(rep.at("rouge").at("rouge_l").get<double>(), 0.2, 1e-12);
  for (const char* row : {"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "METEOR"}) {
    EXPECT_NE(r.err.find(row), std::string::npos) << row;
  }
}

TEST_F(Cli, EvaluateKeyMismatch) {
  const frk::dataio::CaptionSet truth{{"one.jpg", {"sos a eos", "sos b eos", "sos c eos", "sos d eos", "sos e eos"}}};
  write_text_file(dir_ / "test.json", frk::dataio::caption_set_json(truth));
  write_text_file(dir_ / "empty.json", "{}\n");
  auto r = run({"evaluate", "--test", (dir_ / "test.json").string(), "--predictions", (dir_ / "empty.json").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("one.jpg"), std::string::npos) << r.err;

  frk::dataio::write_predictions({{"one.jpg", "a"}, {"stray.jpg", "b"}}, dir_ / "extra.json");
  r = run({"evaluate", "--test", (dir_ / "test.json").string(), "--predictions", (dir_ / "extra.json").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("stray.jpg"), std::string::npos) << r.err;

  write_text_file(dir_ / "dup.json", R"({"one.jpg": "a", "one.jpg": "b"})");
  r = run({"evaluate", "--test", (dir_ / "test.json").string(), "--predictions", (dir_ / "dup.json").string()});
  EXPECT_EQ(r.code, 2);
}
