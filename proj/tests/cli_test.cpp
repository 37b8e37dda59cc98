#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "emodpo_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static Outcome run(const std::string& args) {
    const fs::path out = root_ / "stdout.txt", err = root_ / "stderr.txt";
    const std::string cmd = "cd '" + root_.string() + "' && '" EMODPO_CLI "' " + args + " > '" + out.string() +
                            "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  // Small corpus and stage-1 checkpoint shared by the tests below.
  static void ensure_pipeline() {
    if (fs::exists(root_ / "sft" / "manifest.txt")) return;
    ASSERT_EQ(run("gen-corpus --out small --per-emotion 12 --seed 5").code, 0);
    ASSERT_EQ(run("train-sft --corpus small/corpus.tsv --out sft --seed 5 --d-model 16 --ffn 32").code, 0);
  }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, GenCorpusDefaultsAndDeterminism) {
  const Outcome a = run("gen-corpus --out c1");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("utterances 1000 pairs 1000"), std::string::npos) << a.out;
  ASSERT_EQ(run("gen-corpus --out c2").code, 0);
  EXPECT_EQ(slurp(root_ / "c1/corpus.tsv"), slurp(root_ / "c2/corpus.tsv"));
  EXPECT_EQ(slurp(root_ / "c1/pref.txt"), slurp(root_ / "c2/pref.txt"));
  EXPECT_TRUE(fs::exists(root_ / "c1/config.ini"));
}

TEST_F(Cli, InvalidSizeNamesTheFlag) {
  const Outcome r = run("gen-corpus --out bad --per-emotion 0");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--per-emotion"), std::string::npos) << r.err;
}

TEST_F(Cli, ResolvedConfigReproducesTheRun) {
  ASSERT_EQ(run("gen-corpus --out r1 --per-emotion 7 --seed 9 --noise 0.2").code, 0);
  ASSERT_EQ(run("--config r1/config.ini gen-corpus --out r2").code, 0);
  EXPECT_EQ(slurp(root_ / "r1/corpus.tsv"), slurp(root_ / "r2/corpus.tsv"));
}

TEST_F(Cli, TrainDpoStartsAtLogTwo) {
  ensure_pipeline();
  const Outcome r = run("train-dpo --corpus small/corpus.tsv --init sft --out dpo --seed 5 --dpo-epochs 1");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("dpo done"), std::string::npos);
  EXPECT_NE(r.out.find("margin"), std::string::npos);
  std::ifstream log(root_ / "dpo/train_log.jsonl");
  std::string line;
  std::getline(log, line);
  EXPECT_TRUE(nlohmann::json::parse(line).contains("config"));
  std::getline(log, line);
  const auto first = nlohmann::json::parse(line);
  EXPECT_NEAR(first["dpo"].get<double>(), 0.6931, 1e-4);
}

TEST_F(Cli, VocabularyMismatchNamesBothManifests) {
  ensure_pipeline();
  ASSERT_EQ(run("gen-corpus --out wide --per-emotion 4 --text-size 40").code, 0);
  const Outcome r = run("train-dpo --corpus wide/corpus.tsv --init sft --out never");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("wide/corpus.tsv"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("sft/manifest.txt"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingCheckpointIsAnIoError) {
  const Outcome r = run("infer --checkpoint nowhere --emotion Sad");
  EXPECT_EQ(r.code, 3);
}

TEST_F(Cli, ResumedTrainingMatchesStraightRun) {
  ensure_pipeline();
  const std::string common = "train-sft --corpus small/corpus.tsv --seed 5 --d-model 16 --ffn 32";
  ASSERT_EQ(run(common + " --out part --max-steps 7").code, 0);
  ASSERT_EQ(run(common + " --out resumed --resume part").code, 0);
  EXPECT_EQ(slurp(root_ / "resumed/params.bin"), slurp(root_ / "sft/params.bin"));
  EXPECT_EQ(slurp(root_ / "resumed/optimizer.bin"), slurp(root_ / "sft/optimizer.bin"));
}

TEST_F(Cli, EvalWritesReportsAndRandomInitIsNearChance) {
  ensure_pipeline();
  ASSERT_EQ(run("train-sft --corpus small/corpus.tsv --out init --max-steps 0").code, 0);
  const Outcome r = run("eval --checkpoint init --corpus small/corpus.tsv --held-out 0.5 --out ev");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(root_ / "ev/report.json"));
  const double ser = report["report"]["ser_macro"].get<double>();
  EXPECT_GE(ser, 0.1);
  EXPECT_LE(ser, 0.3);
  EXPECT_TRUE(fs::exists(root_ / "ev/report.txt"));
}

TEST_F(Cli, InferPrintsTokensAndVerdict) {
  ensure_pipeline();
  const Outcome r = run("infer --checkpoint sft --emotion neutral --text '1 2 3'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("speech"), std::string::npos);
  EXPECT_NE(r.out.find("oracle "), std::string::npos);
  EXPECT_EQ(run("infer --checkpoint sft --emotion Joyful").code, 2);
  EXPECT_EQ(run("infer --checkpoint sft --emotion Sad --text '1 x'").code, 2);
  EXPECT_EQ(run("infer --checkpoint sft --emotion Sad --text '99'").code, 2);
}

TEST_F(Cli, GradCheckPasses) {
  const Outcome r = run("grad-check --d-model 16 --ffn 32 --coordinates 20");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("total"), std::string::npos);
}

TEST_F(Cli, AblateEmitsTableCsvAndJson) {
  ensure_pipeline();
  const Outcome r = run(
      "ablate --out abl --seed 1 --d-model 16 --ffn 32 --sft-epochs 1 --dpo-epochs 1 --held-out 0.2 "
      "--corpus small/corpus.tsv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = nlohmann::json::parse(slurp(root_ / "abl/ablation.json"));
  EXPECT_EQ(rows.size(), 6u);
  const std::string csv = slurp(root_ / "abl/ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_NE(slurp(root_ / "abl/ablation.txt").find("Emo-DPO"), std::string::npos);
}
