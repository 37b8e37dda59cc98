#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "emodpo/checkpoint.hpp"
#include "emodpo/corpus.hpp"
#include "emodpo/training.hpp"

using namespace emodpo;
namespace fs = std::filesystem;

namespace {

class Checkpoint : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("emodpo_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
};

TrainConfig small_config() {
  TrainConfig c;
  c.model.d_model = 16;
  c.model.ffn = 32;
  c.model.max_len = 32;
  c.sft_batch_size = 4;
  return c;
}

std::vector<Utterance> small_corpus() {
  CorpusConfig cc;
  cc.per_emotion = 6;
  return build_sft_corpus(cc);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

void replace_line(const fs::path& p, const std::string& from, const std::string& to) {
  std::string s = slurp(p);
  const auto at = s.find(from);
  ASSERT_NE(at, std::string::npos) << from;
  s.replace(at, from.size(), to);
  spit(p, s);
}

template <typename Fn>
std::string load_error(Fn&& fn) {
  try {
    fn();
  } catch (const IoError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_F(Checkpoint, ParamsRoundTripIsBitExact) {
  const TrainConfig c = small_config();
  const auto p = make_sft_state(c).params;
  save_params(p, dir_);
  const auto q = load_params(dir_);
  EXPECT_EQ(q.config, p.config);
  ASSERT_EQ(q.values.size(), p.values.size());
  EXPECT_EQ(std::memcmp(q.values.data(), p.values.data(), p.values.size() * sizeof(float)), 0);
  EXPECT_FALSE(fs::exists(dir_ / "params.bin.tmp"));
  EXPECT_EQ(fs::file_size(dir_ / "params.bin"), 4 * p.count());
}

TEST_F(Checkpoint, ParamsAreLittleEndianFloat32) {
  TrainConfig c = small_config();
  ModelParams<float> p(c.model);
  p.values[0] = 1.0f;  // 0x3f800000
  p.values[1] = -2.5f;  // 0xc0200000
  save_params(p, dir_);
  const std::string bytes = slurp(dir_ / "params.bin");
  const unsigned char expected[] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]), expected[i]);
}

TEST_F(Checkpoint, ManifestListsArraysInLayoutOrder) {
  const TrainConfig c = small_config();
  const auto p = make_sft_state(c).params;
  save_params(p, dir_);
  const Manifest m = read_manifest(dir_);
  EXPECT_EQ(m.kind, "params");
  EXPECT_EQ(m.param_count, p.count());
  ASSERT_EQ(m.arrays.size(), p.layout.arrays().size());
  EXPECT_EQ(m.arrays.front(), "tok_emb:114:16");
  EXPECT_EQ(m.arrays.back(), "out.b:1:114");
}

TEST_F(Checkpoint, ResumeThroughDiskMatchesUninterruptedStep) {
  const auto corpus = small_corpus();
  const TrainConfig c = small_config();
  TrainState direct = make_sft_state(c);
  continue_sft(direct, corpus, c, {}, 3);
  save_state(direct, dir_);
  TrainState restored = load_state(dir_);

  continue_sft(direct, corpus, c, {}, 1);
  continue_sft(restored, corpus, c, {}, 1);
  EXPECT_EQ(restored.step, direct.step);
  EXPECT_EQ(restored.cursor, direct.cursor);
  EXPECT_EQ(std::memcmp(restored.params.values.data(), direct.params.values.data(),
                        direct.params.count() * sizeof(float)),
            0);
  EXPECT_EQ(restored.adam_m, direct.adam_m);
  EXPECT_EQ(restored.adam_v, direct.adam_v);
  EXPECT_TRUE(restored.rng == direct.rng);

  // Crossing an epoch boundary exercises the restored shuffle stream.
  continue_sft(direct, corpus, c);
  continue_sft(restored, corpus, c);
  EXPECT_EQ(restored.params.values, direct.params.values);
  EXPECT_EQ(restored.epoch_history, direct.epoch_history);
}

TEST_F(Checkpoint, StageOneCheckpointAsReferenceMatchesInMemory) {
  const TrainConfig c = small_config();
  TrainState s = make_sft_state(c);
  continue_sft(s, small_corpus(), c);
  save_state(s, dir_);
  const auto ref = load_params(dir_);
  EXPECT_EQ(params_hash(ref), params_hash(s.params));
  EXPECT_EQ(ref.values, s.params.values);
}

TEST_F(Checkpoint, CorruptManifestNamesTheField) {
  save_params(make_sft_state(small_config()).params, dir_);
  const auto manifest = dir_ / "manifest.txt";
  const std::string good = slurp(manifest);

  replace_line(manifest, "model.d_model=16", "model.d_model=sixteen");
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'model.d_model'"), std::string::npos);

  spit(manifest, good);
  replace_line(manifest, "model.heads=2\n", "");
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'model.heads' missing"), std::string::npos);

  spit(manifest, good);
  replace_line(manifest, "format_version=1", "format_version=2");
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'format_version'"), std::string::npos);

  spit(manifest, good);
  replace_line(manifest, "param_count=", "param_count=1");
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'param_count'"), std::string::npos);

  spit(manifest, good);
  replace_line(manifest, "tok_emb:114:16", "tok_emb:115:16");
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'arrays'"), std::string::npos);
}

TEST_F(Checkpoint, TruncatedOrAlteredParamsAreRejected) {
  save_params(make_sft_state(small_config()).params, dir_);
  const auto bin = dir_ / "params.bin";
  std::string bytes = slurp(bin);
  spit(bin, bytes.substr(0, bytes.size() - 6));
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("truncated"), std::string::npos);
  bytes[100] ^= 0x01;
  spit(bin, bytes);
  EXPECT_NE(load_error([&] { load_params(dir_); }).find("'params_fnv'"), std::string::npos);
}

TEST_F(Checkpoint, StateFieldsAreChecked) {
  const TrainConfig c = small_config();
  TrainState s = make_sft_state(c);
  continue_sft(s, small_corpus(), c, {}, 2);
  save_state(s, dir_);
  replace_line(dir_ / "state.txt", "rng=", "rng=garbage ");
  EXPECT_NE(load_error([&] { load_state(dir_); }).find("'rng'"), std::string::npos);

  fs::remove_all(dir_);
  save_params(s.params, dir_);
  EXPECT_NE(load_error([&] { load_state(dir_); }).find("'kind'"), std::string::npos);
  EXPECT_THROW(load_state(dir_ / "missing"), IoError);
}

TEST(VocabCheck, DiagnosticNamesBothSources) {
  VocabConfig a, b;
  b.text_size = 40;
  EXPECT_NO_THROW(require_same_vocab(a, "left/manifest.txt", a, "right/manifest.txt"));
  try {
    require_same_vocab(a, "left/manifest.txt", b, "right/manifest.txt");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("left/manifest.txt"), std::string::npos);
    EXPECT_NE(msg.find("right/manifest.txt"), std::string::npos);
    EXPECT_NE(msg.find("text_size=40"), std::string::npos);
  }
}

TEST_F(Checkpoint, SameSeedTrainingGivesIdenticalBytes) {
  const auto corpus = small_corpus();
  const TrainConfig c = small_config();
  for (const char* sub : {"a", "b"}) {
    TrainState s = make_sft_state(c);
    continue_sft(s, corpus, c);
    save_state(s, dir_ / sub);
  }
  for (const char* f : {"params.bin", "optimizer.bin", "state.txt", "manifest.txt"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
}
