#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "emodpo/corpus.hpp"
#include "emodpo/eval.hpp"
#include "emodpo/training.hpp"

using namespace emodpo;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_model = 16;
  c.ffn = 32;
  c.max_len = 32;
  return c;
}

TrainConfig tiny_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.seed = seed;
  c.model = tiny_model();
  c.sft_epochs = 2;
  c.dpo_epochs = 1;
  c.sft_batch_size = 4;
  c.batch_size = 4;
  return c;
}

std::vector<Utterance> tiny_corpus(std::uint64_t seed = 0, int per_emotion = 6) {
  CorpusConfig cc;
  cc.per_emotion = per_emotion;
  cc.seed = seed;
  return build_sft_corpus(cc);
}

}  // namespace

TEST(Clip, PostClipNormWithinThreshold) {
  Rng rng(3);
  for (double scale : {0.01, 1.0, 50.0, 1e6}) {
    std::vector<float> g(1000);
    for (float& v : g) v = static_cast<float>(scale * rng.normal());
    const double before = global_norm(g);
    const double reported = clip_gradient(g, 1.0);
    EXPECT_DOUBLE_EQ(reported, before);
    EXPECT_LE(global_norm(g), 1.0 + 1e-6);
    if (before <= 1.0) {
      EXPECT_DOUBLE_EQ(global_norm(g), before);
    }
  }
}

TEST(Clip, ThresholdBoundIsTight) {
  std::vector<float> g(10, 3.0f);
  clip_gradient(g, 0.5);
  EXPECT_LE(global_norm(g), 0.5 + 1e-9);
  EXPECT_GT(global_norm(g), 0.5 - 1e-5);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstTheGradient) {
  // After one step the bias-corrected ratio is g / |g|, so each weight moves
  // by lr * sign(g) (up to eps).
  TrainConfig c;
  ModelConfig m = tiny_model();
  TrainState s("test", ModelParams<float>(m), 0);
  std::vector<float> g(s.params.count(), 0.0f);
  g[0] = 0.5f;
  g[1] = -2.0f;
  adam_update(s, g, 0.01, c);
  EXPECT_NEAR(s.params.values[0], -0.01f, 1e-7);
  EXPECT_NEAR(s.params.values[1], 0.01f, 1e-7);
  EXPECT_EQ(s.params.values[2], 0.0f);
  EXPECT_EQ(s.step, 1u);
}

TEST(Sft, LossDecreasesAndIsDeterministic) {
  const auto corpus = tiny_corpus();
  const auto a = run_sft(corpus, tiny_config());
  const auto b = run_sft(corpus, tiny_config());
  ASSERT_EQ(a.epoch_history.size(), 2u);
  EXPECT_LT(a.epoch_history[1], a.epoch_history[0]);
  EXPECT_EQ(a.params.values, b.params.values);
  EXPECT_TRUE(a.params.all_finite());
  const auto other = run_sft(corpus, tiny_config(1));
  EXPECT_NE(a.params.values, other.params.values);
}

TEST(Sft, InitialTokenNllIsLogVocabularySize) {
  // Fresh small-std weights predict nearly uniformly over 114 ids.
  const TrainConfig c;
  const auto p = make_sft_state(c).params;
  const Vocabulary v;
  std::vector<EncodedSequence> seqs;
  std::size_t targets = 0;
  for (const auto& u : tiny_corpus()) {
    seqs.push_back(encode_instruction(v, u, true));
    targets += seqs.back().masked_count();
  }
  const auto lp = sequence_logprob(p, make_batch(seqs, v.pad())).values;
  double nll = 0.0;
  for (double x : lp) nll -= x;
  nll /= static_cast<double>(targets);
  EXPECT_NEAR(nll, std::log(114.0), 0.05 * std::log(114.0));
}

TEST(Sft, InitialSmoothedKlMatchesUniformValue) {
  // KL(q || uniform) = ln V - H(q) with q = 0.9 on the target, 0.1 spread.
  const double V = 114.0, eps = 0.1;
  const double h = -(1 - eps) * std::log(1 - eps) - eps * std::log(eps / (V - 1));
  double first = 0.0;
  run_sft(tiny_corpus(), TrainConfig{}, [&](const StepRecord& r) {
    if (r.step == 1) first = r.loss.kl;
  });
  EXPECT_NEAR(first, std::log(V) - h, 0.05 * (std::log(V) - h));
}

TEST(Sft, ResumeAfterInterruptionIsBitExact) {
  const auto corpus = tiny_corpus();
  const TrainConfig c = tiny_config();
  TrainState full = make_sft_state(c);
  continue_sft(full, corpus, c);

  TrainState part = make_sft_state(c);
  continue_sft(part, corpus, c, {}, 5);
  EXPECT_EQ(part.step, 5u);
  continue_sft(part, corpus, c);
  EXPECT_EQ(part.params.values, full.params.values);
  EXPECT_EQ(part.adam_m, full.adam_m);
  EXPECT_EQ(part.adam_v, full.adam_v);
  EXPECT_EQ(part.epoch_history, full.epoch_history);
}

TEST(RunStage, NumericalErrorLeavesLastGoodState) {
  const TrainConfig c = tiny_config();
  TrainState s = make_sft_state(c);
  int calls = 0;
  std::vector<float> after_two;
  auto step = [&](std::span<const std::size_t>, ModelParams<float>& grad) {
    if (++calls == 3) throw NumericalError("loss", "injected");
    std::fill(grad.values.begin(), grad.values.end(), 0.01f);
    return LossBreakdown<float>{1.0f, 0.0f, 1.0f, 0.0f, 0.0f};
  };
  auto record = [&](const StepRecord& r) {
    if (r.step == 2) after_two = s.params.values;
  };
  try {
    run_stage(s, 40, 1, 4, 1e-3, c, step, record);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.component(), "loss");
  }
  EXPECT_EQ(s.step, 2u);
  EXPECT_EQ(s.params.values, after_two);
  EXPECT_EQ(s.cursor, 8u);
}

TEST(Dpo, FirstStepLossIsLogTwo) {
  const auto corpus = tiny_corpus();
  const auto sft = run_sft(corpus, tiny_config()).params;
  const auto pairs = build_pref_corpus(corpus, 0).pairs;
  for (double beta : {0.05, 0.1, 1.0}) {
    TrainConfig c = tiny_config();
    c.loss.beta = beta;
    std::vector<StepRecord> log;
    TrainState s = make_dpo_state(sft, c);
    continue_dpo(s, sft, pairs, c, [&](const StepRecord& r) { log.push_back(r); }, 1);
    ASSERT_EQ(log.size(), 1u);
    EXPECT_NEAR(log[0].loss.dpo, std::numbers::ln2, 1e-6);
    EXPECT_NEAR(log[0].loss.margin, 0.0, 1e-6);
  }
}

TEST(Dpo, ZeroWeightsLeaveParametersUnchanged) {
  const auto corpus = tiny_corpus();
  const auto sft = run_sft(corpus, tiny_config()).params;
  TrainConfig c = tiny_config();
  c.loss.alpha = c.loss.gamma = c.loss.theta = 0.0;
  const auto pi = run_dpo(sft, build_pref_corpus(corpus, 0).pairs, c);
  EXPECT_EQ(pi.values, sft.values);
}

TEST(Dpo, RaisesTrainingMarginAndKeepsReference) {
  const auto corpus = tiny_corpus();
  const auto sft = run_sft(corpus, tiny_config()).params;
  const auto hash = params_hash(sft);
  TrainConfig c = tiny_config();
  c.dpo_epochs = 2;
  c.dpo_lr = 1e-3;
  const auto pairs = build_pref_corpus(corpus, 0).pairs;
  const auto pi = run_dpo(sft, pairs, c);
  EXPECT_EQ(params_hash(sft), hash);
  const MarginStats m = margin_report(pi, sft, pairs);
  EXPECT_GT(m.mean, 0.0);
  EXPECT_GT(m.fraction_positive, 0.5);
}

TEST(Dpo, DetectsReferenceMutation) {
  const auto corpus = tiny_corpus();
  const TrainConfig c = tiny_config();
  ModelParams<float> reference = run_sft(corpus, c).params;
  TrainState s = make_dpo_state(reference, c);
  const auto pairs = build_pref_corpus(corpus, 0).pairs;
  EXPECT_THROW(continue_dpo(s, reference, pairs, c, [&](const StepRecord&) { reference.values[0] += 1.0f; }),
               Error);
}

TEST(Dpo, RejectsEmptyPairsAndMismatchedReference) {
  const TrainConfig c = tiny_config();
  const auto p = make_sft_state(c).params;
  TrainState s = make_dpo_state(p, c);
  EXPECT_THROW(continue_dpo(s, p, {}, c), InputDomainError);
  TrainConfig other = c;
  other.model.d_model = 32;
  const auto q = make_sft_state(other).params;
  const auto corpus = tiny_corpus();
  EXPECT_THROW(continue_dpo(s, q, build_pref_corpus(corpus, 0).pairs, c), ConfigError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.dpo_lr = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.loss.epsilon_smooth = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}
