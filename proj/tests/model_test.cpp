#include <gtest/gtest.h>

#include <cmath>

#include "emodpo/corpus.hpp"
#include "emodpo/model.hpp"
#include "emodpo/objectives.hpp"

using namespace emodpo;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.ffn = 32;
  c.max_len = 40;
  return c;
}

ModelParams<double> random_params(const ModelConfig& c, std::uint64_t seed, double std = 0.3) {
  Rng rng(seed);
  auto p = init_params<double>(c, rng, std);
  // Perturb the scale/offset arrays too, so they are not trivially 1 and 0.
  for (const auto& a : p.layout.arrays()) {
    if (a.rows == 1) {
      for (std::size_t i = 0; i < a.size(); ++i) p.values[a.offset + i] += 0.1 * rng.normal();
    }
  }
  return p;
}

std::vector<EncodedSequence> sample_sequences(int n, std::uint64_t seed) {
  CorpusConfig c;
  c.per_emotion = n;
  c.seed = seed;
  const Vocabulary v;
  std::vector<EncodedSequence> out;
  for (const auto& u : build_sft_corpus(c)) out.push_back(encode_instruction(v, u, true));
  return out;
}

// Brute-force chain rule: for every target token, run the model on the
// prefix alone and multiply the softmax probabilities.
double chain_rule_logprob(const ModelParams<double>& p, const EncodedSequence& s) {
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  double product = 1.0;
  for (std::size_t t = 1; t < s.tokens.size(); ++t) {
    if (!s.loss_mask[t]) continue;
    const std::vector<int> prefix(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(t));
    const auto a = forward_sequence(p, prefix);
    const double* row = a.logits.data() + (t - 1) * V;
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v]);
    product *= std::exp(row[static_cast<std::size_t>(s.tokens[t])]) / z;
  }
  return std::log(product);
}

}  // namespace

TEST(ModelParams, ParameterCountIsExact) {
  const ModelConfig c;
  const std::size_t d = 64, V = 114, F = 256, T = 64, L = 2;
  const std::size_t per_block = 4 * (d * d + d) + 4 * d + (d * F + F) + (F * d + d);
  const std::size_t expected = V * d + T * d + L * per_block + 2 * d + d * V + V;
  EXPECT_EQ(ParamLayout(c).total(), expected);
  EXPECT_EQ(ModelParams<float>(c).count(), expected);
  std::size_t sum = 0;
  for (const auto& a : ParamLayout(c).arrays()) {
    EXPECT_EQ(a.offset, sum);
    sum += a.size();
  }
  EXPECT_EQ(sum, expected);
}

TEST(ModelParams, InitIsFiniteAndSeeded) {
  const ModelConfig c;
  Rng a(1), b(1);
  const auto p = init_params<float>(c, a);
  EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(p.values, init_params<float>(c, b).values);
}

TEST(Forward, Causality) {
  const auto c = small_config();
  const auto p = random_params(c, 3);
  auto seqs = sample_sequences(1, 2);
  std::vector<int> tokens = seqs[0].tokens;
  const std::size_t V = static_cast<std::size_t>(c.vocab_size());
  const auto base = forward_sequence(p, tokens);
  for (std::size_t t = 1; t < tokens.size(); t += 3) {
    auto changed = tokens;
    changed[t] = (changed[t] + 7) % static_cast<int>(V);
    const auto a = forward_sequence(p, changed);
    for (std::size_t i = 0; i < t * V; ++i) ASSERT_EQ(a.logits[i], base.logits[i]) << "position " << i / V;
    bool differs = false;
    for (std::size_t i = t * V; i < (t + 1) * V; ++i) differs |= a.logits[i] != base.logits[i];
    EXPECT_TRUE(differs);
  }
}

TEST(Forward, ZeroParamsGiveUniformSoftmax) {
  const ModelParams<double> p(small_config());
  const auto seqs = sample_sequences(1, 1);
  const auto batch = make_batch(seqs, Vocabulary().pad());
  for (double v : forward_logits(p, batch)) EXPECT_EQ(v, 0.0);
}

TEST(Forward, PaddingIndependence) {
  const auto c = small_config();
  const auto p = random_params(c, 4);
  const auto seqs = sample_sequences(2, 9);
  const std::vector<EncodedSequence> one = {seqs[0]};
  const std::vector<EncodedSequence> two = {seqs[0], seqs[7]};
  const auto b1 = make_batch(one, Vocabulary().pad());
  const auto b2 = make_batch(two, Vocabulary().pad());
  const auto l1 = forward_logits(p, b1);
  const auto l2 = forward_logits(p, b2);
  const std::size_t V = static_cast<std::size_t>(c.vocab_size());
  for (std::size_t t = 0; t < static_cast<std::size_t>(b1.time); ++t) {
    for (std::size_t v = 0; v < V; ++v) EXPECT_NEAR(l1[t * V + v], l2[t * V + v], 1e-12);
  }
}

TEST(Forward, SoftmaxRowsNormalise) {
  const auto p = random_params(small_config(), 5, 1.0);
  const auto seqs = sample_sequences(1, 3);
  const auto a = forward_sequence(p, seqs[2].tokens);
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  std::vector<double> ls(V);
  for (int t = 0; t < a.length; ++t) {
    log_softmax<double>(std::span(a.logits).subspan(static_cast<std::size_t>(t) * V, V), ls);
    double sum = 0.0;
    for (double x : ls) sum += std::exp(x);
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Forward, OverlongSequenceIsRejected) {
  const auto p = random_params(small_config(), 6);
  const std::vector<int> tokens(41, 3);
  EXPECT_THROW(forward_sequence(p, tokens), InputDomainError);
  const std::vector<int> bad = {0, 500};
  EXPECT_THROW(forward_sequence(p, bad), InputDomainError);
}

TEST(SequenceLogprob, UniformModel) {
  const ModelParams<double> p{ModelConfig{}};
  EncodedSequence s;
  s.tokens = std::vector<int>(12, 40);
  s.loss_mask = std::vector<std::uint8_t>(12, 0);
  for (int t = 4; t < 12; ++t) s.loss_mask[static_cast<std::size_t>(t)] = 1;
  const std::vector<EncodedSequence> seqs = {s};
  const auto res = sequence_logprob(p, make_batch(seqs, 113));
  EXPECT_NEAR(res.values[0], -8.0 * std::log(114.0), 1e-12);
}

TEST(SequenceLogprob, MatchesChainRuleOracle) {
  const auto p = random_params(small_config(), 8, 0.5);
  const auto seqs = sample_sequences(2, 4);
  const auto res = sequence_logprob(p, make_batch(seqs, Vocabulary().pad()));
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const double lp = res.values[i];
    EXPECT_LE(lp, 0.0);
    EXPECT_NEAR(lp, chain_rule_logprob(p, seqs[i]), 1e-10);
    // sft_loss is the negated chain-rule value
    EXPECT_NEAR(sft_loss(lp), -chain_rule_logprob(p, seqs[i]), 1e-10);
  }
}

TEST(SequenceLogprob, EmptyMaskIsZeroWithWarning) {
  const auto p = random_params(small_config(), 9);
  auto seqs = sample_sequences(1, 5);
  std::fill(seqs[1].loss_mask.begin(), seqs[1].loss_mask.end(), 0);
  const auto res = sequence_logprob(p, make_batch(seqs, Vocabulary().pad()));
  EXPECT_EQ(res.values[1], 0.0);
  EXPECT_EQ(res.empty_rows, std::vector<int>{1});
}

TEST(SequenceLogprob, AdditiveOverMaskSegments) {
  const auto p = random_params(small_config(), 10);
  const auto seqs = sample_sequences(1, 6);
  auto first = seqs[3];
  auto second = seqs[3];
  const std::size_t n = first.tokens.size();
  for (std::size_t t = 0; t < n; ++t) {
    if (t < n - 5) second.loss_mask[t] = 0;
    else first.loss_mask[t] = 0;
  }
  const std::vector<EncodedSequence> rows = {seqs[3], first, second};
  const auto res = sequence_logprob(p, make_batch(rows, Vocabulary().pad()));
  EXPECT_NEAR(res.values[0], res.values[1] + res.values[2], 1e-12);
}

TEST(Gradients, ZeroMaskGivesZeroGradient) {
  const auto p = random_params(small_config(), 11);
  auto seqs = sample_sequences(1, 7);
  for (auto& s : seqs) std::fill(s.loss_mask.begin(), s.loss_mask.end(), 0);
  const auto batch = make_batch(seqs, Vocabulary().pad());
  auto grad = p.zeros_like();
  gradients(p, SmoothedKlObjective<double>{0.1}, batch, grad);
  for (double g : grad.values) EXPECT_EQ(g, 0.0);
  gradients(p, SequenceNllObjective<double>{}, batch, grad);
  for (double g : grad.values) EXPECT_EQ(g, 0.0);
}

TEST(Gradients, DoublingWeightDoublesGradientExactly) {
  const auto p = random_params(small_config(), 12);
  const auto seqs = sample_sequences(1, 8);
  const auto batch = make_batch(seqs, Vocabulary().pad());
  auto g1 = p.zeros_like();
  auto g2 = p.zeros_like();
  gradients(p, SmoothedKlObjective<double>{0.1, 1.0}, batch, g1);
  gradients(p, SmoothedKlObjective<double>{0.1, 2.0}, batch, g2);
  for (std::size_t i = 0; i < g1.count(); ++i) ASSERT_EQ(g2.values[i], 2.0 * g1.values[i]);
}

TEST(Gradients, NonFiniteLossNamesComponent) {
  const auto p = random_params(small_config(), 13);
  const auto seqs = sample_sequences(1, 8);
  const auto batch = make_batch(seqs, Vocabulary().pad());
  auto grad = p.zeros_like();
  auto broken = [](const SequenceBatch&, std::span<const double>, std::span<double>) {
    LossBreakdown<double> b;
    b.kl = std::nan("");
    b.total = b.kl;
    return b;
  };
  try {
    gradients(p, broken, batch, grad);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.component(), "kl");
  }
}

TEST(Sample, GreedyIsDeterministicAndTopOneMatches) {
  const auto c = small_config();
  const auto p = random_params(c, 14, 0.5);
  const Vocabulary v;
  const auto seqs = sample_sequences(1, 9);
  const auto prompt = encode_instruction(v, decode_instruction(v, seqs[0].tokens), false).tokens;
  Rng r1(1), r2(2), r3(3);
  const auto g1 = sample(p, prompt, SamplingPolicy::greedy(), r1, 12);
  const auto g2 = sample(p, prompt, SamplingPolicy::greedy(), r2, 12);
  const auto k1 = sample(p, prompt, SamplingPolicy::top_k_sampling(1, 0.7), r3, 12);
  EXPECT_EQ(g1.tokens, g2.tokens);
  EXPECT_EQ(g1.tokens, k1.tokens);
  EXPECT_LE(g1.tokens.size(), 12u);
}

TEST(Sample, TopKStaysInTopK) {
  const auto p = random_params(small_config(), 15, 1.0);
  const std::vector<int> prompt = {98, 96, 1, 2, 97};
  Rng rng(4);
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  for (int rep = 0; rep < 20; ++rep) {
    const auto g = sample(p, prompt, SamplingPolicy::top_k_sampling(3, 1.0), rng, 1);
    if (g.terminated) continue;
    const auto a = forward_sequence(p, prompt);
    const double* row = a.logits.data() + (prompt.size() - 1) * V;
    int better = 0;
    for (std::size_t v = 0; v < V; ++v) better += row[v] > row[static_cast<std::size_t>(g.tokens[0])];
    EXPECT_LT(better, 3);
  }
}

TEST(Sample, EmptyPromptIsRejected) {
  const auto p = random_params(small_config(), 16);
  Rng rng(0);
  EXPECT_THROW(sample(p, std::vector<int>{}, SamplingPolicy::greedy(), rng, 4), InputDomainError);
}

TEST(PositionIds, RestartAfterPromptAndSeparators) {
  const ModelConfig c;
  const Vocabulary v;
  Utterance u;
  u.emotion = Emotion::Sad;
  u.text = {4, 9};
  u.speech = {40, 41, 42, 43};
  const auto tokens = encode_instruction(v, u, true).tokens;  // E <eop> x x </s> y y y y </s>
  const std::vector<int> expected = {0, 1, 0, 1, 2, 0, 1, 2, 3, 4};
  EXPECT_EQ(position_ids(c, tokens), expected);

  ModelConfig absolute = c;
  absolute.segment_positions = false;
  const auto ids = position_ids(absolute, tokens);
  for (std::size_t t = 0; t < ids.size(); ++t) EXPECT_EQ(ids[t], static_cast<int>(t));
}

TEST(PositionIds, SpeechPositionsIgnoreTextLength) {
  // Speech token i sees the same positional row whatever the text length.
  const ModelConfig c;
  const Vocabulary v;
  for (int n : {3, 8}) {
    Utterance u;
    u.text.assign(static_cast<std::size_t>(n), 1);
    u.speech.assign(static_cast<std::size_t>(2 * n), v.speech_token(1, 3));
    const auto tokens = encode_instruction(v, u, true).tokens;
    const auto ids = position_ids(c, tokens);
    const std::size_t first_speech = tokens.size() - u.speech.size() - 1;
    for (std::size_t i = 0; i < u.speech.size(); ++i) EXPECT_EQ(ids[first_speech + i], static_cast<int>(i));
  }
}
