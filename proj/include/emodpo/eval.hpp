#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "emodpo/corpus.hpp"
#include "emodpo/errors.hpp"
#include "emodpo/model.hpp"
#include "emodpo/objectives.hpp"
#include "emodpo/training.hpp"

namespace emodpo {

/// Desk-scale analogues of the emotion-recognition, intelligibility,
/// prosody-similarity and emotion-similarity columns.
struct EvalReport {
  std::array<double, kEmotionCount> ser{};  // oracle recognition accuracy per emotion
  std::array<std::size_t, kEmotionCount> per_emotion_count{};
  double ser_macro = 0.0;
  double cter = 0.0;          // content-channel token error rate, lower is better
  double prosody_corr = 0.0;  // mean Pearson correlation of prosody contours
  double hist_cosine = 0.0;   // mean cosine of 9-bin prosody histograms
  double invalid_rate = 0.0;  // non-speech tokens among generated tokens
  std::size_t samples = 0;
};

/// Produces the speech tokens for one test item (prompt = the item's
/// emotion, speaker and text).
using Generator = std::function<std::vector<int>(const Utterance&)>;

/// Pearson correlation; 0 when either side has no variance or fewer than
/// two points.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n < 2) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct ItemScore {
  bool ser_correct = false;
  double content_errors = 0.0;
  double prosody_corr = 0.0;
  double hist_cosine = 0.0;
  std::size_t invalid = 0;
  std::size_t generated = 0;
};

/// Scores one generated sequence against its reference utterance.
///
/// Emotion recognition runs the oracle on the speech tokens of the output
/// (other ids dropped); an output without speech tokens counts as wrong.
/// Content errors count every reference position whose generated token is
/// missing, not speech, or carries a different content value. The prosody
/// contour treats non-speech positions as level `prosody_levels`, the same
/// value used for the histograms' out-of-range bin.
inline ItemScore score_item(const Vocabulary& vocab, std::span<const int> generated, const Utterance& reference) {
  ItemScore s;
  s.generated = generated.size();
  std::vector<int> speech;
  for (int id : generated) {
    if (vocab.is_speech(id)) speech.push_back(id);
    else ++s.invalid;
  }
  s.ser_correct = !speech.empty() && oracle_classify(vocab, speech) == reference.emotion;

  const std::size_t L = reference.speech.size();
  for (std::size_t i = 0; i < L; ++i) {
    const bool ok = i < generated.size() && vocab.is_speech(generated[i]) &&
                    vocab.content_of(generated[i]) == vocab.content_of(reference.speech[i]);
    if (!ok) s.content_errors += 1.0;
  }

  const int bins = vocab.prosody_levels() + 1;
  auto level = [&](int id) { return vocab.is_speech(id) ? vocab.prosody_of(id) : vocab.prosody_levels(); };
  std::vector<double> gen_contour, ref_contour;
  for (std::size_t i = 0; i < std::min(L, generated.size()); ++i) {
    gen_contour.push_back(level(generated[i]));
    ref_contour.push_back(level(reference.speech[i]));
  }
  s.prosody_corr = pearson(gen_contour, ref_contour);

  std::vector<double> hg(static_cast<std::size_t>(bins), 0.0), hr(static_cast<std::size_t>(bins), 0.0);
  for (int id : generated) hg[static_cast<std::size_t>(level(id))] += 1.0;
  for (int id : reference.speech) hr[static_cast<std::size_t>(level(id))] += 1.0;
  double dot = 0.0, ng = 0.0, nr = 0.0;
  for (std::size_t b = 0; b < hg.size(); ++b) {
    dot += hg[b] * hr[b];
    ng += hg[b] * hg[b];
    nr += hr[b] * hr[b];
  }
  s.hist_cosine = (ng > 0.0 && nr > 0.0) ? dot / std::sqrt(ng * nr) : 0.0;
  return s;
}

/// Aggregates item scores in test-set order.
inline EvalReport evaluate(const Vocabulary& vocab, std::span<const Utterance> test, const Generator& generate) {
  if (test.empty()) throw InputDomainError("evaluate: empty test set");
  EvalReport r;
  std::array<std::size_t, kEmotionCount> correct{};
  double content_errors = 0.0, expected = 0.0;
  std::size_t invalid = 0, generated = 0;
  for (const auto& ref : test) {
    const auto gen = generate(ref);
    const ItemScore s = score_item(vocab, gen, ref);
    const auto e = static_cast<std::size_t>(to_int(ref.emotion));
    ++r.per_emotion_count[e];
    correct[e] += s.ser_correct;
    content_errors += s.content_errors;
    expected += static_cast<double>(ref.speech.size());
    r.prosody_corr += s.prosody_corr;
    r.hist_cosine += s.hist_cosine;
    invalid += s.invalid;
    generated += s.generated;
  }
  r.samples = test.size();
  int present = 0;
  for (std::size_t e = 0; e < kEmotionCount; ++e) {
    if (r.per_emotion_count[e] == 0) continue;
    r.ser[e] = static_cast<double>(correct[e]) / static_cast<double>(r.per_emotion_count[e]);
    r.ser_macro += r.ser[e];
    ++present;
  }
  r.ser_macro /= static_cast<double>(present);
  r.cter = expected > 0.0 ? content_errors / expected : 0.0;
  r.prosody_corr /= static_cast<double>(r.samples);
  r.hist_cosine /= static_cast<double>(r.samples);
  r.invalid_rate = generated ? static_cast<double>(invalid) / static_cast<double>(generated) : 0.0;
  return r;
}

/// Model-backed generator: prompt from the instruction template, at most
/// 2 * len(text) + 4 new tokens. Sampled policies draw from the "sample"
/// substream of `seed`, one stream per item.
inline Generator model_generator(const ModelParams<float>& params, SamplingPolicy policy, std::uint64_t seed = 0) {
  auto item = std::make_shared<std::uint64_t>(0);
  return [&params, policy, seed, item](const Utterance& ref) {
    const Vocabulary vocab(params.config.vocab);
    Utterance prompt = ref;
    prompt.speech.clear();
    const auto tokens = encode_instruction(vocab, prompt, false).tokens;
    Rng rng(substream_seed(seed, "sample", (*item)++));
    return sample(params, tokens, policy, rng, 2 * static_cast<int>(ref.text.size()) + 4).tokens;
  };
}

/// Chance baseline: uniformly random speech tokens of the reference length.
inline Generator random_speech_generator(const Vocabulary& vocab, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(substream_seed(seed, "random-generator"));
  return [vocab, rng](const Utterance& ref) {
    std::vector<int> out(ref.speech.size());
    for (int& id : out) id = vocab.speech_begin() + static_cast<int>(rng->below(static_cast<std::uint64_t>(vocab.speech_size())));
    return out;
  };
}

inline EvalReport evaluate(const ModelParams<float>& params, std::span<const Utterance> test,
                           SamplingPolicy policy = SamplingPolicy::greedy(), std::uint64_t seed = 0) {
  return evaluate(Vocabulary(params.config.vocab), test, model_generator(params, policy, seed));
}

struct MarginStats {
  double mean = 0.0;
  double median = 0.0;
  double fraction_positive = 0.0;  // strictly positive; ties count as not positive
  std::size_t count = 0;
  std::vector<double> values;
};

/// Statistics of the JS-corrected DPO logits from precomputed sequence
/// scores (same pair order in both).
inline MarginStats margin_stats(const ReferenceScores& policy, const ReferenceScores& reference) {
  const std::size_t n = policy.chosen.size();
  if (n == 0) throw InputDomainError("margin_report: empty pair set");
  if (policy.rejected.size() != n || reference.chosen.size() != n || reference.rejected.size() != n) {
    throw InputDomainError("margin_report: score vectors differ in length");
  }
  MarginStats m;
  m.count = n;
  std::size_t positive = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const PairLogprobs<double> lp{policy.chosen[i], reference.chosen[i], policy.rejected[i], reference.rejected[i]};
    const double c = js_dpo_logits(lp).corrected;
    m.values.push_back(c);
    m.mean += c;
    positive += c > 0.0;
  }
  m.mean /= static_cast<double>(n);
  m.fraction_positive = static_cast<double>(positive) / static_cast<double>(n);
  std::vector<double> sorted = m.values;
  std::sort(sorted.begin(), sorted.end());
  m.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return m;
}

/// JS-corrected DPO logits of `pi` against `pi_sft` over the given pairs.
inline MarginStats margin_report(const ModelParams<float>& pi, const ModelParams<float>& pi_sft,
                                 std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw InputDomainError("margin_report: empty pair set");
  return margin_stats(score_reference(pi, pairs), score_reference(pi_sft, pairs));
}

}  // namespace emodpo
