#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "emodpo/corpus.hpp"
#include "emodpo/errors.hpp"
#include "emodpo/model.hpp"
#include "emodpo/objectives.hpp"
#include "emodpo/rng.hpp"

namespace emodpo {

struct TrainConfig {
  int sft_epochs = 2;
  int dpo_epochs = 3;
  int sft_batch_size = 8;
  int batch_size = 8;  // stage-2 pairs per batch
  double sft_lr = 3e-3;
  double dpo_lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;
  LossConfig loss{};
  ModelConfig model{};

  void validate() const {
    if (sft_epochs < 1 || dpo_epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1 || sft_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
    if (!(sft_lr > 0.0) || !(dpo_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    loss.validate();
    model.validate();
  }
};

/// One optimisation step's log record.
struct StepRecord {
  std::string stage;
  std::uint64_t step = 0;
  int epoch = 0;
  LossBreakdown<double> loss;
  double grad_norm = 0.0;
  double wall_seconds = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Everything needed to resume training bit-exactly: parameters, Adam
/// moments, the step counter, the shuffle stream and the position within
/// the current epoch.
struct TrainState {
  std::string stage;
  ModelParams<float> params;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  std::uint64_t step = 0;
  int epoch = 0;
  std::size_t cursor = 0;
  std::vector<std::size_t> order;
  Rng rng;
  double epoch_loss_sum = 0.0;
  std::size_t epoch_batches = 0;
  std::vector<double> epoch_history;

  TrainState(std::string stage_name, ModelParams<float> p, std::uint64_t shuffle_seed)
      : stage(std::move(stage_name)),
        params(std::move(p)),
        adam_m(params.count(), 0.0f),
        adam_v(params.count(), 0.0f),
        rng(shuffle_seed) {}
};

/// Global L2 norm, accumulated in double in index order.
inline double global_norm(std::span<const float> g) {
  double s = 0.0;
  for (float v : g) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// Rescales `g` to norm clip / (norm + 1e-6) when it exceeds `clip`. Returns
/// the pre-clip norm.
inline double clip_gradient(std::span<float> g, double clip) {
  const double norm = global_norm(g);
  if (norm > clip) {
    const float scale = static_cast<float>(clip / (norm + 1e-6));
    for (float& v : g) v *= scale;
  }
  return norm;
}

inline void adam_update(TrainState& s, std::span<const float> g, double lr, const TrainConfig& c) {
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(s.step));
  const float b1 = static_cast<float>(c.adam_beta1);
  const float b2 = static_cast<float>(c.adam_beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(c.adam_eps);
  auto& w = s.params.values;
  for (std::size_t i = 0; i < w.size(); ++i) {
    s.adam_m[i] = b1 * s.adam_m[i] + (1.0f - b1) * g[i];
    s.adam_v[i] = b2 * s.adam_v[i] + (1.0f - b2) * g[i] * g[i];
    w[i] -= step_size * s.adam_m[i] / (std::sqrt(s.adam_v[i] * inv_bc2) + eps);
  }
}

/// Drives a stage over `items` training examples in shuffled mini-batches
/// until `epochs` epochs are complete or `max_steps` more steps were taken.
/// `step_fn(indices, grad)` must fill `grad` and return the loss. The state
/// is only modified after a step's gradient was computed successfully, so
/// on NumericalError it still holds the last good parameters.
template <typename StepFn>
void run_stage(TrainState& s, std::size_t items, int epochs, int batch_size, double lr, const TrainConfig& c,
               StepFn&& step_fn, const StepCallback& on_step = {},
               std::uint64_t max_steps = UINT64_MAX) {
  if (items == 0) throw InputDomainError(s.stage + ": empty training set");
  const auto start = std::chrono::steady_clock::now();
  ModelParams<float> grad = s.params.zeros_like();
  std::uint64_t taken = 0;
  while (s.epoch < epochs && taken < max_steps) {
    if (s.cursor == 0) {
      s.order.resize(items);
      std::iota(s.order.begin(), s.order.end(), std::size_t{0});
      s.rng.shuffle(std::span(s.order));
    } else if (s.order.size() != items) {
      throw InputDomainError(s.stage + ": resumed state does not match the training set size");
    }
    const std::size_t end = std::min(items, s.cursor + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> idx(s.order.data() + s.cursor, end - s.cursor);
    const LossBreakdown<float> loss = step_fn(idx, grad);
    const double norm = clip_gradient(grad.values, c.clip_norm);
    if (!std::isfinite(norm)) throw NumericalError("gradient", s.stage + ": non-finite gradient norm");
    adam_update(s, grad.values, lr, c);
    ++taken;
    s.cursor = end;
    s.epoch_loss_sum += static_cast<double>(loss.total);
    ++s.epoch_batches;
    if (on_step) {
      StepRecord r;
      r.stage = s.stage;
      r.step = s.step;
      r.epoch = s.epoch;
      r.loss = {loss.total, loss.dpo, loss.kl, loss.sft, loss.margin};
      r.grad_norm = norm;
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      on_step(r);
    }
    if (s.cursor >= items) {
      s.epoch_history.push_back(s.epoch_loss_sum / static_cast<double>(s.epoch_batches));
      s.epoch_loss_sum = 0.0;
      s.epoch_batches = 0;
      s.cursor = 0;
      ++s.epoch;
    }
  }
}

/// Stage-1 state: fresh parameters from the "init" substream.
inline TrainState make_sft_state(const TrainConfig& c) {
  c.validate();
  Rng init(substream_seed(c.seed, "init"));
  return TrainState("sft", init_params<float>(c.model, init, c.init_std), substream_seed(c.seed, "shuffle", 1));
}

/// Instruction tuning: minimises the label-smoothed KL over shuffled
/// mini-batches of instruction-formatted utterances.
inline void continue_sft(TrainState& s, std::span<const Utterance> train, const TrainConfig& c,
                         const StepCallback& on_step = {}, std::uint64_t max_steps = UINT64_MAX) {
  const Vocabulary vocab(c.model.vocab);
  std::vector<EncodedSequence> encoded;
  encoded.reserve(train.size());
  for (const auto& u : train) encoded.push_back(encode_instruction(vocab, u, true));
  const SmoothedKlObjective<float> objective{static_cast<float>(c.loss.epsilon_smooth)};
  std::vector<EncodedSequence> rows;
  auto step = [&](std::span<const std::size_t> idx, ModelParams<float>& grad) {
    rows.clear();
    for (std::size_t i : idx) rows.push_back(encoded[i]);
    return gradients(s.params, objective, make_batch(rows, vocab.pad()), grad);
  };
  run_stage(s, train.size(), c.sft_epochs, c.sft_batch_size, c.sft_lr, c, step, on_step, max_steps);
}

struct SftResult {
  ModelParams<float> params;
  std::vector<double> epoch_history;
};

inline SftResult run_sft(std::span<const Utterance> train, const TrainConfig& c, const StepCallback& on_step = {}) {
  if (train.empty()) throw InputDomainError("run_sft: empty corpus");
  TrainState s = make_sft_state(c);
  continue_sft(s, train, c, on_step);
  return {std::move(s.params), std::move(s.epoch_history)};
}

/// FNV-1a over the raw parameter bytes.
template <typename T>
std::uint64_t params_hash(const ModelParams<T>& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(p.values.data());
  for (std::size_t i = 0; i < p.values.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Masked log-probabilities of every row of a chosen-then-rejected pair
/// batch, via the same path PreferenceObjective uses for the policy.
template <typename T>
std::vector<T> batch_logprobs(const ModelParams<T>& p, const SequenceBatch& b) {
  const auto logits = forward_logits(p, b);
  std::vector<T> out;
  for (int r = 0; r < b.rows; ++r) {
    out.push_back(detail::row_logprob(b, std::span<const T>(logits), std::span<T>(), r, T(0)));
  }
  return out;
}

/// Frozen reference log-probabilities per pair.
struct ReferenceScores {
  std::vector<float> chosen;
  std::vector<float> rejected;
};

inline ReferenceScores score_reference(const ModelParams<float>& reference, std::span<const PreferencePair> pairs) {
  const Vocabulary vocab(reference.config.vocab);
  ReferenceScores out;
  for (const auto& p : pairs) {
    const PreferencePair* one[] = {&p};
    const auto lp = batch_logprobs(reference, make_pair_batch(vocab, one));
    out.chosen.push_back(lp[0]);
    out.rejected.push_back(lp[1]);
  }
  return out;
}

inline TrainState make_dpo_state(const ModelParams<float>& pi_sft, const TrainConfig& c) {
  c.validate();
  return TrainState("dpo", pi_sft, substream_seed(c.seed, "shuffle", 2));
}

/// Emo-DPO stage: the policy in `s` is optimised with alpha * L_DPO +
/// gamma * L_KL + theta * L_SFT against the frozen `reference`.
inline void continue_dpo(TrainState& s, const ModelParams<float>& reference, std::span<const PreferencePair> pairs,
                         const TrainConfig& c, const StepCallback& on_step = {},
                         std::uint64_t max_steps = UINT64_MAX) {
  if (pairs.empty()) throw InputDomainError("run_dpo: empty preference set");
  if (!(reference.config == s.params.config)) throw ConfigError("policy and reference configurations differ");
  const std::uint64_t ref_hash = params_hash(reference);
  const Vocabulary vocab(reference.config.vocab);
  const ReferenceScores ref = score_reference(reference, pairs);
  std::vector<const PreferencePair*> rows;
  std::vector<float> rc, rr;
  auto step = [&](std::span<const std::size_t> idx, ModelParams<float>& grad) {
    rows.clear();
    rc.clear();
    rr.clear();
    for (std::size_t i : idx) {
      rows.push_back(&pairs[i]);
      rc.push_back(ref.chosen[i]);
      rr.push_back(ref.rejected[i]);
    }
    const PreferenceObjective<float> objective{c.loss, rc, rr};
    return gradients(s.params, objective, make_pair_batch(vocab, rows), grad);
  };
  run_stage(s, pairs.size(), c.dpo_epochs, c.batch_size, c.dpo_lr, c, step, on_step, max_steps);
  if (params_hash(reference) != ref_hash) throw Error("reference parameters were mutated during DPO");
}

inline ModelParams<float> run_dpo(const ModelParams<float>& pi_sft, std::span<const PreferencePair> pairs,
                                  const TrainConfig& c, const StepCallback& on_step = {}) {
  const ModelParams<float> reference = pi_sft;
  TrainState s = make_dpo_state(pi_sft, c);
  continue_dpo(s, reference, pairs, c, on_step);
  return std::move(s.params);
}

}  // namespace emodpo
