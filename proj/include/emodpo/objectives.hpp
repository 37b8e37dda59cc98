#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emodpo/errors.hpp"
#include "emodpo/model.hpp"

namespace emodpo {

struct LossConfig {
  double beta = 0.1;
  double alpha = 1.0;  // DPO weight
  double gamma = 1.0;  // label-smoothed KL weight
  double theta = 1.0;  // SFT weight
  double epsilon_smooth = 0.1;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive and finite");
    for (double w : {alpha, gamma, theta}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
    }
    if (!(epsilon_smooth >= 0.0 && epsilon_smooth < 1.0)) {
      throw ConfigError("epsilon_smooth must lie in [0, 1)");
    }
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// ln(1 + e^x) without overflow.
template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T log_sigmoid(T x) {
  return -softplus(-x);
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// The four masked sequence log-probabilities entering the preference loss.
template <typename T>
struct PairLogprobs {
  T chosen_policy = T(0);
  T chosen_ref = T(0);
  T rejected_policy = T(0);
  T rejected_ref = T(0);
};

template <typename T>
struct JsDpoLogits {
  T raw = T(0);
  T jsd = T(0);
  T corrected = T(0);
};

/// raw = r_c - r_r; jsd = softplus(r_c) - softplus(r_r); corrected = raw - jsd,
/// where r_c and r_r are the chosen and rejected policy/reference log-ratios.
template <typename T>
JsDpoLogits<T> js_dpo_logits(const PairLogprobs<T>& p) {
  for (T v : {p.chosen_policy, p.chosen_ref, p.rejected_policy, p.rejected_ref}) {
    if (!std::isfinite(v)) throw NumericalError("dpo", "js_dpo_logits: non-finite log-probability");
  }
  const T rc = p.chosen_policy - p.chosen_ref;
  const T rr = p.rejected_policy - p.rejected_ref;
  JsDpoLogits<T> out;
  out.raw = rc - rr;
  out.jsd = softplus(rc) - softplus(rr);
  out.corrected = out.raw - out.jsd;
  return out;
}

/// Closed form of the corrected logits, ln sigma(r_c) - ln sigma(r_r). Only
/// used as a cross-check.
template <typename T>
T corrected_logits_closed_form(T rc, T rr) {
  return log_sigmoid(rc) - log_sigmoid(rr);
}

/// -ln sigma(beta * corrected), averaged over the pairs.
template <typename T>
T dpo_loss(std::span<const PairLogprobs<T>> pairs, T beta) {
  if (!(beta > T(0))) throw ConfigError("beta must be positive");
  if (pairs.empty()) return T(0);
  T sum = T(0);
  for (const auto& p : pairs) sum += softplus(-beta * js_dpo_logits(p).corrected);
  return sum / static_cast<T>(pairs.size());
}

template <typename T>
T dpo_loss(const PairLogprobs<T>& pair, T beta) {
  return dpo_loss(std::span<const PairLogprobs<T>>(&pair, 1), beta);
}

/// d(-ln sigma(beta * corrected)) / d(chosen_policy, rejected_policy) for one
/// pair. The reference terms are constants.
template <typename T>
struct DpoGrad {
  T chosen = T(0);
  T rejected = T(0);
};

template <typename T>
DpoGrad<T> dpo_loss_grad(const PairLogprobs<T>& p, T beta) {
  const T rc = p.chosen_policy - p.chosen_ref;
  const T rr = p.rejected_policy - p.rejected_ref;
  const T c = js_dpo_logits(p).corrected;
  const T dl_dc = -beta * sigmoid(-beta * c);
  // d corrected / d r_c = 1 - sigma(r_c); d corrected / d r_r = -(1 - sigma(r_r))
  return {dl_dc * sigmoid(-rc), -dl_dc * sigmoid(-rr)};
}

/// L_SFT = -ln pi(y+ | E, x).
template <typename T>
T sft_loss(T chosen_policy) {
  return -chosen_policy;
}

/// KL(P || softmax(logits)) for one position, P the label-smoothed target.
/// When `dlogits` is non-empty, adds scale * d(KL)/d(logits) to it.
template <typename T>
T kl_label_smooth_position(std::span<const T> logits, int target, T epsilon, std::span<T> dlogits = {},
                           T scale = T(1)) {
  const std::size_t V = logits.size();
  if (V < 2) throw InputDomainError("label smoothing needs at least two classes");
  if (target < 0 || static_cast<std::size_t>(target) >= V) throw InputDomainError("target out of range");
  const T on = T(1) - epsilon;
  const T off = epsilon / static_cast<T>(V - 1);
  const T mx = *std::max_element(logits.begin(), logits.end());
  T z = T(0);
  for (T v : logits) z += std::exp(v - mx);
  const T lz = mx + std::log(z);
  T kl = T(0);
  for (std::size_t v = 0; v < V; ++v) {
    const T pv = v == static_cast<std::size_t>(target) ? on : off;
    if (pv > T(0)) kl += pv * (std::log(pv) - (logits[v] - lz));
  }
  if (!dlogits.empty()) {
    for (std::size_t v = 0; v < V; ++v) {
      const T pv = v == static_cast<std::size_t>(target) ? on : off;
      dlogits[v] += scale * (std::exp(logits[v] - lz) - pv);
    }
  }
  return kl;
}

/// Label-smoothed KL averaged over masked positions. `logits` is
/// positions x vocab and already aligned with `targets` (row i predicts
/// targets[i]). Returns 0 when nothing is masked.
template <typename T>
T kl_label_smooth_loss(std::span<const T> logits, std::span<const int> targets,
                       std::span<const std::uint8_t> mask, T epsilon) {
  if (!(epsilon >= T(0) && epsilon < T(1))) throw ConfigError("epsilon_smooth must lie in [0, 1)");
  if (targets.size() != mask.size() || targets.empty() || logits.size() % targets.size() != 0) {
    throw InputDomainError("kl_label_smooth_loss: shape mismatch");
  }
  const std::size_t V = logits.size() / targets.size();
  T sum = T(0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    sum += kl_label_smooth_position(logits.subspan(i * V, V), targets[i], epsilon);
    ++count;
  }
  return count ? sum / static_cast<T>(count) : T(0);
}

/// -log p(target) for one position; adds scale * d/d(logits) when requested.
template <typename T>
T nll_position(std::span<const T> logits, int target, std::span<T> dlogits = {}, T scale = T(1)) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T z = T(0);
  for (T v : logits) z += std::exp(v - mx);
  const T lz = mx + std::log(z);
  if (!dlogits.empty()) {
    for (std::size_t v = 0; v < logits.size(); ++v) {
      dlogits[v] += scale * (std::exp(logits[v] - lz) - (v == static_cast<std::size_t>(target) ? T(1) : T(0)));
    }
  }
  return lz - logits[static_cast<std::size_t>(target)];
}

namespace detail {

template <typename T>
std::span<const T> logits_at(const SequenceBatch& b, std::span<const T> logits, int row, int pos, std::size_t V) {
  return logits.subspan((static_cast<std::size_t>(row) * static_cast<std::size_t>(b.time) +
                         static_cast<std::size_t>(pos)) * V, V);
}

template <typename T>
std::span<T> dlogits_at(const SequenceBatch& b, std::span<T> dlogits, int row, int pos, std::size_t V) {
  if (dlogits.empty()) return {};
  return dlogits.subspan((static_cast<std::size_t>(row) * static_cast<std::size_t>(b.time) +
                          static_cast<std::size_t>(pos)) * V, V);
}

template <typename T>
std::size_t vocab_of(const SequenceBatch& b, std::span<const T> logits) {
  const std::size_t cells = static_cast<std::size_t>(b.rows) * static_cast<std::size_t>(b.time);
  if (cells == 0 || logits.size() % cells != 0) throw InputDomainError("logits shape mismatch");
  return logits.size() / cells;
}

/// Mean label-smoothed KL over the masked positions of rows [begin, end).
template <typename T>
T smoothed_kl_rows(const SequenceBatch& b, std::span<const T> logits, std::span<T> dlogits, int begin,
                   int end, T epsilon, T weight) {
  const std::size_t V = vocab_of(b, logits);
  std::size_t count = 0;
  for (int r = begin; r < end; ++r) for_each_target(b, r, [&](int, int) { ++count; });
  if (count == 0) return T(0);
  const T scale = weight / static_cast<T>(count);
  T sum = T(0);
  for (int r = begin; r < end; ++r) {
    for_each_target(b, r, [&](int pos, int target) {
      sum += kl_label_smooth_position(logits_at(b, logits, r, pos, V), target, epsilon,
                                      dlogits_at(b, dlogits, r, pos, V), scale);
    });
  }
  return sum / static_cast<T>(count);
}

/// Masked log-probability of one row; adds scale * d(logprob)/d(logits).
template <typename T>
T row_logprob(const SequenceBatch& b, std::span<const T> logits, std::span<T> dlogits, int row, T scale) {
  const std::size_t V = vocab_of(b, logits);
  T lp = T(0);
  for_each_target(b, row, [&](int pos, int target) {
    lp -= nll_position(logits_at(b, logits, row, pos, V), target, dlogits_at(b, dlogits, row, pos, V), -scale);
  });
  return lp;
}

}  // namespace detail

/// Stage-1 objective: label-smoothed KL over every masked position of the
/// batch.
template <typename T>
struct SmoothedKlObjective {
  T epsilon = T(0.1);
  T weight = T(1);

  LossBreakdown<T> operator()(const SequenceBatch& b, std::span<const T> logits, std::span<T> dlogits) const {
    if (!(epsilon >= T(0) && epsilon < T(1))) throw ConfigError("epsilon_smooth must lie in [0, 1)");
    LossBreakdown<T> out;
    out.kl = detail::smoothed_kl_rows(b, logits, dlogits, 0, b.rows, epsilon, weight);
    out.total = weight * out.kl;
    return out;
  }
};

/// Summed negative log-likelihood per row, averaged over rows.
template <typename T>
struct SequenceNllObjective {
  T weight = T(1);

  LossBreakdown<T> operator()(const SequenceBatch& b, std::span<const T> logits, std::span<T> dlogits) const {
    LossBreakdown<T> out;
    if (b.rows == 0) return out;
    const T scale = -weight / static_cast<T>(b.rows);
    for (int r = 0; r < b.rows; ++r) out.sft += sft_loss(detail::row_logprob(b, logits, dlogits, r, scale));
    out.sft /= static_cast<T>(b.rows);
    out.total = weight * out.sft;
    return out;
  }
};

/// Combined stage-2 objective alpha * L_DPO + gamma * L_KL + theta * L_SFT.
///
/// Batch layout: rows [0, P) hold the chosen sequences, rows [P, 2P) the
/// rejected ones in the same pair order. `ref_chosen`/`ref_rejected` are the
/// frozen reference's log-probabilities of those rows. L_KL and L_SFT use
/// the chosen rows only. A zero weight skips its component entirely.
template <typename T>
struct PreferenceObjective {
  LossConfig config;
  std::span<const T> ref_chosen;
  std::span<const T> ref_rejected;

  LossBreakdown<T> operator()(const SequenceBatch& b, std::span<const T> logits, std::span<T> dlogits) const {
    if (b.rows % 2 != 0) throw InputDomainError("preference batch needs an even row count");
    const int P = b.rows / 2;
    if (ref_chosen.size() != static_cast<std::size_t>(P) || ref_rejected.size() != static_cast<std::size_t>(P)) {
      throw InputDomainError("reference log-probability count does not match the batch");
    }
    const T alpha = static_cast<T>(config.alpha);
    const T gamma = static_cast<T>(config.gamma);
    const T theta = static_cast<T>(config.theta);
    const T beta = static_cast<T>(config.beta);
    LossBreakdown<T> out;
    if (P == 0) return out;

    std::vector<PairLogprobs<T>> lps(static_cast<std::size_t>(P));
    const std::span<T> none;
    for (int i = 0; i < P; ++i) {
      auto& lp = lps[static_cast<std::size_t>(i)];
      lp.chosen_policy = detail::row_logprob(b, logits, none, i, T(0));
      lp.rejected_policy = detail::row_logprob(b, logits, none, P + i, T(0));
      lp.chosen_ref = ref_chosen[static_cast<std::size_t>(i)];
      lp.rejected_ref = ref_rejected[static_cast<std::size_t>(i)];
      out.margin += js_dpo_logits(lp).corrected;
    }
    out.margin /= static_cast<T>(P);

    if (alpha != T(0)) {
      out.dpo = dpo_loss(std::span<const PairLogprobs<T>>(lps), beta);
      if (!dlogits.empty()) {
        for (int i = 0; i < P; ++i) {
          const auto g = dpo_loss_grad(lps[static_cast<std::size_t>(i)], beta);
          const T s = alpha / static_cast<T>(P);
          detail::row_logprob(b, logits, dlogits, i, s * g.chosen);
          detail::row_logprob(b, logits, dlogits, P + i, s * g.rejected);
        }
      }
    }
    if (gamma != T(0)) {
      out.kl = detail::smoothed_kl_rows(b, logits, dlogits, 0, P, static_cast<T>(config.epsilon_smooth), gamma);
    }
    if (theta != T(0)) {
      T sum = T(0);
      for (int i = 0; i < P; ++i) sum += sft_loss(lps[static_cast<std::size_t>(i)].chosen_policy);
      out.sft = sum / static_cast<T>(P);
      if (!dlogits.empty()) {
        for (int i = 0; i < P; ++i) detail::row_logprob(b, logits, dlogits, i, -theta / static_cast<T>(P));
      }
    }
    out.total = alpha * out.dpo + gamma * out.kl + theta * out.sft;
    return out;
  }
};

/// Weighted sum of already-computed components.
template <typename T>
LossBreakdown<T> total_loss(T dpo, T kl, T sft, const LossConfig& config) {
  LossBreakdown<T> out;
  out.dpo = config.alpha != 0.0 ? dpo : T(0);
  out.kl = config.gamma != 0.0 ? kl : T(0);
  out.sft = config.theta != 0.0 ? sft : T(0);
  out.total = static_cast<T>(config.alpha) * out.dpo + static_cast<T>(config.gamma) * out.kl +
              static_cast<T>(config.theta) * out.sft;
  return out;
}

/// Builds the chosen-then-rejected batch consumed by PreferenceObjective.
inline SequenceBatch make_pair_batch(const Vocabulary& vocab, std::span<const PreferencePair* const> pairs) {
  std::vector<EncodedSequence> seqs;
  seqs.reserve(pairs.size() * 2);
  for (const auto* p : pairs) seqs.push_back(encode_instruction(vocab, p->chosen, true));
  for (const auto* p : pairs) {
    // The rejected sample is scored under the chosen emotion prompt.
    Utterance rejected = p->rejected;
    rejected.emotion = p->chosen.emotion;
    rejected.speaker = p->chosen.speaker;
    seqs.push_back(encode_instruction(vocab, rejected, true));
  }
  return make_batch(seqs, vocab.pad());
}

}  // namespace emodpo
