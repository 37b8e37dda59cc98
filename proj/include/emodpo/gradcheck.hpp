#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emodpo/corpus.hpp"
#include "emodpo/model.hpp"
#include "emodpo/objectives.hpp"
#include "emodpo/rng.hpp"

namespace emodpo {

struct GradCheckOptions {
  int coordinates = 50;
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::size_t index = 0;
  std::string array;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares analytic gradients from `gradients()` with central differences
/// of the loss value on randomly chosen parameter coordinates. Coordinates
/// are drawn from arrays that receive gradient signal (every array except
/// unused embedding rows), half of them from non-zero analytic entries.
template <typename LossFn>
GradCheckResult check_gradients(const ModelParams<double>& params, LossFn&& loss,
                                const SequenceBatch& batch, const GradCheckOptions& opt = {}) {
  ModelParams<double> grad = params.zeros_like();
  gradients(params, loss, batch, grad);

  auto value_at = [&](const ModelParams<double>& p) {
    const auto logits = forward_logits(p, batch);
    return loss(batch, std::span<const double>(logits), std::span<double>()).total;
  };

  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < grad.count(); ++i) {
    if (grad.values[i] != 0.0) nonzero.push_back(i);
  }
  Rng rng(substream_seed(opt.seed, "gradcheck"));
  GradCheckResult res;
  ModelParams<double> probe = params;
  for (int k = 0; k < opt.coordinates; ++k) {
    std::size_t idx;
    if (k % 2 == 0 && !nonzero.empty()) {
      idx = nonzero[rng.below(nonzero.size())];
    } else {
      idx = rng.below(params.count());
    }
    const double orig = probe.values[idx];
    probe.values[idx] = orig + opt.step;
    const double up = value_at(probe);
    probe.values[idx] = orig - opt.step;
    const double down = value_at(probe);
    probe.values[idx] = orig;

    GradCheckEntry e;
    e.index = idx;
    for (const auto& a : params.layout.arrays()) {
      if (idx >= a.offset && idx < a.offset + a.size()) e.array = a.name;
    }
    e.analytic = grad.values[idx];
    e.numeric = (up - down) / (2.0 * opt.step);
    e.rel_error = std::abs(e.analytic - e.numeric) /
                  std::max({std::abs(e.analytic), std::abs(e.numeric), opt.floor});
    res.max_rel_error = std::max(res.max_rel_error, e.rel_error);
    if (!(e.rel_error < opt.tolerance)) res.passed = false;
    res.entries.push_back(std::move(e));
  }
  return res;
}

/// Random policy/reference pair and a three-pair batch for checking the
/// losses away from the near-uniform regime of a fresh small-std init.
struct GradCheckFixture {
  ModelParams<double> policy;
  ModelParams<double> reference;
  SequenceBatch pairs;   // chosen rows then rejected rows
  SequenceBatch chosen;  // chosen rows only
  std::vector<double> ref_chosen;
  std::vector<double> ref_rejected;
};

inline GradCheckFixture make_gradcheck_fixture(const ModelConfig& c, std::uint64_t seed, double init_std = 0.3) {
  Rng rng(substream_seed(seed, "gradcheck-params"));
  GradCheckFixture f{init_params<double>(c, rng, init_std), init_params<double>(c, rng, init_std), {}, {}, {}, {}};
  for (auto* p : {&f.policy, &f.reference}) {
    for (const auto& a : p->layout.arrays()) {
      if (a.rows == 1) {
        for (std::size_t i = 0; i < a.size(); ++i) p->values[a.offset + i] += 0.1 * rng.normal();
      }
    }
  }
  CorpusConfig cc;
  cc.per_emotion = 2;
  cc.seed = seed;
  cc.vocab = c.vocab;
  const Vocabulary v(c.vocab);
  const auto sft = build_sft_corpus(cc);
  const auto pref = build_pref_corpus(sft, seed);
  std::vector<const PreferencePair*> ptrs = {&pref.pairs[0], &pref.pairs[3], &pref.pairs[6]};
  f.pairs = make_pair_batch(v, ptrs);
  std::vector<EncodedSequence> chosen;
  for (const auto* p : ptrs) chosen.push_back(encode_instruction(v, p->chosen, true));
  f.chosen = make_batch(chosen, v.pad());
  const auto ref = sequence_logprob(f.reference, f.pairs).values;
  f.ref_chosen.assign(ref.begin(), ref.begin() + 3);
  f.ref_rejected.assign(ref.begin() + 3, ref.end());
  return f;
}

struct NamedGradCheck {
  std::string loss;
  GradCheckResult result;
};

/// Checks L_KL, L_SFT, L_DPO alone (beta = 1) and the total with the given
/// weights.
inline std::vector<NamedGradCheck> run_gradcheck_suite(const ModelConfig& c, const LossConfig& total,
                                                       const GradCheckOptions& opt, double init_std = 0.3) {
  const GradCheckFixture f = make_gradcheck_fixture(c, opt.seed, init_std);
  LossConfig dpo_only;
  dpo_only.beta = 1.0;
  dpo_only.gamma = dpo_only.theta = 0.0;
  std::vector<NamedGradCheck> out;
  out.push_back({"kl", check_gradients(f.policy, SmoothedKlObjective<double>{total.epsilon_smooth}, f.chosen, opt)});
  out.push_back({"sft", check_gradients(f.policy, SequenceNllObjective<double>{}, f.chosen, opt)});
  out.push_back({"dpo", check_gradients(f.policy, PreferenceObjective<double>{dpo_only, f.ref_chosen, f.ref_rejected},
                                        f.pairs, opt)});
  out.push_back({"total", check_gradients(f.policy, PreferenceObjective<double>{total, f.ref_chosen, f.ref_rejected},
                                          f.pairs, opt)});
  return out;
}

}  // namespace emodpo
