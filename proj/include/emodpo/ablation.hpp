#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emodpo/corpus.hpp"
#include "emodpo/errors.hpp"
#include "emodpo/eval.hpp"
#include "emodpo/training.hpp"

namespace emodpo {

/// One row of the removal grid. Rows without instruction tuning start
/// stage 2 from the random initialisation, which is then also the frozen
/// reference.
struct AblationRow {
  std::string label;
  bool instruction_tuning = true;
  bool preference_stage = true;
  LossConfig loss;
};

/// The six rows, in table order. The fourth row removes all three stage-2
/// losses, which leaves nothing to optimise, so it is reported as the
/// stage-1 model.
inline std::vector<AblationRow> ablation_rows(const LossConfig& base) {
  auto with = [&](double alpha, double gamma, double theta) {
    LossConfig l = base;
    l.alpha = alpha;
    l.gamma = gamma;
    l.theta = theta;
    return l;
  };
  const double a = base.alpha, g = base.gamma, t = base.theta;
  return {
      {"Emo-DPO", true, true, base},
      {"- L_DPO", true, true, with(0.0, g, t)},
      {"- L_DPO - L_SFT", true, true, with(0.0, g, 0.0)},
      {"- L_DPO - L_SFT - L_KL (stage-1 only)", true, false, base},
      {"- Instruction Tuning", false, true, base},
      {"- Instruction Tuning - L_SFT", false, true, with(a, g, 0.0)},
  };
}

struct AblationResult {
  std::string label;
  bool failed = false;
  std::string error;
  EvalReport report;
  std::optional<MarginStats> margin;  // held-out, against the row's reference
  std::size_t steps = 0;
  double max_abs_dpo = 0.0;  // largest |L_DPO| logged during stage 2
};

/// Held-out split of one corpus: both stages train on `train`, rows are
/// scored on `test`.
struct AblationData {
  std::vector<Utterance> train;
  std::vector<Utterance> test;
  std::vector<PreferencePair> train_pairs;
  std::vector<PreferencePair> test_pairs;
};

inline AblationData prepare_ablation_data(std::span<const Utterance> corpus, double held_out, std::uint64_t seed) {
  const Split split = split_held_out(corpus, held_out, seed);
  AblationData d;
  for (std::size_t i : split.train) d.train.push_back(corpus[i]);
  for (std::size_t i : split.test) d.test.push_back(corpus[i]);
  if (d.train.empty() || d.test.empty()) throw InputDomainError("ablation: split left an empty side");
  d.train_pairs = build_pref_corpus(d.train, seed).pairs;
  d.test_pairs = build_pref_corpus(d.test, seed).pairs;
  return d;
}

/// Receives every logged step with the index of the row that produced it.
/// Stage-1 steps are shared by the instruction-tuned rows and carry index -1.
using AblationStepCallback = std::function<void(int row, const StepRecord&)>;

/// Trains and scores every row with the same seed and split. Stage 1 is run
/// once and reused, since all instruction-tuned rows would repeat it
/// identically; pass `stage1` to supply that model instead. A row that
/// throws is marked failed and the grid continues.
inline std::vector<AblationResult> run_ablation(const AblationData& data, const TrainConfig& c,
                                                const AblationStepCallback& on_step = {},
                                                const ModelParams<float>* stage1 = nullptr) {
  c.validate();
  const auto rows = ablation_rows(c.loss);
  std::optional<ModelParams<float>> sft;
  std::string sft_error;
  if (stage1) {
    sft = *stage1;
  } else {
    try {
      sft = run_sft(data.train, c, [&](const StepRecord& r) {
        if (on_step) on_step(-1, r);
      }).params;
    } catch (const Error& e) {
      sft_error = e.what();
    }
  }
  const ModelParams<float> random_init = make_sft_state(c).params;

  std::vector<AblationResult> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const AblationRow& row = rows[i];
    AblationResult res;
    res.label = row.label;
    try {
      if (row.instruction_tuning && !sft) throw Error("stage 1 failed: " + sft_error);
      const ModelParams<float>& start = row.instruction_tuning ? *sft : random_init;
      if (!row.preference_stage) {
        res.report = evaluate(start, data.test);
      } else {
        TrainConfig rc = c;
        rc.loss = row.loss;
        TrainState s = make_dpo_state(start, rc);
        continue_dpo(s, start, data.train_pairs, rc, [&](const StepRecord& r) {
          ++res.steps;
          res.max_abs_dpo = std::max(res.max_abs_dpo, std::abs(r.loss.dpo));
          if (on_step) on_step(static_cast<int>(i), r);
        });
        res.report = evaluate(s.params, data.test);
        res.margin = margin_report(s.params, start, data.test_pairs);
      }
    } catch (const Error& e) {
      res.failed = true;
      res.error = e.what();
    }
    out.push_back(std::move(res));
  }
  return out;
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

/// Aligned text table, one line per row.
inline std::string ablation_table(std::span<const AblationResult> rows) {
  std::size_t w = 9;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::string s = "Model";
  s.append(w - 5 + 2, ' ');
  s += "  EmoSIM  ProsSIM     CTER      SER   margin\n";
  for (const auto& r : rows) {
    s += r.label;
    s.append(w - r.label.size() + 2, ' ');
    if (r.failed) {
      s += "  failed: " + r.error + "\n";
      continue;
    }
    s += detail::fmt("%8.4f", r.report.hist_cosine) + detail::fmt(" %8.4f", r.report.prosody_corr) +
         detail::fmt(" %8.4f", r.report.cter) + detail::fmt(" %8.4f", r.report.ser_macro);
    s += r.margin ? detail::fmt(" %8.4f", r.margin->mean) : std::string("        -");
    s += "\n";
  }
  return s;
}

inline std::string ablation_csv(std::span<const AblationResult> rows) {
  std::string s = "model,failed,emo_sim,prosody_sim,cter,ser_macro,ser_neutral,ser_angry,ser_happy,ser_sad,"
                  "ser_surprise,invalid_rate,margin_mean,margin_fraction_positive\n";
  for (const auto& r : rows) {
    s += "\"" + r.label + "\"," + (r.failed ? "1" : "0");
    const auto& e = r.report;
    for (double v : {e.hist_cosine, e.prosody_corr, e.cter, e.ser_macro}) s += detail::fmt(",%.6f", v);
    for (double v : e.ser) s += detail::fmt(",%.6f", v);
    s += detail::fmt(",%.6f", e.invalid_rate);
    s += r.margin ? detail::fmt(",%.6f", r.margin->mean) + detail::fmt(",%.6f", r.margin->fraction_positive)
                  : std::string(",,");
    s += "\n";
  }
  return s;
}

}  // namespace emodpo
