#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include <json.hpp>

#include "emodpo/ablation.hpp"
#include "emodpo/errors.hpp"
#include "emodpo/eval.hpp"
#include "emodpo/training.hpp"

namespace emodpo {

using Json = nlohmann::ordered_json;

inline Json to_json(const EvalReport& r) {
  Json ser = Json::object();
  for (Emotion e : kAllEmotions) ser[std::string(emotion_name(e))] = r.ser[static_cast<std::size_t>(to_int(e))];
  return {{"samples", r.samples},        {"ser_macro", r.ser_macro},       {"ser", ser},
          {"cter", r.cter},              {"prosody_corr", r.prosody_corr}, {"hist_cosine", r.hist_cosine},
          {"invalid_rate", r.invalid_rate}};
}

inline Json to_json(const MarginStats& m) {
  return {{"count", m.count}, {"mean", m.mean}, {"median", m.median}, {"fraction_positive", m.fraction_positive}};
}

inline Json to_json(const StepRecord& r) {
  return {{"stage", r.stage},       {"step", r.step},         {"epoch", r.epoch},
          {"loss", r.loss.total},   {"dpo", r.loss.dpo},      {"kl", r.loss.kl},
          {"sft", r.loss.sft},      {"margin", r.loss.margin}, {"grad_norm", r.grad_norm},
          {"wall_seconds", r.wall_seconds}};
}

inline Json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"sft_epochs", c.sft_epochs},
          {"dpo_epochs", c.dpo_epochs},
          {"sft_batch_size", c.sft_batch_size},
          {"batch_size", c.batch_size},
          {"sft_lr", c.sft_lr},
          {"dpo_lr", c.dpo_lr},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"clip_norm", c.clip_norm},
          {"init_std", c.init_std},
          {"loss",
           {{"beta", c.loss.beta},
            {"alpha", c.loss.alpha},
            {"gamma", c.loss.gamma},
            {"theta", c.loss.theta},
            {"epsilon_smooth", c.loss.epsilon_smooth}}},
          {"model",
           {{"d_model", c.model.d_model},
            {"layers", c.model.layers},
            {"heads", c.model.heads},
            {"ffn", c.model.ffn},
            {"max_len", c.model.max_len},
            {"segment_positions", c.model.segment_positions}}}};
}

inline Json to_json(std::span<const AblationResult> rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    Json j = {{"model", r.label}, {"failed", r.failed}};
    if (r.failed) {
      j["error"] = r.error;
    } else {
      j["report"] = to_json(r.report);
      j["margin"] = r.margin ? to_json(*r.margin) : Json(nullptr);
      j["steps"] = r.steps;
      j["max_abs_dpo"] = r.max_abs_dpo;
    }
    out.push_back(std::move(j));
  }
  return out;
}

/// Aligned two-column rendering of an EvalReport.
inline std::string report_table(const EvalReport& r) {
  std::string s;
  auto row = [&](const std::string& k, double v) { s += k + std::string(16 - k.size(), ' ') + detail::fmt("%.4f\n", v); };
  s += "samples         " + std::to_string(r.samples) + "\n";
  row("ser_macro", r.ser_macro);
  for (Emotion e : kAllEmotions) row("ser." + std::string(emotion_name(e)), r.ser[static_cast<std::size_t>(to_int(e))]);
  row("cter", r.cter);
  row("prosody_corr", r.prosody_corr);
  row("hist_cosine", r.hist_cosine);
  row("invalid_rate", r.invalid_rate);
  return s;
}

/// Writes `text` to `path` via a temporary file and a rename.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

/// Line-delimited training log: a {"config": ...} record, then one record
/// per step. Lines are flushed as written, so a crashed run keeps its
/// prefix.
class TrainingLog {
 public:
  TrainingLog(const std::filesystem::path& path, const Json& config) : path_(path), os_(path, std::ios::trunc) {
    if (!os_) throw IoError("cannot write training log " + path.string());
    write({{"config", config}});
  }

  void append(const StepRecord& r) { write(to_json(r)); }

  void write(const Json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
    if (!os_) throw IoError("write failed for " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

}  // namespace emodpo
