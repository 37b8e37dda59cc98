// emodpo: corpus generation, two-stage training, evaluation, ablation and
// checks from the command line. Run `emodpo <command> --help` for flags.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emodpo/ablation.hpp"
#include "emodpo/checkpoint.hpp"
#include "emodpo/corpus.hpp"
#include "emodpo/eval.hpp"
#include "emodpo/gradcheck.hpp"
#include "emodpo/report.hpp"
#include "emodpo/training.hpp"

namespace fs = std::filesystem;
using namespace emodpo;

namespace {

enum ExitCode : int { kOk = 0, kUnexpected = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

const CLI::Range kPositiveInt(1, std::numeric_limits<int>::max(), "POSITIVE");
const CLI::Range kNonNegativeInt(0, std::numeric_limits<int>::max(), "NONNEGATIVE");

struct Options {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  TrainConfig train;
  double held_out = 0.1;
  std::string out;
  std::string corpus_path;
  std::string pref_path;
  std::string init;
  std::string checkpoint;
  std::string reference;
  std::string resume;
  std::uint64_t max_steps = UINT64_MAX;
  int top_k = 1;
  double temperature = 1.0;
  std::string text;
  std::string emotion;
  int speaker = -1;
  GradCheckOptions gradcheck;
  double gradcheck_std = 0.3;
};

void add_model_options(CLI::App* cmd, ModelConfig& m) {
  auto* g = cmd->add_option_group("model");
  g->add_option("--d-model", m.d_model, "hidden width")->check(kPositiveInt);
  g->add_option("--layers", m.layers, "decoder blocks")->check(kNonNegativeInt);
  g->add_option("--heads", m.heads, "attention heads")->check(kPositiveInt);
  g->add_option("--ffn", m.ffn, "feed-forward width")->check(kPositiveInt);
  g->add_option("--max-len", m.max_len, "positional table size")->check(kPositiveInt);
  g->add_option("--segment-positions", m.segment_positions, "restart position ids at each segment");
}

void add_loss_options(CLI::App* cmd, LossConfig& l) {
  auto* g = cmd->add_option_group("loss");
  g->add_option("--beta", l.beta, "DPO sharpness")->check(CLI::PositiveNumber);
  g->add_option("--alpha", l.alpha, "L_DPO weight")->check(CLI::NonNegativeNumber);
  g->add_option("--gamma", l.gamma, "L_KL weight")->check(CLI::NonNegativeNumber);
  g->add_option("--theta", l.theta, "L_SFT weight")->check(CLI::NonNegativeNumber);
  g->add_option("--epsilon", l.epsilon_smooth, "label-smoothing mass")->check(CLI::Range(0.0, 0.999999));
}

void add_stage_options(CLI::App* cmd, TrainConfig& t, bool sft, bool dpo) {
  auto* g = cmd->add_option_group("training");
  if (sft) {
    g->add_option("--sft-epochs", t.sft_epochs, "stage-1 epochs")->check(kPositiveInt);
    g->add_option("--sft-batch-size", t.sft_batch_size, "stage-1 utterances per batch")->check(kPositiveInt);
    g->add_option("--sft-lr", t.sft_lr, "stage-1 learning rate")->check(CLI::PositiveNumber);
    g->add_option("--init-std", t.init_std, "weight init std")->check(CLI::PositiveNumber);
  }
  if (dpo) {
    g->add_option("--dpo-epochs", t.dpo_epochs, "stage-2 epochs")->check(kPositiveInt);
    g->add_option("--batch-size", t.batch_size, "stage-2 pairs per batch")->check(kPositiveInt);
    g->add_option("--dpo-lr", t.dpo_lr, "stage-2 learning rate")->check(CLI::PositiveNumber);
  }
  g->add_option("--clip-norm", t.clip_norm, "global gradient norm limit")->check(CLI::PositiveNumber);
  g->add_option("--adam-beta1", t.adam_beta1);
  g->add_option("--adam-beta2", t.adam_beta2);
  g->add_option("--adam-eps", t.adam_eps);
}

void add_sampling_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--top-k", o.top_k, "sample from the k best tokens (1 = greedy)")->check(kPositiveInt);
  cmd->add_option("--temperature", o.temperature, "softmax temperature for k > 1")->check(CLI::PositiveNumber);
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  return dir;
}

// The section of the command that ran, with every value filled in;
// `emodpo --config FILE <command>` reruns it.
void write_resolved_config(const CLI::App& app, const fs::path& dir) {
  std::string text;
  for (const CLI::App* sub : app.get_subcommands()) {
    text += "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
  }
  write_text_file(dir / "config.ini", text);
}

CorpusFile load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open corpus " + path);
  try {
    return read_corpus(is);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

// Train/held-out split keyed by the corpus seed, so every command that reads
// the same corpus file sees the same split.
Split corpus_split(const CorpusFile& c, double held_out) {
  return split_held_out(c.utterances, held_out, c.config.seed);
}

std::vector<Utterance> pick(const std::vector<Utterance>& all, const std::vector<std::size_t>& idx) {
  std::vector<Utterance> out;
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

std::string describe(const LossBreakdown<double>& l) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "loss %.6f dpo %.6f kl %.6f sft %.6f margin %.6f", l.total, l.dpo, l.kl, l.sft,
                l.margin);
  return buf;
}

std::vector<int> parse_token_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ConfigError("--text: '" + tok + "' is not a token id");
    }
  }
  return out;
}

int cmd_gen_corpus(const CLI::App& app, Options& o) {
  o.corpus.seed = o.seed;
  const auto dir = ensure_dir(o.out);
  const auto sft = build_sft_corpus(o.corpus);
  const auto pref = build_pref_corpus(sft, o.seed);
  std::ostringstream corpus, index;
  write_corpus(corpus, o.corpus, sft);
  write_pref_index(index, pref);
  write_text_file(dir / "corpus.tsv", corpus.str());
  write_text_file(dir / "pref.txt", index.str());
  write_resolved_config(app, dir);
  std::cout << "utterances " << sft.size() << " pairs " << pref.pairs.size() << " skipped " << pref.skipped << "\n";
  return kOk;
}

// Runs one stage with logging and saves the final (or last good) state.
template <typename Continue>
int train_stage(TrainState& state, const fs::path& dir, const Json& config, Continue&& run) {
  TrainingLog log(dir / "train_log.jsonl", config);
  std::optional<StepRecord> last;
  try {
    run([&](const StepRecord& r) {
      log.append(r);
      last = r;
    });
  } catch (const NumericalError&) {
    save_state(state, dir);
    std::cerr << "training diverged; last good state saved to " << dir.string() << "\n";
    throw;
  }
  save_state(state, dir);
  std::cout << state.stage << " done: step " << state.step << " epoch " << state.epoch;
  if (last) std::cout << " " << describe(last->loss);
  std::cout << "\n";
  return kOk;
}

int cmd_train_sft(const CLI::App& app, Options& o) {
  o.train.seed = o.seed;
  const CorpusFile corpus = load_corpus(o.corpus_path);
  o.train.model.vocab = corpus.config.vocab;
  const auto train = pick(corpus.utterances, corpus_split(corpus, o.held_out).train);
  const auto dir = ensure_dir(o.out);
  write_resolved_config(app, dir);
  TrainState state = o.resume.empty() ? make_sft_state(o.train) : load_state(o.resume);
  if (!o.resume.empty()) {
    require_same_vocab(corpus.config.vocab, o.corpus_path, state.params.config.vocab,
                       (fs::path(o.resume) / "manifest.txt").string());
  }
  return train_stage(state, dir, to_json(o.train), [&](const StepCallback& cb) {
    continue_sft(state, train, o.train, cb, o.max_steps);
  });
}

int cmd_train_dpo(const CLI::App& app, Options& o) {
  o.train.seed = o.seed;
  const CorpusFile corpus = load_corpus(o.corpus_path);
  const ModelParams<float> reference = load_params(o.init);
  require_same_vocab(corpus.config.vocab, o.corpus_path, reference.config.vocab,
                     (fs::path(o.init) / "manifest.txt").string());
  o.train.model = reference.config;

  std::string pref_path = o.pref_path;
  if (pref_path.empty()) pref_path = (fs::path(o.corpus_path).parent_path() / "pref.txt").string();
  PrefCorpus pref;
  if (fs::exists(pref_path)) {
    std::ifstream is(pref_path);
    pref = read_pref_index(is, corpus.utterances);
  } else if (o.pref_path.empty()) {
    pref = build_pref_corpus(corpus.utterances, corpus.config.seed);
  } else {
    throw IoError("cannot open preference index " + pref_path);
  }
  const Split split = corpus_split(corpus, o.held_out);
  std::vector<char> in_train(corpus.utterances.size(), 0);
  for (std::size_t i : split.train) in_train[i] = 1;
  std::vector<PreferencePair> pairs;
  for (std::size_t k = 0; k < pref.pairs.size(); ++k) {
    if (in_train[pref.index[k].first]) pairs.push_back(pref.pairs[k]);
  }

  const auto dir = ensure_dir(o.out);
  write_resolved_config(app, dir);
  TrainState state = o.resume.empty() ? make_dpo_state(reference, o.train) : load_state(o.resume);
  return train_stage(state, dir, to_json(o.train), [&](const StepCallback& cb) {
    continue_dpo(state, reference, pairs, o.train, cb, o.max_steps);
  });
}

int cmd_eval(const CLI::App& app, Options& o) {
  const CorpusFile corpus = load_corpus(o.corpus_path);
  const ModelParams<float> params = load_params(o.checkpoint);
  require_same_vocab(corpus.config.vocab, o.corpus_path, params.config.vocab,
                     (fs::path(o.checkpoint) / "manifest.txt").string());
  const Split split = corpus_split(corpus, o.held_out);
  const auto test = pick(corpus.utterances, split.test);
  const SamplingPolicy policy{o.top_k, o.temperature};
  const EvalReport report = evaluate(params, test, policy, o.seed);
  Json j = {{"checkpoint", o.checkpoint}, {"report", to_json(report)}};
  std::cout << report_table(report);
  if (!o.reference.empty()) {
    const ModelParams<float> ref = load_params(o.reference);
    require_same_vocab(params.config.vocab, (fs::path(o.checkpoint) / "manifest.txt").string(), ref.config.vocab,
                       (fs::path(o.reference) / "manifest.txt").string());
    const auto pairs = build_pref_corpus(test, corpus.config.seed).pairs;
    const MarginStats m = margin_report(params, ref, pairs);
    j["margin"] = to_json(m);
    std::printf("margin.mean     %.4f\nmargin.median   %.4f\nmargin.positive %.4f\n", m.mean, m.median,
                m.fraction_positive);
  }
  if (!o.out.empty()) {
    const auto dir = ensure_dir(o.out);
    write_resolved_config(app, dir);
    write_text_file(dir / "report.json", j.dump(2) + "\n");
    write_text_file(dir / "report.txt", report_table(report));
  }
  return kOk;
}

int cmd_ablate(const CLI::App& app, Options& o) {
  o.train.seed = o.seed;
  std::vector<Utterance> utterances;
  if (o.corpus_path.empty()) {
    o.corpus.seed = o.seed;
    utterances = build_sft_corpus(o.corpus);
    o.train.model.vocab = o.corpus.vocab;
  } else {
    CorpusFile c = load_corpus(o.corpus_path);
    utterances = std::move(c.utterances);
    o.train.model.vocab = c.config.vocab;
  }
  const auto dir = ensure_dir(o.out);
  write_resolved_config(app, dir);
  const AblationData data = prepare_ablation_data(utterances, o.held_out, o.seed);
  const auto rows = ablation_rows(o.train.loss);
  TrainingLog log(dir / "train_log.jsonl", to_json(o.train));
  const auto results = run_ablation(data, o.train, [&](int row, const StepRecord& r) {
    Json j = to_json(r);
    j["row"] = row < 0 ? Json("stage-1 (shared)") : Json(rows[static_cast<std::size_t>(row)].label);
    log.write(j);
  });
  const std::string table = ablation_table(results);
  std::cout << table;
  write_text_file(dir / "ablation.txt", table);
  write_text_file(dir / "ablation.csv", ablation_csv(results));
  write_text_file(dir / "ablation.json", to_json(std::span<const AblationResult>(results)).dump(2) + "\n");
  return kOk;
}

int cmd_grad_check(const CLI::App&, Options& o) {
  o.gradcheck.seed = o.seed;
  const auto results = run_gradcheck_suite(o.train.model, o.train.loss, o.gradcheck, o.gradcheck_std);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-6s coordinates %zu max relative error %.3e %s\n", r.loss.c_str(), r.result.entries.size(),
                r.result.max_rel_error, r.result.passed ? "ok" : "FAILED");
    ok = ok && r.result.passed;
  }
  return ok ? kOk : kNumerical;
}

int cmd_infer(const CLI::App&, Options& o) {
  const auto parsed = parse_emotion(o.emotion);
  if (!parsed) throw ConfigError("--emotion: unknown emotion '" + o.emotion + "'");
  const ModelParams<float> params = load_params(o.checkpoint);
  const Vocabulary vocab(params.config.vocab);
  Utterance u;
  u.emotion = *parsed;
  u.speaker = o.speaker;
  if (o.speaker >= vocab.speaker_count()) throw ConfigError("--speaker: id out of range");
  if (o.text.empty()) {
    Rng rng(substream_seed(o.seed, "infer-text"));
    const int len = rng.range(3, 8);
    for (int i = 0; i < len; ++i) u.text.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.text_size()))));
  } else {
    u.text = parse_token_list(o.text);
    for (int t : u.text) {
      if (!vocab.is_text(t)) throw ConfigError("--text: id " + std::to_string(t) + " is not a text token");
    }
  }
  if (u.text.empty()) throw ConfigError("--text: empty text");
  const auto prompt = encode_instruction(vocab, u, false).tokens;
  Rng rng(substream_seed(o.seed, "sample"));
  const Generation g = sample(params, prompt, SamplingPolicy{o.top_k, o.temperature}, rng,
                              2 * static_cast<int>(u.text.size()) + 4);
  std::cout << "text";
  for (int t : u.text) std::cout << ' ' << t;
  std::cout << "\nspeech";
  for (int t : g.tokens) std::cout << ' ' << t;
  std::vector<int> speech;
  for (int t : g.tokens) {
    if (vocab.is_speech(t)) speech.push_back(t);
  }
  std::cout << "\nterminated " << (g.terminated ? "yes" : "no") << "\noracle "
            << (speech.empty() ? std::string("none") : std::string(emotion_name(oracle_classify(vocab, speech))))
            << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Emotion-prompted token TTS: instruction tuning and DPO at desk scale"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file (sections per command)");
  app.allow_config_extras(false);
  app.option_defaults()->always_capture_default();
  Options o;

  auto* gen = app.add_subcommand("gen-corpus", "write corpus.tsv, pref.txt and config.ini");
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--seed", o.seed, "corpus seed");
  gen->add_option("--per-emotion", o.corpus.per_emotion, "utterances per emotion")->check(kPositiveInt);
  gen->add_option("--noise", o.corpus.noise, "prosody noise probability")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--speakers", o.corpus.speakers, "speakers used (0 = none)")->check(kNonNegativeInt);
  gen->add_option("--min-text-len", o.corpus.min_text_len)->check(kPositiveInt);
  gen->add_option("--max-text-len", o.corpus.max_text_len)->check(kPositiveInt);
  gen->add_option("--text-size", o.corpus.vocab.text_size, "text vocabulary size")->check(kPositiveInt);
  gen->add_option("--vocab-speakers", o.corpus.vocab.speakers, "speaker tokens in the vocabulary")
      ->check(kNonNegativeInt);

  auto* sft = app.add_subcommand("train-sft", "stage 1: instruction tuning");
  sft->add_option("--corpus", o.corpus_path, "corpus.tsv")->required();
  sft->add_option("--out", o.out, "checkpoint directory")->required();
  sft->add_option("--seed", o.seed);
  sft->add_option("--held-out", o.held_out, "fraction of texts kept out of training")->check(CLI::Range(0.0, 0.99));
  sft->add_option("--resume", o.resume, "continue from a saved training state");
  sft->add_option("--max-steps", o.max_steps, "stop after this many steps (state is saved)");
  add_stage_options(sft, o.train, true, false);
  add_loss_options(sft, o.train.loss);
  add_model_options(sft, o.train.model);

  auto* dpo = app.add_subcommand("train-dpo", "stage 2: preference optimisation against the stage-1 model");
  dpo->add_option("--corpus", o.corpus_path, "corpus.tsv")->required();
  dpo->add_option("--init", o.init, "stage-1 checkpoint (policy start and frozen reference)")->required();
  dpo->add_option("--pref", o.pref_path, "preference index (default: pref.txt next to the corpus)");
  dpo->add_option("--out", o.out, "checkpoint directory")->required();
  dpo->add_option("--seed", o.seed);
  dpo->add_option("--held-out", o.held_out)->check(CLI::Range(0.0, 0.99));
  dpo->add_option("--resume", o.resume, "continue from a saved training state");
  dpo->add_option("--max-steps", o.max_steps, "stop after this many steps (state is saved)");
  add_stage_options(dpo, o.train, false, true);
  add_loss_options(dpo, o.train.loss);

  auto* ev = app.add_subcommand("eval", "score a checkpoint on the held-out texts");
  ev->add_option("--checkpoint", o.checkpoint)->required();
  ev->add_option("--corpus", o.corpus_path, "corpus.tsv")->required();
  ev->add_option("--reference", o.reference, "also report DPO margins against this checkpoint");
  ev->add_option("--out", o.out, "write report.json and report.txt here");
  ev->add_option("--seed", o.seed, "sampling seed");
  ev->add_option("--held-out", o.held_out)->check(CLI::Range(0.0, 0.99));
  add_sampling_options(ev, o);

  auto* abl = app.add_subcommand("ablate", "train and score the six-row removal grid");
  abl->add_option("--corpus", o.corpus_path, "corpus.tsv (default: generate from --seed)");
  abl->add_option("--out", o.out, "output directory")->required();
  abl->add_option("--seed", o.seed);
  abl->add_option("--held-out", o.held_out)->check(CLI::Range(0.0, 0.99));
  add_stage_options(abl, o.train, true, true);
  add_loss_options(abl, o.train.loss);
  add_model_options(abl, o.train.model);

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every loss gradient");
  gc->add_option("--seed", o.seed);
  gc->add_option("--coordinates", o.gradcheck.coordinates)->check(kPositiveInt);
  gc->add_option("--step", o.gradcheck.step)->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", o.gradcheck.tolerance)->check(CLI::PositiveNumber);
  gc->add_option("--init-std", o.gradcheck_std, "std of the random parameters")->check(CLI::PositiveNumber);
  add_loss_options(gc, o.train.loss);
  add_model_options(gc, o.train.model);

  auto* inf = app.add_subcommand("infer", "generate speech tokens for one prompt");
  inf->add_option("--checkpoint", o.checkpoint)->required();
  inf->add_option("--text", o.text, "space-separated text token ids (default: seeded random text)");
  inf->add_option("--emotion", o.emotion, "Neutral, Angry, Happy, Sad or Surprise")->required();
  inf->add_option("--speaker", o.speaker, "speaker id (default: none)")->check(CLI::Range(-1, 1 << 20));
  inf->add_option("--seed", o.seed, "seed for random text and sampling");
  add_sampling_options(inf, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*gen) return cmd_gen_corpus(app, o);
    if (*sft) return cmd_train_sft(app, o);
    if (*dpo) return cmd_train_dpo(app, o);
    if (*ev) return cmd_eval(app, o);
    if (*abl) return cmd_ablate(app, o);
    if (*gc) return cmd_grad_check(app, o);
    if (*inf) return cmd_infer(app, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputDomainError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure in " << e.component() << ": " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUnexpected;
}
