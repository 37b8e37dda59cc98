#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "emodpo/errors.hpp"
#include "emodpo/rng.hpp"
#include "emodpo/vocab.hpp"

namespace emodpo {

/// One emotion-labelled text/speech pair. `speaker` is -1 when unused.
struct Utterance {
  Emotion emotion = Emotion::Neutral;
  int speaker = -1;
  std::vector<int> text;
  std::vector<int> speech;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// Chosen and rejected utterances over identical text. The pair is
/// conditioned on `chosen.emotion`.
struct PreferencePair {
  Utterance chosen;
  Utterance rejected;
};

struct CorpusConfig {
  int per_emotion = 200;
  std::uint64_t seed = 0;
  double noise = 0.05;
  int speakers = 0;
  int min_text_len = 3;
  int max_text_len = 8;
  VocabConfig vocab{};

  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

inline constexpr int kMinProsodyLevels = 8;

/// Prosody level of position `position` in a contour of `length` speech
/// tokens. Interpolated contours use round-half-up, evaluated exactly in
/// integers.
inline int prosody_template(Emotion emotion, int position, int length) {
  if (length < 1 || position < 0 || position >= length) {
    throw InputDomainError("prosody_template: position " + std::to_string(position) +
                           " outside [0, " + std::to_string(length) + ")");
  }
  // round_half_up(from + (to - from) * position / (length - 1))
  auto ramp = [&](int from, int to) {
    if (length == 1) return from;
    const long den = length - 1;
    const long num = static_cast<long>(from) * den + static_cast<long>(to - from) * position;
    return static_cast<int>((2 * num + den) / (2 * den));
  };
  switch (emotion) {
    case Emotion::Neutral:
      return 3;
    case Emotion::Angry:
      return position % 2 == 0 ? 6 : 4;
    case Emotion::Happy:
      return ramp(2, 6);
    case Emotion::Sad:
      return ramp(3, 1);
    case Emotion::Surprise:
      return (3 * position >= length && 3 * position < 2 * length) ? 7 : 3;
  }
  throw InputDomainError("unknown emotion");
}

/// Speech for `text` under `emotion`: two tokens per text token, content
/// channel copied from the text, prosody channel from the emotion template
/// with probability-`noise` +/-1 jitter.
inline Utterance synthesize_utterance(const Vocabulary& vocab, std::span<const int> text,
                                      Emotion emotion, int speaker, Rng& rng,
                                      double noise = 0.05) {
  if (text.empty()) throw InputDomainError("synthesize_utterance: empty text");
  if (vocab.prosody_levels() < kMinProsodyLevels) {
    throw ConfigError("prosody templates need at least 8 prosody levels");
  }
  for (int t : text) {
    if (!vocab.is_text(t)) throw InputDomainError("text id out of range: " + std::to_string(t));
  }
  if (speaker >= vocab.speaker_count()) throw InputDomainError("speaker id out of range");

  Utterance u;
  u.emotion = emotion;
  u.speaker = speaker < 0 ? -1 : speaker;
  u.text.assign(text.begin(), text.end());
  const int length = 2 * static_cast<int>(text.size());
  u.speech.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    const int content = text[static_cast<std::size_t>(i / 2)] % vocab.content_levels();
    int level = prosody_template(emotion, i, length);
    if (rng.bernoulli(noise)) {
      level += rng.bernoulli(0.5) ? 1 : -1;
      level = std::clamp(level, 0, vocab.prosody_levels() - 1);
    }
    u.speech.push_back(vocab.speech_token(content, level));
  }
  return u;
}

/// D_sft: `per_emotion` distinct texts, each rendered under all five
/// emotions, ordered text-major. Utterance k draws from its own substream,
/// so any utterance can be regenerated independently.
inline std::vector<Utterance> build_sft_corpus(const CorpusConfig& config) {
  if (config.per_emotion <= 0) {
    throw InputDomainError("per_emotion must be positive, got " +
                           std::to_string(config.per_emotion));
  }
  if (config.min_text_len < 1 || config.max_text_len < config.min_text_len) {
    throw ConfigError("invalid text length range");
  }
  if (config.noise < 0.0 || config.noise > 1.0) throw ConfigError("noise must lie in [0, 1]");
  const Vocabulary vocab(config.vocab);
  if (config.speakers < 0 || config.speakers > vocab.speaker_count()) {
    throw ConfigError("speakers must lie in [0, " + std::to_string(vocab.speaker_count()) + "]");
  }

  Rng text_rng(substream_seed(config.seed, "text"));
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> texts;
  std::vector<int> speakers;
  const std::size_t wanted = static_cast<std::size_t>(config.per_emotion);
  std::size_t attempts = 0;
  while (texts.size() < wanted) {
    if (++attempts > 1000 * wanted) {
      throw ConfigError("cannot draw enough distinct texts for per_emotion = " +
                        std::to_string(config.per_emotion));
    }
    const int len = text_rng.range(config.min_text_len, config.max_text_len);
    std::vector<int> text(static_cast<std::size_t>(len));
    for (int& t : text) t = static_cast<int>(text_rng.below(static_cast<std::uint64_t>(vocab.text_size())));
    const int speaker =
        config.speakers > 0 ? static_cast<int>(text_rng.below(static_cast<std::uint64_t>(config.speakers))) : -1;
    if (seen.insert(text).second) {
      texts.push_back(std::move(text));
      speakers.push_back(speaker);
    }
  }

  std::vector<Utterance> corpus;
  corpus.reserve(texts.size() * kEmotionCount);
  for (std::size_t j = 0; j < texts.size(); ++j) {
    for (Emotion e : kAllEmotions) {
      const std::uint64_t index = j * kEmotionCount + static_cast<std::uint64_t>(to_int(e));
      Rng rng(substream_seed(config.seed, "utterance", index));
      corpus.push_back(synthesize_utterance(vocab, texts[j], e, speakers[j], rng, config.noise));
    }
  }
  return corpus;
}

struct PrefCorpus {
  std::vector<PreferencePair> pairs;
  /// (chosen, rejected) positions in the source corpus, parallel to `pairs`.
  std::vector<std::pair<std::size_t, std::size_t>> index;
  /// Utterances with no same-text partner of a different emotion.
  std::size_t skipped = 0;
};

/// D_pref: one pair per utterance, the rejected side drawn uniformly from the
/// same-text utterances of a different emotion.
inline PrefCorpus build_pref_corpus(std::span<const Utterance> sft, std::uint64_t seed = 0) {
  std::map<std::vector<int>, std::vector<std::size_t>> by_text;
  for (std::size_t i = 0; i < sft.size(); ++i) by_text[sft[i].text].push_back(i);

  PrefCorpus out;
  for (std::size_t i = 0; i < sft.size(); ++i) {
    std::vector<std::size_t> candidates;
    for (std::size_t k : by_text[sft[i].text]) {
      if (sft[k].emotion != sft[i].emotion) candidates.push_back(k);
    }
    if (candidates.empty()) {
      ++out.skipped;
      continue;
    }
    Rng rng(substream_seed(seed, "pref", i));
    const std::size_t r = candidates[rng.below(candidates.size())];
    out.pairs.push_back({sft[i], sft[r]});
    out.index.emplace_back(i, r);
  }
  return out;
}

/// Rule-inverting emotion recogniser: the emotion whose template contour has
/// the smallest squared deviation from the prosody channel. Ties go to the
/// lowest emotion code.
inline Emotion oracle_classify(const Vocabulary& vocab, std::span<const int> speech) {
  if (speech.empty()) throw InputDomainError("oracle_classify: empty sequence");
  for (int id : speech) {
    if (!vocab.is_speech(id)) {
      throw InputDomainError("oracle_classify: non-speech token " + std::to_string(id));
    }
  }
  const int length = static_cast<int>(speech.size());
  Emotion best = Emotion::Neutral;
  long best_cost = std::numeric_limits<long>::max();
  for (Emotion e : kAllEmotions) {
    long cost = 0;
    for (int i = 0; i < length; ++i) {
      const long d = vocab.prosody_of(speech[static_cast<std::size_t>(i)]) - prosody_template(e, i, length);
      cost += d * d;
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = e;
    }
  }
  return best;
}

/// Instruction-formatted token sequence with its loss mask. `loss_mask[t]`
/// marks token t as a prediction target.
struct EncodedSequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), 1));
  }
};

/// [speaker] E <endofprompt> x... </s> [y... </s>]
inline EncodedSequence encode_instruction(const Vocabulary& vocab, const Utterance& u,
                                          bool include_target) {
  EncodedSequence seq;
  auto push = [&](int id, bool target) {
    seq.tokens.push_back(id);
    seq.loss_mask.push_back(target ? 1 : 0);
  };
  if (u.speaker >= 0) push(vocab.speaker_token(u.speaker), false);
  push(vocab.emotion_token(u.emotion), false);
  push(vocab.end_of_prompt(), false);
  for (int t : u.text) push(t, false);
  push(vocab.separator(), false);
  if (include_target) {
    for (int s : u.speech) push(s, true);
    push(vocab.separator(), true);
  }
  return seq;
}

/// Inverse of encode_instruction (with or without the target segment).
inline Utterance decode_instruction(const Vocabulary& vocab, std::span<const int> tokens) {
  Utterance u;
  std::size_t pos = 0;
  auto fail = [](const std::string& why) -> Utterance {
    throw InputDomainError("decode_instruction: " + why);
  };
  if (pos < tokens.size() && vocab.contains(tokens[pos]) &&
      vocab.kind(tokens[pos]) == TokenKind::Speaker) {
    u.speaker = vocab.speaker_of(tokens[pos++]);
  }
  if (pos >= tokens.size() || !vocab.contains(tokens[pos]) ||
      vocab.kind(tokens[pos]) != TokenKind::EmotionPrompt) {
    return fail("missing emotion prompt");
  }
  u.emotion = vocab.emotion_of(tokens[pos++]);
  if (pos >= tokens.size() || tokens[pos++] != vocab.end_of_prompt()) {
    return fail("missing <endofprompt>");
  }
  while (pos < tokens.size() && vocab.is_text(tokens[pos])) u.text.push_back(tokens[pos++]);
  if (pos >= tokens.size() || tokens[pos++] != vocab.separator()) return fail("missing </s>");
  if (pos == tokens.size()) return u;
  while (pos < tokens.size() && vocab.is_speech(tokens[pos])) u.speech.push_back(tokens[pos++]);
  if (pos + 1 != tokens.size() || tokens[pos] != vocab.separator()) {
    return fail("speech segment must end with a single </s>");
  }
  return u;
}

/// Train/test partition by text: `fraction` of the distinct texts (with all
/// their emotions) go to the test side. Indices keep corpus order.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline Split split_held_out(std::span<const Utterance> corpus, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("held-out fraction must lie in [0, 1)");
  std::vector<std::vector<int>> texts;
  {
    std::set<std::vector<int>> seen;
    for (const auto& u : corpus) {
      if (seen.insert(u.text).second) texts.push_back(u.text);
    }
  }
  Rng rng(substream_seed(seed, "split"));
  rng.shuffle(std::span(texts));
  const auto n_test = static_cast<std::size_t>(fraction * static_cast<double>(texts.size()) + 0.5);
  const std::set<std::vector<int>> test_texts(texts.begin(),
                                              texts.begin() + static_cast<std::ptrdiff_t>(n_test));
  Split split;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (test_texts.contains(corpus[i].text) ? split.test : split.train).push_back(i);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Corpus file
//
//   #emodpo-corpus version=1 seed=.. per_emotion=.. noise=.. speakers=..
//     min_text_len=.. max_text_len=.. text_size=.. content_levels=..
//     prosody_levels=.. vocab_speakers=.. count=..
//   <emotion>\t<speaker or -1>\t<text ids>\t<speech ids>
//
// Ids within a field are separated by single spaces.

inline constexpr int kCorpusFormatVersion = 1;

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_ids(std::ostream& os, std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
}

inline std::vector<int> parse_ids(const std::string& field, std::size_t line_no) {
  std::vector<int> out;
  std::istringstream is(field);
  long v;
  while (is >> v) {
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
      throw IoError("corpus line " + std::to_string(line_no) + ": id out of range");
    }
    out.push_back(static_cast<int>(v));
  }
  if (!is.eof()) throw IoError("corpus line " + std::to_string(line_no) + ": malformed id list");
  return out;
}

inline std::map<std::string, std::string> parse_header_fields(const std::string& line,
                                                              const std::string& magic) {
  std::istringstream is(line);
  std::string tag;
  is >> tag;
  if (tag != magic) throw IoError("missing '" + magic + "' header");
  std::map<std::string, std::string> fields;
  std::string kv;
  while (is >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw IoError("malformed header field '" + kv + "'");
    fields[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return fields;
}

template <typename Int>
Int header_int(const std::map<std::string, std::string>& fields, const std::string& key) {
  const auto it = fields.find(key);
  if (it == fields.end()) throw IoError("header field '" + key + "' missing");
  try {
    std::size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return static_cast<Int>(v);
  } catch (const std::logic_error&) {
    throw IoError("header field '" + key + "' is not an integer: '" + it->second + "'");
  }
}

inline double header_double(const std::map<std::string, std::string>& fields, const std::string& key) {
  const auto it = fields.find(key);
  if (it == fields.end()) throw IoError("header field '" + key + "' missing");
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw IoError("header field '" + key + "' is not a number: '" + it->second + "'");
  }
}

}  // namespace detail

inline void write_corpus(std::ostream& os, const CorpusConfig& config,
                         std::span<const Utterance> corpus) {
  os << "#emodpo-corpus version=" << kCorpusFormatVersion << " seed=" << config.seed
     << " per_emotion=" << config.per_emotion << " noise=" << detail::format_double(config.noise)
     << " speakers=" << config.speakers << " min_text_len=" << config.min_text_len
     << " max_text_len=" << config.max_text_len << " text_size=" << config.vocab.text_size
     << " content_levels=" << config.vocab.content_levels
     << " prosody_levels=" << config.vocab.prosody_levels
     << " vocab_speakers=" << config.vocab.speakers << " count=" << corpus.size() << '\n';
  for (const auto& u : corpus) {
    os << to_int(u.emotion) << '\t' << u.speaker << '\t';
    detail::write_ids(os, u.text);
    os << '\t';
    detail::write_ids(os, u.speech);
    os << '\n';
  }
}

struct CorpusFile {
  CorpusConfig config;
  std::vector<Utterance> utterances;
};

inline CorpusFile read_corpus(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("corpus file is empty");
  const auto h = detail::parse_header_fields(line, "#emodpo-corpus");
  if (detail::header_int<int>(h, "version") != kCorpusFormatVersion) {
    throw IoError("corpus format version mismatch: expected " +
                  std::to_string(kCorpusFormatVersion) + ", got " + h.at("version"));
  }
  CorpusFile file;
  auto& c = file.config;
  c.seed = detail::header_int<std::uint64_t>(h, "seed");
  c.per_emotion = detail::header_int<int>(h, "per_emotion");
  c.noise = detail::header_double(h, "noise");
  c.speakers = detail::header_int<int>(h, "speakers");
  c.min_text_len = detail::header_int<int>(h, "min_text_len");
  c.max_text_len = detail::header_int<int>(h, "max_text_len");
  c.vocab.text_size = detail::header_int<int>(h, "text_size");
  c.vocab.content_levels = detail::header_int<int>(h, "content_levels");
  c.vocab.prosody_levels = detail::header_int<int>(h, "prosody_levels");
  c.vocab.speakers = detail::header_int<int>(h, "vocab_speakers");
  const auto count = detail::header_int<std::size_t>(h, "count");
  const Vocabulary vocab(c.vocab);

  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) {
      throw IoError("corpus line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    Utterance u;
    const auto head = detail::parse_ids(fields[0] + " " + fields[1], line_no);
    if (head.size() != 2) throw IoError("corpus line " + std::to_string(line_no) + ": bad emotion/speaker");
    u.emotion = emotion_from_int(head[0]);
    u.speaker = head[1];
    u.text = detail::parse_ids(fields[2], line_no);
    u.speech = detail::parse_ids(fields[3], line_no);
    for (int t : u.text) {
      if (!vocab.is_text(t)) throw IoError("corpus line " + std::to_string(line_no) + ": bad text id");
    }
    for (int s : u.speech) {
      if (!vocab.is_speech(s)) throw IoError("corpus line " + std::to_string(line_no) + ": bad speech id");
    }
    file.utterances.push_back(std::move(u));
  }
  if (file.utterances.size() != count) {
    throw IoError("corpus truncated: header says " + std::to_string(count) + " utterances, found " +
                  std::to_string(file.utterances.size()));
  }
  return file;
}

/// Preference index: one "chosen rejected" pair of corpus line positions
/// (0-based, header excluded) per line.
inline void write_pref_index(std::ostream& os, const PrefCorpus& pref) {
  os << "#emodpo-pref version=" << kCorpusFormatVersion << " count=" << pref.index.size()
     << " skipped=" << pref.skipped << '\n';
  for (const auto& [c, r] : pref.index) os << c << ' ' << r << '\n';
}

inline PrefCorpus read_pref_index(std::istream& is, std::span<const Utterance> corpus) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("preference index is empty");
  const auto h = detail::parse_header_fields(line, "#emodpo-pref");
  PrefCorpus pref;
  pref.skipped = detail::header_int<std::size_t>(h, "skipped");
  const auto count = detail::header_int<std::size_t>(h, "count");
  std::size_t c, r;
  while (is >> c >> r) {
    if (c >= corpus.size() || r >= corpus.size()) throw IoError("preference index out of range");
    pref.pairs.push_back({corpus[c], corpus[r]});
    pref.index.emplace_back(c, r);
  }
  if (pref.pairs.size() != count) throw IoError("preference index truncated");
  return pref;
}

}  // namespace emodpo
