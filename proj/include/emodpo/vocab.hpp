#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "emodpo/errors.hpp"

namespace emodpo {

enum class Emotion : int { Neutral = 0, Angry = 1, Happy = 2, Sad = 3, Surprise = 4 };

inline constexpr int kEmotionCount = 5;

inline constexpr std::array<Emotion, kEmotionCount> kAllEmotions = {
    Emotion::Neutral, Emotion::Angry, Emotion::Happy, Emotion::Sad, Emotion::Surprise};

constexpr int to_int(Emotion e) noexcept { return static_cast<int>(e); }

inline Emotion emotion_from_int(int v) {
  if (v < 0 || v >= kEmotionCount) {
    throw InputDomainError("emotion code out of range: " + std::to_string(v));
  }
  return static_cast<Emotion>(v);
}

constexpr std::string_view emotion_name(Emotion e) noexcept {
  constexpr std::array<std::string_view, kEmotionCount> names = {"Neutral", "Angry", "Happy",
                                                                 "Sad", "Surprise"};
  return names[static_cast<std::size_t>(e)];
}

/// Case-insensitive name lookup.
inline std::optional<Emotion> parse_emotion(std::string_view name) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
  };
  const std::string key = lower(name);
  for (Emotion e : kAllEmotions) {
    if (lower(emotion_name(e)) == key) return e;
  }
  return std::nullopt;
}

enum class TokenKind { Text, Speech, EndOfPrompt, Separator, EmotionPrompt, Speaker, Pad };

struct VocabConfig {
  int text_size = 32;
  int content_levels = 8;
  int prosody_levels = 8;
  int speakers = 10;

  friend bool operator==(const VocabConfig&, const VocabConfig&) = default;
};

/// Unified token space shared by prompts and speech.
///
/// Layout: text ids [0, text_size), speech ids [text_size, text_size +
/// content_levels * prosody_levels), then <endofprompt>, </s>, one prompt
/// token per emotion, speaker tokens, pad. With the defaults this is 114 ids.
class Vocabulary {
 public:
  explicit Vocabulary(VocabConfig config = {}) : config_(config) {
    if (config.text_size < 1 || config.content_levels < 1 || config.prosody_levels < 1 ||
        config.speakers < 0) {
      throw ConfigError("vocabulary sizes must be positive");
    }
  }

  const VocabConfig& config() const noexcept { return config_; }

  int text_size() const noexcept { return config_.text_size; }
  int content_levels() const noexcept { return config_.content_levels; }
  int prosody_levels() const noexcept { return config_.prosody_levels; }
  int speech_size() const noexcept { return config_.content_levels * config_.prosody_levels; }
  int speaker_count() const noexcept { return config_.speakers; }

  int speech_begin() const noexcept { return config_.text_size; }
  int speech_end() const noexcept { return speech_begin() + speech_size(); }
  int end_of_prompt() const noexcept { return speech_end(); }
  int separator() const noexcept { return speech_end() + 1; }
  int emotion_token(Emotion e) const noexcept { return speech_end() + 2 + to_int(e); }
  int speaker_begin() const noexcept { return speech_end() + 2 + kEmotionCount; }
  int pad() const noexcept { return speaker_begin() + config_.speakers; }
  int size() const noexcept { return pad() + 1; }

  int speaker_token(int speaker) const {
    if (speaker < 0 || speaker >= config_.speakers) {
      throw InputDomainError("speaker id out of range: " + std::to_string(speaker));
    }
    return speaker_begin() + speaker;
  }

  bool contains(int id) const noexcept { return id >= 0 && id < size(); }
  bool is_text(int id) const noexcept { return id >= 0 && id < speech_begin(); }
  bool is_speech(int id) const noexcept { return id >= speech_begin() && id < speech_end(); }

  TokenKind kind(int id) const {
    if (!contains(id)) throw InputDomainError("token id out of vocabulary: " + std::to_string(id));
    if (is_text(id)) return TokenKind::Text;
    if (is_speech(id)) return TokenKind::Speech;
    if (id == end_of_prompt()) return TokenKind::EndOfPrompt;
    if (id == separator()) return TokenKind::Separator;
    if (id < speaker_begin()) return TokenKind::EmotionPrompt;
    if (id < pad()) return TokenKind::Speaker;
    return TokenKind::Pad;
  }

  int speech_token(int content, int prosody) const {
    if (content < 0 || content >= config_.content_levels || prosody < 0 ||
        prosody >= config_.prosody_levels) {
      throw InputDomainError("speech channel value out of range");
    }
    return speech_begin() + content * config_.prosody_levels + prosody;
  }

  int content_of(int id) const {
    require_speech(id);
    return (id - speech_begin()) / config_.prosody_levels;
  }

  int prosody_of(int id) const {
    require_speech(id);
    return (id - speech_begin()) % config_.prosody_levels;
  }

  Emotion emotion_of(int id) const {
    if (kind(id) != TokenKind::EmotionPrompt) {
      throw InputDomainError("not an emotion prompt token: " + std::to_string(id));
    }
    return static_cast<Emotion>(id - emotion_token(Emotion::Neutral));
  }

  int speaker_of(int id) const {
    if (kind(id) != TokenKind::Speaker) {
      throw InputDomainError("not a speaker token: " + std::to_string(id));
    }
    return id - speaker_begin();
  }

 private:
  void require_speech(int id) const {
    if (!is_speech(id)) throw InputDomainError("not a speech token: " + std::to_string(id));
  }

  VocabConfig config_;
};

}  // namespace emodpo
