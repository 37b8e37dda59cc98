#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "emodpo/errors.hpp"
#include "emodpo/model.hpp"
#include "emodpo/training.hpp"

namespace emodpo {

// A checkpoint is a directory:
//   manifest.txt   key=value lines: format, vocabulary and model sizes,
//                  parameter count, array order, parameter hash
//   params.bin     all parameters as little-endian float32, manifest order
// Training states add
//   optimizer.bin  Adam first then second moments, same encoding
//   state.txt      key=value lines: stage, counters, shuffle order, rng
// Every file is written to "<name>.tmp" and renamed into place.

inline constexpr int kCheckpointFormatVersion = 1;

struct Manifest {
  int format_version = kCheckpointFormatVersion;
  std::string kind;  // "params" or "train_state"
  ModelConfig model;
  std::size_t param_count = 0;
  std::vector<std::string> arrays;  // name:rows:cols
  std::uint64_t params_hash = 0;
};

namespace detail {

using KeyValues = std::map<std::string, std::string>;

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline KeyValues parse_key_values(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(source + ": line " + std::to_string(n) + " is not key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline const std::string& kv_field(const KeyValues& kv, const std::string& key, const std::string& source) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw IoError(source + ": field '" + key + "' missing");
  return it->second;
}

inline std::uint64_t kv_uint(const KeyValues& kv, const std::string& key, const std::string& source,
                             int base = 10) {
  const std::string& v = kv_field(kv, key, source);
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, base);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE) {
    throw IoError(source + ": field '" + key + "' is not a valid unsigned integer: '" + v + "'");
  }
  return x;
}

inline int kv_int(const KeyValues& kv, const std::string& key, const std::string& source) {
  const std::uint64_t v = kv_uint(kv, key, source);
  if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
    throw IoError(source + ": field '" + key + "' out of range");
  }
  return static_cast<int>(v);
}

// Hex float, so doubles survive the text round trip bit-exactly.
inline std::string hex_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const std::string& s, const std::string& key, const std::string& source) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw IoError(source + ": field '" + key + "' is not a number: '" + s + "'");
  return v;
}

inline std::string encode_floats(std::span<const float> v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &v[i], 4);
    for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return out;
}

inline std::vector<float> decode_floats(const std::string& bytes, std::size_t count, const std::string& source) {
  if (bytes.size() != count * 4) {
    throw IoError(source + ": expected " + std::to_string(count * 4) + " bytes, found " +
                  std::to_string(bytes.size()) + (bytes.size() < count * 4 ? " (truncated)" : ""));
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)]))
              << (8 * b);
    }
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

inline std::string array_signature(const ArraySpec& a) {
  return a.name + ":" + std::to_string(a.rows) + ":" + std::to_string(a.cols);
}

}  // namespace detail

inline Manifest make_manifest(const ModelParams<float>& p, std::string kind) {
  Manifest m;
  m.kind = std::move(kind);
  m.model = p.config;
  m.param_count = p.count();
  for (const auto& a : p.layout.arrays()) m.arrays.push_back(detail::array_signature(a));
  m.params_hash = params_hash(p);
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::ostringstream os;
  const auto& c = m.model;
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.params_hash));
  os << "format_version=" << m.format_version << "\n"
     << "kind=" << m.kind << "\n"
     << "vocab.text_size=" << c.vocab.text_size << "\n"
     << "vocab.content_levels=" << c.vocab.content_levels << "\n"
     << "vocab.prosody_levels=" << c.vocab.prosody_levels << "\n"
     << "vocab.speakers=" << c.vocab.speakers << "\n"
     << "model.d_model=" << c.d_model << "\n"
     << "model.layers=" << c.layers << "\n"
     << "model.heads=" << c.heads << "\n"
     << "model.ffn=" << c.ffn << "\n"
     << "model.max_len=" << c.max_len << "\n"
     << "model.segment_positions=" << (c.segment_positions ? 1 : 0) << "\n"
     << "param_count=" << m.param_count << "\n"
     << "params_fnv=" << hash << "\n"
     << "arrays=";
  for (std::size_t i = 0; i < m.arrays.size(); ++i) os << (i ? "," : "") << m.arrays[i];
  os << "\n";
  return os.str();
}

/// Parses and validates a manifest. Every failure names the offending field.
inline Manifest parse_manifest(const std::string& text, const std::string& source) {
  const auto kv = detail::parse_key_values(text, source);
  Manifest m;
  m.format_version = detail::kv_int(kv, "format_version", source);
  if (m.format_version != kCheckpointFormatVersion) {
    throw IoError(source + ": field 'format_version' is " + std::to_string(m.format_version) + ", expected " +
                  std::to_string(kCheckpointFormatVersion));
  }
  m.kind = detail::kv_field(kv, "kind", source);
  if (m.kind != "params" && m.kind != "train_state") {
    throw IoError(source + ": field 'kind' has unknown value '" + m.kind + "'");
  }
  auto& c = m.model;
  c.vocab.text_size = detail::kv_int(kv, "vocab.text_size", source);
  c.vocab.content_levels = detail::kv_int(kv, "vocab.content_levels", source);
  c.vocab.prosody_levels = detail::kv_int(kv, "vocab.prosody_levels", source);
  c.vocab.speakers = detail::kv_int(kv, "vocab.speakers", source);
  c.d_model = detail::kv_int(kv, "model.d_model", source);
  c.layers = detail::kv_int(kv, "model.layers", source);
  c.heads = detail::kv_int(kv, "model.heads", source);
  c.ffn = detail::kv_int(kv, "model.ffn", source);
  c.max_len = detail::kv_int(kv, "model.max_len", source);
  const int seg = detail::kv_int(kv, "model.segment_positions", source);
  if (seg > 1) throw IoError(source + ": field 'model.segment_positions' must be 0 or 1");
  c.segment_positions = seg == 1;
  m.param_count = detail::kv_uint(kv, "param_count", source);
  m.params_hash = detail::kv_uint(kv, "params_fnv", source, 16);
  std::istringstream arrays(detail::kv_field(kv, "arrays", source));
  std::string a;
  while (std::getline(arrays, a, ',')) m.arrays.push_back(a);

  try {
    c.validate();
    Vocabulary v(c.vocab);
  } catch (const Error& e) {
    throw IoError(source + ": model fields are inconsistent: " + e.what());
  }
  const ParamLayout layout(c);
  if (layout.total() != m.param_count) {
    throw IoError(source + ": field 'param_count' is " + std::to_string(m.param_count) + ", the model fields imply " +
                  std::to_string(layout.total()));
  }
  if (m.arrays.size() != layout.arrays().size()) throw IoError(source + ": field 'arrays' has the wrong length");
  for (std::size_t i = 0; i < m.arrays.size(); ++i) {
    if (m.arrays[i] != detail::array_signature(layout.arrays()[i])) {
      throw IoError(source + ": field 'arrays' entry " + std::to_string(i) + " is '" + m.arrays[i] + "', expected '" +
                    detail::array_signature(layout.arrays()[i]) + "'");
    }
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  return parse_manifest(detail::read_file(path), path.string());
}

/// Throws ConfigError naming both sources when two vocabularies differ.
inline void require_same_vocab(const VocabConfig& a, const std::string& source_a, const VocabConfig& b,
                               const std::string& source_b) {
  if (a == b) return;
  auto describe = [](const VocabConfig& v) {
    return "text_size=" + std::to_string(v.text_size) + " content_levels=" + std::to_string(v.content_levels) +
           " prosody_levels=" + std::to_string(v.prosody_levels) + " speakers=" + std::to_string(v.speakers);
  };
  throw ConfigError("vocabulary mismatch: " + source_a + " has " + describe(a) + " but " + source_b + " has " +
                    describe(b));
}

namespace detail {

inline void write_params_files(const std::filesystem::path& dir, const ModelParams<float>& p, const std::string& kind) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  write_file_atomic(dir / "params.bin", encode_floats(p.values));
  write_file_atomic(dir / "manifest.txt", format_manifest(make_manifest(p, kind)));
}

inline ModelParams<float> read_params_files(const std::filesystem::path& dir, const Manifest& m) {
  const auto path = dir / "params.bin";
  ModelParams<float> p(m.model);
  p.values = decode_floats(read_file(path), m.param_count, path.string());
  if (params_hash(p) != m.params_hash) {
    throw IoError((dir / "manifest.txt").string() + ": field 'params_fnv' does not match " + path.string());
  }
  return p;
}

}  // namespace detail

inline void save_params(const ModelParams<float>& p, const std::filesystem::path& dir) {
  detail::write_params_files(dir, p, "params");
}

/// Loads the parameters of either checkpoint kind.
inline ModelParams<float> load_params(const std::filesystem::path& dir) {
  return detail::read_params_files(dir, read_manifest(dir));
}

inline void save_state(const TrainState& s, const std::filesystem::path& dir) {
  detail::write_params_files(dir, s.params, "train_state");
  std::vector<float> moments(s.adam_m);
  moments.insert(moments.end(), s.adam_v.begin(), s.adam_v.end());
  detail::write_file_atomic(dir / "optimizer.bin", detail::encode_floats(moments));

  std::ostringstream os;
  os << "stage=" << s.stage << "\n"
     << "step=" << s.step << "\n"
     << "epoch=" << s.epoch << "\n"
     << "cursor=" << s.cursor << "\n"
     << "order=";
  for (std::size_t i = 0; i < s.order.size(); ++i) os << (i ? " " : "") << s.order[i];
  os << "\n"
     << "rng=" << s.rng.state() << "\n"
     << "epoch_loss_sum=" << detail::hex_double(s.epoch_loss_sum) << "\n"
     << "epoch_batches=" << s.epoch_batches << "\n"
     << "epoch_history=";
  for (std::size_t i = 0; i < s.epoch_history.size(); ++i) os << (i ? " " : "") << detail::hex_double(s.epoch_history[i]);
  os << "\n";
  detail::write_file_atomic(dir / "state.txt", os.str());
}

inline TrainState load_state(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  if (m.kind != "train_state") {
    throw IoError((dir / "manifest.txt").string() + ": field 'kind' is '" + m.kind + "', expected 'train_state'");
  }
  const auto state_path = (dir / "state.txt").string();
  const auto kv = detail::parse_key_values(detail::read_file(dir / "state.txt"), state_path);
  TrainState s(detail::kv_field(kv, "stage", state_path), detail::read_params_files(dir, m), 0);

  const auto opt_path = dir / "optimizer.bin";
  const auto moments = detail::decode_floats(detail::read_file(opt_path), 2 * m.param_count, opt_path.string());
  s.adam_m.assign(moments.begin(), moments.begin() + static_cast<std::ptrdiff_t>(m.param_count));
  s.adam_v.assign(moments.begin() + static_cast<std::ptrdiff_t>(m.param_count), moments.end());

  s.step = detail::kv_uint(kv, "step", state_path);
  s.epoch = detail::kv_int(kv, "epoch", state_path);
  s.cursor = detail::kv_uint(kv, "cursor", state_path);
  {
    std::istringstream is(detail::kv_field(kv, "order", state_path));
    std::string tok;
    while (is >> tok) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
      if (*end != '\0' || tok[0] == '-') throw IoError(state_path + ": field 'order' has a bad entry '" + tok + "'");
      s.order.push_back(static_cast<std::size_t>(v));
    }
  }
  if (s.cursor > s.order.size()) throw IoError(state_path + ": field 'cursor' exceeds the shuffle order length");
  try {
    s.rng.set_state(detail::kv_field(kv, "rng", state_path));
  } catch (const std::invalid_argument&) {
    throw IoError(state_path + ": field 'rng' is malformed");
  }
  s.epoch_loss_sum =
      detail::parse_hex_double(detail::kv_field(kv, "epoch_loss_sum", state_path), "epoch_loss_sum", state_path);
  s.epoch_batches = detail::kv_uint(kv, "epoch_batches", state_path);
  {
    std::istringstream is(detail::kv_field(kv, "epoch_history", state_path));
    std::string tok;
    while (is >> tok) s.epoch_history.push_back(detail::parse_hex_double(tok, "epoch_history", state_path));
  }
  return s;
}

}  // namespace emodpo
