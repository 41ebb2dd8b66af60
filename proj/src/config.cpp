#include "encdec/config.hpp"

#include <charconv>
#include <functional>
#include <map>

#include <fmt/format.h>

#include "encdec/errors.hpp"

namespace encdec {

std::int32_t TokenLayout::sentinel(std::size_t k) const {
  if (k >= num_sentinels) {
    throw ConfigError(fmt::format("sentinel {} requested but only {} are reserved", k, num_sentinels));
  }
  return sentinel_base() + static_cast<std::int32_t>(k);
}

void TokenLayout::validate() const {
  if (num_sentinels < 2) throw ConfigError("num_sentinels must be >= 2");
  if (vocab_size < num_sentinels + 4) {
    throw ConfigError(fmt::format("vocab_size {} too small for {} sentinels + 3 control ids + 1 ordinary token",
                                  vocab_size, num_sentinels));
  }
  if (vocab_size > static_cast<std::size_t>(INT32_MAX)) throw ConfigError("vocab_size exceeds int32 range");
}

LayerKind ModelConfig::layer_kind(std::size_t layer) const {
  const std::size_t period = local_per_global + 1;
  if ((layer + 1) % period == 0 || layer + 1 == n_layers) return LayerKind::global();
  return LayerKind::local(local_window);
}

std::size_t ModelConfig::global_layer_count() const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < n_layers; ++i) count += layer_kind(i).is_global();
  return count;
}

RopeConfig ModelConfig::rope_for(LayerKind kind) const {
  if (kind.is_global()) return {rope_global_base, pi_scale};
  return {rope_local_base, 1.0};
}

bool ModelConfig::has_cross(std::size_t decoder_layer) const {
  if (architecture != Architecture::encoder_decoder) return false;
  return cross_attention_layers == CrossAttentionLayers::all || layer_kind(decoder_layer).is_global();
}

void ModelConfig::validate() const {
  tokens().validate();
  if (d_model == 0 || n_layers == 0 || d_ffn == 0) throw ConfigError("d_model, n_layers and d_ffn must be positive");
  heads().validate();
  if (local_window == 0) throw ConfigError("local_window must be positive");
  if (!(pi_scale >= 1.0)) throw ConfigError(fmt::format("pi_scale must be >= 1, got {}", pi_scale));
  if (!(rope_local_base > 1.0) || !(rope_global_base > 1.0)) throw ConfigError("rope bases must exceed 1");
  if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be non-negative");
  if (vision.tokens_per_image != 256) {
    throw ConfigError(fmt::format("tokens_per_image must be 256, got {}", vision.tokens_per_image));
  }
  if (max_seq == 0) throw ConfigError("max_seq must be positive");
  if (architecture == Architecture::decoder_only && vision.d_vision != 0) {
    throw ConfigError("decoder-only configs carry no vision projection");
  }
}

namespace {

template <typename Enum>
struct EnumNames {
  std::vector<std::pair<Enum, const char*>> names;

  const char* to_str(Enum e) const {
    for (auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
  Enum parse(std::string_view key, std::string_view text) const {
    for (auto& [v, n] : names)
      if (text == n) return v;
    throw ConfigError(fmt::format("{}: unknown value '{}'", key, text));
  }
};

const EnumNames<Architecture> kArch{{{Architecture::encoder_decoder, "encoder_decoder"},
                                     {Architecture::decoder_only, "decoder_only"}}};
const EnumNames<CrossAttentionLayers> kCross{{{CrossAttentionLayers::all, "all"},
                                              {CrossAttentionLayers::global_only, "global_only"}}};
const EnumNames<PositionScheme> kScheme{{{PositionScheme::continued, "continued"},
                                         {PositionScheme::restart, "restart"}}};

struct Field {
  const char* key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, std::string_view)> set;
};

#define SIZE_FIELD(name, member)                                                     \
  Field {                                                                            \
    name, [](const ModelConfig& c) { return std::to_string(c.member); },            \
        [](ModelConfig& c, std::string_view v) { c.member = parse_size(name, v); } \
  }
#define DOUBLE_FIELD(name, member)                                                     \
  Field {                                                                              \
    name, [](const ModelConfig& c) { return format_double(c.member); },               \
        [](ModelConfig& c, std::string_view v) { c.member = parse_double(name, v); } \
  }
#define BOOL_FIELD(name, member)                                                     \
  Field {                                                                            \
    name, [](const ModelConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](ModelConfig& c, std::string_view v) { c.member = parse_bool(name, v); } \
  }
#define ENUM_FIELD(name, member, table)                                                     \
  Field {                                                                                   \
    name, [](const ModelConfig& c) { return std::string(table.to_str(c.member)); },        \
        [](ModelConfig& c, std::string_view v) { c.member = table.parse(name, v); }       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      ENUM_FIELD("architecture", architecture, kArch),
      SIZE_FIELD("vocab_size", vocab_size),
      SIZE_FIELD("num_sentinels", num_sentinels),
      SIZE_FIELD("d_model", d_model),
      SIZE_FIELD("d_head", d_head),
      SIZE_FIELD("n_q_heads", n_q_heads),
      SIZE_FIELD("n_kv_heads", n_kv_heads),
      SIZE_FIELD("n_layers", n_layers),
      SIZE_FIELD("d_ffn", d_ffn),
      SIZE_FIELD("local_window", local_window),
      SIZE_FIELD("local_per_global", local_per_global),
      DOUBLE_FIELD("rope_local_base", rope_local_base),
      DOUBLE_FIELD("rope_global_base", rope_global_base),
      DOUBLE_FIELD("pi_scale", pi_scale),
      DOUBLE_FIELD("norm_eps", norm_eps),
      BOOL_FIELD("tied_embeddings", tied_embeddings),
      BOOL_FIELD("merged_attention", merged_attention),
      ENUM_FIELD("cross_attention_layers", cross_attention_layers, kCross),
      BOOL_FIELD("encoder_full_visibility", encoder_full_visibility),
      ENUM_FIELD("position_scheme", position_scheme, kScheme),
      SIZE_FIELD("d_vision", vision.d_vision),
      SIZE_FIELD("tokens_per_image", vision.tokens_per_image),
      BOOL_FIELD("vision_frozen", vision.frozen),
      SIZE_FIELD("max_seq", max_seq),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef ENUM_FIELD

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

KeyValues ModelConfig::to_pairs() const {
  KeyValues out;
  for (const Field& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError(fmt::format("unknown model config key '{}'", key));
}

ModelConfig ModelConfig::from_pairs(const KeyValues& pairs) {
  ModelConfig cfg;
  for (const auto& [k, v] : pairs) cfg.set(k, v);
  return cfg;
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

std::uint64_t parse_u64(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    throw ConfigError(fmt::format("{}: expected a non-negative integer, got '{}'", key, value));
  }
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  const std::string s(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, value));
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(fmt::format("{}: expected true/false, got '{}'", key, value));
}

std::string format_double(double v) { return fmt::format("{}", v); }

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(fmt::format("line {}: expected key=value, got '{}'", line_no, line));
    }
    out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

std::string format_key_values(const KeyValues& pairs) {
  std::string out;
  for (const auto& [k, v] : pairs) out += fmt::format("{}={}\n", k, v);
  return out;
}

}  // namespace encdec
