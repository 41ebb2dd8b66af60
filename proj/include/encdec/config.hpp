#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "encdec/attention.hpp"

namespace encdec {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Reserved ids live at the top of the vocabulary:
//   [0, first_special)            ordinary tokens
//   pad, bos, eos                 three control ids
//   sentinel_base + k             sentinel k, k < num_sentinels
struct TokenLayout {
  std::size_t vocab_size = 0;
  std::size_t num_sentinels = 0;

  std::int32_t pad() const { return sentinel_base() - 3; }
  std::int32_t bos() const { return sentinel_base() - 2; }
  std::int32_t eos() const { return sentinel_base() - 1; }
  std::int32_t sentinel_base() const { return static_cast<std::int32_t>(vocab_size - num_sentinels); }
  std::int32_t sentinel(std::size_t k) const;
  bool is_sentinel(std::int32_t id) const { return id >= sentinel_base() && id < static_cast<std::int32_t>(vocab_size); }
  std::size_t sentinel_index(std::int32_t id) const { return static_cast<std::size_t>(id - sentinel_base()); }
  // Number of ordinary (non-reserved) ids.
  std::size_t ordinary() const { return static_cast<std::size_t>(pad()); }
  void validate() const;
};

enum class Architecture { encoder_decoder, decoder_only };
enum class CrossAttentionLayers { all, global_only };

struct VisionConfig {
  std::size_t d_vision = 0;  // 0 disables the image path
  std::size_t tokens_per_image = 256;
  bool frozen = true;

  friend bool operator==(const VisionConfig&, const VisionConfig&) = default;
};

struct ModelConfig {
  Architecture architecture = Architecture::encoder_decoder;
  std::size_t vocab_size = 64;
  std::size_t num_sentinels = 8;
  std::size_t d_model = 32;
  std::size_t d_head = 16;
  std::size_t n_q_heads = 2;
  std::size_t n_kv_heads = 1;
  std::size_t n_layers = 2;  // per stack
  std::size_t d_ffn = 64;
  std::size_t local_window = 512;
  std::size_t local_per_global = 5;  // 5 local layers, then one global
  double rope_local_base = 10'000.0;
  double rope_global_base = 1'000'000.0;
  double pi_scale = 1.0;
  double norm_eps = 1e-6;
  bool tied_embeddings = true;
  bool merged_attention = true;
  CrossAttentionLayers cross_attention_layers = CrossAttentionLayers::all;
  bool encoder_full_visibility = false;
  PositionScheme position_scheme = PositionScheme::continued;
  VisionConfig vision;
  std::size_t max_seq = 16'384;

  // Layer i is global at the end of every (local_per_global + 1) group; a
  // trailing partial group also ends in a global layer, so a stack has
  // ceil(n_layers / (local_per_global + 1)) global layers.
  LayerKind layer_kind(std::size_t layer) const;
  std::size_t global_layer_count() const;
  RopeConfig rope_for(LayerKind kind) const;
  bool has_cross(std::size_t decoder_layer) const;
  HeadLayout heads() const { return {n_q_heads, n_kv_heads, d_head, norm_eps}; }
  TokenLayout tokens() const { return {vocab_size, num_sentinels}; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // Canonical `key=value` form, one field per entry, fixed order.
  KeyValues to_pairs() const;
  // Sets one field from text; unknown key or bad value -> ConfigError.
  void set(std::string_view key, std::string_view value);
  static ModelConfig from_pairs(const KeyValues& pairs);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Field parsing shared by every key=value consumer.
std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
double parse_double(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
std::string format_double(double v);

// Parses `key=value` lines; blank lines and '#' comments are skipped.
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& pairs);

}  // namespace encdec
