#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "encdec/config.hpp"
#include "encdec/rng.hpp"
#include "encdec/sequence.hpp"

namespace encdec {

enum class SpanPolicy : std::uint8_t { multi_span, single_suffix };

// One denoising task. For single_suffix, `mu` is unused: the span is the
// last round(r * L) tokens.
struct DenoiserSpec {
  double mu = 3.0;
  double r = 0.15;
  SpanPolicy policy = SpanPolicy::multi_span;
  double weight = 1.0;

  std::string name() const;
  friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

// (3, .15), (12, .5), (32, .15), (32, .5) multi-span and the 3/4-suffix task,
// weighted 1:1:1:1:4. Tags are bank indices.
std::vector<DenoiserSpec> standard_bank();

// Tag for pairs produced by the vision prefix split.
inline constexpr std::uint8_t kVisionPrefixTag = 255;

struct ExamplePair {
  MixedSequence input;
  std::vector<std::int32_t> target;
  std::uint8_t denoiser = 0;

  friend bool operator==(const ExamplePair&, const ExamplePair&) = default;
};

// Round half to even.
std::size_t round_count(double x);

// Random composition of `total` into `parts` positive integers, uniform over
// all compositions.
std::vector<std::size_t> random_composition(std::size_t total, std::size_t parts, Rng& rng);

// Replaces spans of `tokens` by increasing sentinels. Tokens must be
// ordinary ids. The denoiser tag of the result is `tag`.
ExamplePair corrupt_spans(std::span<const std::int32_t> tokens, const DenoiserSpec& spec,
                          const TokenLayout& layout, Rng& rng, std::uint8_t tag = 0);

// Inverse of corrupt_spans. DataError when the sentinel structure is broken.
std::vector<std::int32_t> uncorrupt(const ExamplePair& pair, const TokenLayout& layout);

// Categorical draw proportional to weights; returns the bank index.
std::size_t sample_denoiser(std::span<const DenoiserSpec> bank, Rng& rng);

// Input = items through the last image, target = the trailing token ids.
// nullopt when nothing follows the last image; DataError without images.
std::optional<ExamplePair> vision_prefix_split(const MixedSequence& doc);

// Splits a document into consecutive pieces of at most `max_len` tokens.
std::vector<std::span<const std::int32_t>> chunk_tokens(std::span<const std::int32_t> tokens, std::size_t max_len);

// Shard file (little-endian):
//   "UL2S" | u32 version | u64 count
//   per pair: u8 tag | u32 item count | items | u32 target length | varint ids
//   item: u8 0 + varint token id, or u8 1 + u32 image index
std::vector<std::uint8_t> encode_shard(std::span<const ExamplePair> pairs);
std::vector<ExamplePair> decode_shard(std::span<const std::uint8_t> bytes, const std::string& what = "shard");
void write_shard(const std::filesystem::path& path, std::span<const ExamplePair> pairs);
std::vector<ExamplePair> read_shard(const std::filesystem::path& path);

// Corruption statistics recovered from produced pairs.
struct DenoiserStats {
  std::size_t examples = 0;
  std::size_t source_tokens = 0;
  std::size_t noise_tokens = 0;
  std::size_t spans = 0;

  double corruption_rate() const;
  double mean_span_length() const;
};

class CorruptionStats {
 public:
  explicit CorruptionStats(TokenLayout layout) : layout_(layout) {}
  void add(const ExamplePair& pair);
  const std::map<std::uint8_t, DenoiserStats>& by_tag() const { return by_tag_; }
  std::size_t total() const;

 private:
  TokenLayout layout_;
  std::map<std::uint8_t, DenoiserStats> by_tag_;
};

// Whitespace tokenizer stub: words get ids in order of first appearance;
// "<img:K>" becomes an image item referencing fixture image K.
class WordVocabulary {
 public:
  explicit WordVocabulary(std::size_t capacity) : capacity_(capacity) {}
  MixedSequence encode_line(std::string_view line);
  std::size_t size() const { return ids_.size(); }

 private:
  std::size_t capacity_;
  std::map<std::string, std::int32_t, std::less<>> ids_;
};

struct PreprocessOptions {
  std::vector<DenoiserSpec> bank = standard_bank();
  std::size_t chunk_len = 512;
  std::uint64_t seed = 0;
};

// Text documents are chunked and corrupted with a denoiser drawn per chunk;
// documents with images use the prefix split (skipped when nothing follows
// the last image). Chunk i draws from its own stream mix_seed(seed, i).
std::vector<ExamplePair> preprocess_documents(std::span<const MixedSequence> docs, const TokenLayout& layout,
                                              const PreprocessOptions& options);

}  // namespace encdec
