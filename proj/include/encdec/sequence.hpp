#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace encdec {

// One encoder-input item: a token id, or a reference to an image whose 256
// precomputed vision embeddings live in a VisionFixture.
struct SeqItem {
  enum class Kind : std::uint8_t { token = 0, image = 1 };

  Kind kind = Kind::token;
  std::int32_t token = 0;
  std::uint32_t image_index = 0;

  static SeqItem tok(std::int32_t id) { return {Kind::token, id, 0}; }
  static SeqItem img(std::uint32_t index) { return {Kind::image, 0, index}; }
  bool is_image() const { return kind == Kind::image; }

  friend bool operator==(const SeqItem&, const SeqItem&) = default;
};

struct MixedSequence {
  std::vector<SeqItem> items;

  static MixedSequence from_tokens(std::span<const std::int32_t> ids);
  // 1 per token, tokens_per_image per image.
  std::size_t expanded_length(std::size_t tokens_per_image = 256) const;
  std::size_t image_count() const;
  // Token ids only, in order (images skipped).
  std::vector<std::int32_t> token_ids() const;

  friend bool operator==(const MixedSequence&, const MixedSequence&) = default;
};

}  // namespace encdec
