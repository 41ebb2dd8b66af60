#include "encdec/sequence.hpp"

namespace encdec {

MixedSequence MixedSequence::from_tokens(std::span<const std::int32_t> ids) {
  MixedSequence seq;
  seq.items.reserve(ids.size());
  for (std::int32_t id : ids) seq.items.push_back(SeqItem::tok(id));
  return seq;
}

std::size_t MixedSequence::expanded_length(std::size_t tokens_per_image) const {
  std::size_t n = 0;
  for (const SeqItem& item : items) n += item.is_image() ? tokens_per_image : 1;
  return n;
}

std::size_t MixedSequence::image_count() const {
  std::size_t n = 0;
  for (const SeqItem& item : items) n += item.is_image();
  return n;
}

std::vector<std::int32_t> MixedSequence::token_ids() const {
  std::vector<std::int32_t> out;
  for (const SeqItem& item : items)
    if (!item.is_image()) out.push_back(item.token);
  return out;
}

}  // namespace encdec
