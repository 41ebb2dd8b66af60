#pragma once

#include <cstdint>
#include <span>

#include "encdec/checkpoint.hpp"

namespace encdec {

// Encoder-decoder checkpoint initialised from a decoder-only one: both stacks
// copy the source layers, the merged decoder attention reuses the source
// self-attention weights, and the embedding is copied once. A vision
// projection the source lacks is drawn fresh from `seed`.
// Throws ShapeError naming the first offending tensor, ConfigError for an
// incompatible target config.
Checkpoint adapt_from_decoder_only(const Checkpoint& src, const ModelConfig& target, std::uint64_t seed = 0);

// Elementwise mean with 64-bit accumulation; step is the maximum input step.
// Each element's values are summed in sorted order, so the result does not
// depend on the order of `ckpts`.
Checkpoint average_checkpoints(std::span<const Checkpoint> ckpts);

}  // namespace encdec
