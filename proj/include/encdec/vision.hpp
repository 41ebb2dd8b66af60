#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "encdec/tensor.hpp"

namespace encdec {

// Precomputed per-image vision embeddings standing in for a frozen vision
// tower. File layout (little-endian):
//   "VEMB" | u32 version | u32 d_vision | u32 image count
//   then image count * 256 * d_vision float32 values, row-major.
struct VisionFixture {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kTokensPerImage = 256;

  std::size_t d_vision = 0;
  std::vector<Tensor> images;  // each [256 x d_vision]

  // Deterministic synthetic embeddings; values are exactly representable in
  // float32 so file round-trips are lossless.
  static VisionFixture synthetic(std::size_t d_vision, std::size_t count, std::uint64_t seed);

  void save(const std::filesystem::path& path) const;
  static VisionFixture load(const std::filesystem::path& path);
};

}  // namespace encdec
