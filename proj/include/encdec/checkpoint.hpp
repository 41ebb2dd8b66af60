#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "encdec/config.hpp"
#include "encdec/model.hpp"
#include "encdec/tensor.hpp"

namespace encdec {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

std::string dtype_name(DType d);
DType parse_dtype(std::string_view s);

struct Checkpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  DType dtype = DType::f64;
  ParamMap tensors;

  static Checkpoint from_model(const Model& model, std::uint64_t step = 0, DType dtype = DType::f64);
  Model to_model() const;
  // Throws ShapeError unless the tensors are exactly parameter_shapes(config).
  void validate() const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// "EDCK" file, little-endian:
//   "EDCK" | u32 version | u32 metadata length | metadata (key=value lines)
//   u32 tensor count, then per tensor:
//     u32 name length | name | u32 rank | u64 extents... | u8 dtype | payload
//   u32 CRC-32 of every byte after the version field
// Version errors are reported before the checksum is verified.
inline constexpr std::uint32_t kCheckpointVersion = 1;

// f32 checkpoints round each value to float on save.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint");
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Metadata followed by one manifest line per tensor.
std::string describe(const Checkpoint& ckpt);

}  // namespace encdec
