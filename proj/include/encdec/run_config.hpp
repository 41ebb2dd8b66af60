#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "encdec/config.hpp"
#include "encdec/training.hpp"
#include "encdec/ul2.hpp"

namespace encdec {

// Flat key=value run description. Keys:
//   seed                      model initialisation seed
//   model.<field>             ModelConfig fields
//   train.<field>             TrainOptions fields
//   ul2.chunk_len, ul2.seed, ul2.shard_size
//   ul2.denoisers             comma list of mu:r:weight or suffix:r:weight
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainOptions train;
  PreprocessOptions ul2;
  std::size_t shard_size = 4096;  // pairs per shard file

  // Later pairs override earlier ones. Unknown keys -> ConfigError.
  static RunConfig from_pairs(const KeyValues& pairs);
  // File contents (when `path` is non-empty) followed by the overrides.
  static RunConfig load(const std::filesystem::path& path, const KeyValues& overrides = {});

  KeyValues to_pairs() const;
  void validate() const;
};

std::string format_denoisers(const std::vector<DenoiserSpec>& bank);
std::vector<DenoiserSpec> parse_denoisers(std::string_view text);

}  // namespace encdec
