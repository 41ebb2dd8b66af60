#include "encdec/run_config.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "encdec/errors.hpp"

namespace encdec {

namespace {

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  while (true) {
    const auto pos = text.find(sep);
    out.push_back(text.substr(0, pos));
    if (pos == std::string_view::npos) return out;
    text = text.substr(pos + 1);
  }
}

}  // namespace

std::string format_denoisers(const std::vector<DenoiserSpec>& bank) {
  std::string out;
  for (const DenoiserSpec& d : bank) {
    if (!out.empty()) out += ',';
    if (d.policy == SpanPolicy::single_suffix) {
      out += fmt::format("suffix:{}:{}", format_double(d.r), format_double(d.weight));
    } else {
      out += fmt::format("{}:{}:{}", format_double(d.mu), format_double(d.r), format_double(d.weight));
    }
  }
  return out;
}

std::vector<DenoiserSpec> parse_denoisers(std::string_view text) {
  std::vector<DenoiserSpec> bank;
  for (std::string_view entry : split(text, ',')) {
    const auto parts = split(entry, ':');
    if (parts.size() != 3) {
      throw ConfigError(fmt::format("ul2.denoisers: entry '{}' is not mu:r:weight or suffix:r:weight", entry));
    }
    DenoiserSpec d;
    if (parts[0] == "suffix") {
      d.policy = SpanPolicy::single_suffix;
      d.mu = 0.0;
    } else {
      d.mu = parse_double("ul2.denoisers mu", parts[0]);
      if (!(d.mu >= 1.0)) throw ConfigError(fmt::format("ul2.denoisers: mu must be >= 1, got '{}'", parts[0]));
    }
    d.r = parse_double("ul2.denoisers r", parts[1]);
    d.weight = parse_double("ul2.denoisers weight", parts[2]);
    if (!(d.r > 0.0 && d.r < 1.0)) throw ConfigError(fmt::format("ul2.denoisers: r must be in (0, 1), got '{}'", parts[1]));
    if (!(d.weight > 0.0)) throw ConfigError(fmt::format("ul2.denoisers: weight must be positive, got '{}'", parts[2]));
    bank.push_back(d);
  }
  if (bank.size() >= kVisionPrefixTag) throw ConfigError("ul2.denoisers: at most 254 denoisers");
  return bank;
}

RunConfig RunConfig::from_pairs(const KeyValues& pairs) {
  RunConfig rc;
  KeyValues train;
  for (const auto& [key, value] : pairs) {
    const std::string_view k = key;
    if (k == "seed") {
      rc.seed = parse_u64(k, value);
    } else if (k.starts_with("model.")) {
      rc.model.set(k.substr(6), value);
    } else if (k.starts_with("train.")) {
      train.emplace_back(key.substr(6), value);
    } else if (k == "ul2.chunk_len") {
      rc.ul2.chunk_len = parse_size(k, value);
    } else if (k == "ul2.seed") {
      rc.ul2.seed = parse_u64(k, value);
    } else if (k == "ul2.shard_size") {
      rc.shard_size = parse_size(k, value);
    } else if (k == "ul2.denoisers") {
      rc.ul2.bank = parse_denoisers(value);
    } else {
      throw ConfigError(fmt::format("unknown config key '{}'", key));
    }
  }
  rc.train = TrainOptions::from_pairs(train);
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const KeyValues& overrides) {
  KeyValues pairs;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
    std::ostringstream text;
    text << in.rdbuf();
    try {
      pairs = parse_key_values(text.str());
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
  }
  pairs.insert(pairs.end(), overrides.begin(), overrides.end());
  return from_pairs(pairs);
}

KeyValues RunConfig::to_pairs() const {
  KeyValues out{{"seed", std::to_string(seed)}};
  for (const auto& [k, v] : model.to_pairs()) out.emplace_back("model." + k, v);
  for (const auto& [k, v] : train.to_pairs()) out.emplace_back("train." + k, v);
  out.emplace_back("ul2.chunk_len", std::to_string(ul2.chunk_len));
  out.emplace_back("ul2.seed", std::to_string(ul2.seed));
  out.emplace_back("ul2.shard_size", std::to_string(shard_size));
  out.emplace_back("ul2.denoisers", format_denoisers(ul2.bank));
  return out;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (ul2.chunk_len < 2) throw ConfigError("ul2.chunk_len must be at least 2");
  if (ul2.bank.empty()) throw ConfigError("ul2.denoisers must not be empty");
  if (shard_size == 0) throw ConfigError("ul2.shard_size must be positive");
}

}  // namespace encdec
