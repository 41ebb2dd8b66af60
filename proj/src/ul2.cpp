#include "encdec/ul2.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "encdec/binary_io.hpp"
#include "encdec/errors.hpp"

namespace encdec {

namespace {

constexpr std::uint32_t kShardVersion = 1;
constexpr std::size_t kMaxPairLength = 16'384;

void append_sentinel(ExamplePair& pair, const TokenLayout& layout, std::size_t k, bool to_input) {
  if (k >= layout.num_sentinels) {
    throw DataError(fmt::format("corruption needs sentinel {} but the vocabulary reserves only {}", k,
                                layout.num_sentinels));
  }
  if (to_input) {
    pair.input.items.push_back(SeqItem::tok(layout.sentinel(k)));
  } else {
    pair.target.push_back(layout.sentinel(k));
  }
}

ExamplePair single_suffix(std::span<const std::int32_t> tokens, double r, const TokenLayout& layout, std::uint8_t tag) {
  const std::size_t L = tokens.size();
  const std::size_t noise = std::clamp<std::size_t>(round_count(r * static_cast<double>(L)), 1, L - 1);
  ExamplePair pair;
  pair.denoiser = tag;
  for (std::size_t i = 0; i < L - noise; ++i) pair.input.items.push_back(SeqItem::tok(tokens[i]));
  append_sentinel(pair, layout, 0, true);
  append_sentinel(pair, layout, 0, false);
  pair.target.insert(pair.target.end(), tokens.end() - static_cast<std::ptrdiff_t>(noise), tokens.end());
  append_sentinel(pair, layout, 1, false);
  return pair;
}

}  // namespace

std::string DenoiserSpec::name() const {
  if (policy == SpanPolicy::single_suffix) return fmt::format("S(r={})", format_double(r));
  return fmt::format("mu={},r={}", format_double(mu), format_double(r));
}

std::vector<DenoiserSpec> standard_bank() {
  return {
      {3.0, 0.15, SpanPolicy::multi_span, 1.0},
      {12.0, 0.5, SpanPolicy::multi_span, 1.0},
      {32.0, 0.15, SpanPolicy::multi_span, 1.0},
      {32.0, 0.5, SpanPolicy::multi_span, 1.0},
      {0.0, 0.75, SpanPolicy::single_suffix, 4.0},
  };
}

std::size_t round_count(double x) {
  if (!(x >= 0.0) || !std::isfinite(x)) throw DataError(fmt::format("cannot round {} to a count", x));
  // nearbyint honours the default FE_TONEAREST mode: ties go to even.
  return static_cast<std::size_t>(std::nearbyint(x));
}

std::vector<std::size_t> random_composition(std::size_t total, std::size_t parts, Rng& rng) {
  if (parts == 0 || parts > total) {
    throw DataError(fmt::format("cannot split {} into {} positive parts", total, parts));
  }
  // Choose parts-1 distinct cut points among the total-1 interior positions.
  std::vector<std::size_t> cuts(total - 1);
  std::iota(cuts.begin(), cuts.end(), std::size_t{1});
  for (std::size_t i = 0; i + 1 < parts; ++i) {
    std::swap(cuts[i], cuts[i + rng.below(cuts.size() - i)]);
  }
  cuts.resize(parts - 1);
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::size_t> out;
  std::size_t prev = 0;
  for (std::size_t c : cuts) {
    out.push_back(c - prev);
    prev = c;
  }
  out.push_back(total - prev);
  return out;
}

ExamplePair corrupt_spans(std::span<const std::int32_t> tokens, const DenoiserSpec& spec, const TokenLayout& layout,
                          Rng& rng, std::uint8_t tag) {
  const std::size_t L = tokens.size();
  if (L < 2) throw DataError(fmt::format("corrupt_spans needs at least 2 tokens, got {}", L));
  if (!(spec.r > 0.0 && spec.r < 1.0)) throw ConfigError(fmt::format("corruption rate {} outside (0, 1)", spec.r));
  for (std::int32_t id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= layout.ordinary()) {
      throw DataError(fmt::format("token id {} is not an ordinary id (must be below {})", id, layout.ordinary()));
    }
  }
  if (spec.policy == SpanPolicy::single_suffix) return single_suffix(tokens, spec.r, layout, tag);
  if (!(spec.mu > 0.0)) throw ConfigError(fmt::format("mean span length {} must be positive", spec.mu));

  const std::size_t noise = std::clamp<std::size_t>(round_count(spec.r * static_cast<double>(L)), 1, L - 1);
  // Stochastic rounding keeps E[n] = noise / mu, so total noise over total
  // spans tracks mu even when noise / mu is far from an integer.
  const double ratio = static_cast<double>(noise) / spec.mu;
  double whole = std::floor(ratio);
  if (rng.bernoulli(ratio - whole)) whole += 1.0;
  const std::size_t n = std::clamp<std::size_t>(static_cast<std::size_t>(whole), 1, noise);
  const std::size_t kept = L - noise;
  if (kept + 1 < n) return single_suffix(tokens, spec.r, layout, tag);

  const std::vector<std::size_t> spans = random_composition(noise, n, rng);
  // n + 1 gaps; the inner ones are at least 1 so spans never touch.
  std::vector<std::size_t> gaps = random_composition(kept + 2, n + 1, rng);
  gaps.front() -= 1;
  gaps.back() -= 1;

  ExamplePair pair;
  pair.denoiser = tag;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < gaps[k]; ++i) pair.input.items.push_back(SeqItem::tok(tokens[pos++]));
    append_sentinel(pair, layout, k, true);
    append_sentinel(pair, layout, k, false);
    for (std::size_t i = 0; i < spans[k]; ++i) pair.target.push_back(tokens[pos++]);
  }
  for (std::size_t i = 0; i < gaps[n]; ++i) pair.input.items.push_back(SeqItem::tok(tokens[pos++]));
  append_sentinel(pair, layout, n, false);
  return pair;
}

std::vector<std::int32_t> uncorrupt(const ExamplePair& pair, const TokenLayout& layout) {
  // Split the target into the span after each sentinel.
  std::vector<std::vector<std::int32_t>> spans;
  for (std::int32_t id : pair.target) {
    if (layout.is_sentinel(id)) {
      if (layout.sentinel_index(id) != spans.size()) {
        throw DataError(fmt::format("target sentinel {} out of order (expected {})", layout.sentinel_index(id),
                                    spans.size()));
      }
      spans.emplace_back();
    } else {
      if (spans.empty()) throw DataError("target does not start with sentinel 0");
      spans.back().push_back(id);
    }
  }
  if (spans.empty()) throw DataError("target has no sentinels");
  if (!spans.back().empty()) throw DataError("target does not end with the final sentinel");
  const std::size_t n = spans.size() - 1;

  std::vector<std::int32_t> out;
  std::size_t next = 0;
  for (const SeqItem& item : pair.input.items) {
    if (item.is_image()) throw DataError("uncorrupt: input contains an image");
    if (!layout.is_sentinel(item.token)) {
      out.push_back(item.token);
      continue;
    }
    const std::size_t k = layout.sentinel_index(item.token);
    if (k != next || k >= n) {
      throw DataError(fmt::format("input sentinel {} does not match target structure (expected {} of {})", k, next, n));
    }
    out.insert(out.end(), spans[k].begin(), spans[k].end());
    ++next;
  }
  if (next != n) throw DataError(fmt::format("input has {} sentinels but target has {} spans", next, n));
  return out;
}

std::size_t sample_denoiser(std::span<const DenoiserSpec> bank, Rng& rng) {
  if (bank.empty()) throw ConfigError("empty denoiser bank");
  double total = 0.0;
  for (const DenoiserSpec& s : bank) {
    if (!(s.weight > 0.0)) throw ConfigError(fmt::format("denoiser {} has non-positive weight", s.name()));
    total += s.weight;
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    acc += bank[i].weight;
    if (u < acc) return i;
  }
  return bank.size() - 1;
}

std::optional<ExamplePair> vision_prefix_split(const MixedSequence& doc) {
  const auto last = std::find_if(doc.items.rbegin(), doc.items.rend(), [](const SeqItem& i) { return i.is_image(); });
  if (last == doc.items.rend()) throw DataError("vision_prefix_split: document has no image");
  const auto split = last.base();  // one past the last image
  if (split == doc.items.end()) return std::nullopt;
  ExamplePair pair;
  pair.denoiser = kVisionPrefixTag;
  pair.input.items.assign(doc.items.begin(), split);
  for (auto it = split; it != doc.items.end(); ++it) pair.target.push_back(it->token);
  return pair;
}

std::vector<std::span<const std::int32_t>> chunk_tokens(std::span<const std::int32_t> tokens, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("chunk length must be positive");
  std::vector<std::span<const std::int32_t>> out;
  for (std::size_t start = 0; start < tokens.size(); start += max_len) {
    out.push_back(tokens.subspan(start, std::min(max_len, tokens.size() - start)));
  }
  return out;
}

std::vector<std::uint8_t> encode_shard(std::span<const ExamplePair> pairs) {
  ByteWriter w;
  w.str("UL2S");
  w.u32(kShardVersion);
  w.u64(pairs.size());
  for (const ExamplePair& p : pairs) {
    w.u8(p.denoiser);
    w.u32(static_cast<std::uint32_t>(p.input.items.size()));
    for (const SeqItem& item : p.input.items) {
      w.u8(static_cast<std::uint8_t>(item.kind));
      if (item.is_image()) {
        w.u32(item.image_index);
      } else {
        w.varint(static_cast<std::uint32_t>(item.token));
      }
    }
    w.u32(static_cast<std::uint32_t>(p.target.size()));
    for (std::int32_t id : p.target) w.varint(static_cast<std::uint32_t>(id));
  }
  return w.bytes();
}

std::vector<ExamplePair> decode_shard(std::span<const std::uint8_t> bytes, const std::string& what) {
  ByteReader r(bytes, what);
  if (r.str(4) != "UL2S") r.fail("bad magic (expected UL2S)");
  const std::uint32_t version = r.u32();
  if (version != kShardVersion) {
    throw VersionError(fmt::format("{}: unsupported shard version {} (expected {})", what, version, kShardVersion));
  }
  const std::uint64_t count = r.u64();
  auto read_id = [&r] {
    const std::uint64_t v = r.varint();
    if (v > 0x7fffffffULL) r.fail(fmt::format("token id {} out of range", v));
    return static_cast<std::int32_t>(v);
  };
  std::vector<ExamplePair> pairs;
  for (std::uint64_t i = 0; i < count; ++i) {
    ExamplePair p;
    p.denoiser = r.u8();
    const std::uint32_t items = r.u32();
    for (std::uint32_t j = 0; j < items; ++j) {
      const std::uint8_t tag = r.u8();
      if (tag == 0) {
        p.input.items.push_back(SeqItem::tok(read_id()));
      } else if (tag == 1) {
        p.input.items.push_back(SeqItem::img(r.u32()));
      } else {
        r.fail(fmt::format("unknown item tag {}", tag));
      }
    }
    const std::uint32_t target = r.u32();
    for (std::uint32_t j = 0; j < target; ++j) p.target.push_back(read_id());
    pairs.push_back(std::move(p));
  }
  if (r.remaining() != 0) r.fail(fmt::format("{} trailing bytes after {} examples", r.remaining(), count));
  return pairs;
}

void write_shard(const std::filesystem::path& path, std::span<const ExamplePair> pairs) {
  write_file_bytes(path, encode_shard(pairs));
}

std::vector<ExamplePair> read_shard(const std::filesystem::path& path) {
  return decode_shard(read_file_bytes(path), "shard " + path.string());
}

double DenoiserStats::corruption_rate() const {
  return source_tokens ? static_cast<double>(noise_tokens) / static_cast<double>(source_tokens) : 0.0;
}

double DenoiserStats::mean_span_length() const {
  return spans ? static_cast<double>(noise_tokens) / static_cast<double>(spans) : 0.0;
}

void CorruptionStats::add(const ExamplePair& pair) {
  DenoiserStats& s = by_tag_[pair.denoiser];
  ++s.examples;
  if (pair.denoiser == kVisionPrefixTag) {
    s.source_tokens += pair.input.expanded_length() + pair.target.size();
    return;
  }
  std::size_t input_sentinels = 0, input_tokens = 0;
  for (const SeqItem& item : pair.input.items) {
    if (layout_.is_sentinel(item.token) && !item.is_image()) {
      ++input_sentinels;
    } else {
      ++input_tokens;
    }
  }
  std::size_t target_sentinels = 0;
  for (std::int32_t id : pair.target) target_sentinels += layout_.is_sentinel(id);
  const std::size_t noise = pair.target.size() - target_sentinels;
  s.noise_tokens += noise;
  s.spans += input_sentinels;
  s.source_tokens += input_tokens + noise;
}

std::size_t CorruptionStats::total() const {
  std::size_t n = 0;
  for (const auto& [tag, s] : by_tag_) n += s.examples;
  return n;
}

MixedSequence WordVocabulary::encode_line(std::string_view line) {
  MixedSequence seq;
  std::size_t pos = 0;
  while (pos < line.size()) {
    const std::size_t start = line.find_first_not_of(" \t\r\n", pos);
    if (start == std::string_view::npos) break;
    const std::size_t end = std::min(line.find_first_of(" \t\r\n", start), line.size());
    const std::string_view word = line.substr(start, end - start);
    pos = end;
    if (word.starts_with("<img:") && word.ends_with(">")) {
      const std::string_view digits = word.substr(5, word.size() - 6);
      seq.items.push_back(SeqItem::img(static_cast<std::uint32_t>(parse_u64("image reference", digits))));
      continue;
    }
    auto it = ids_.find(word);
    if (it == ids_.end()) {
      if (ids_.size() >= capacity_) {
        throw DataError(fmt::format("corpus has more than {} distinct words (vocabulary capacity)", capacity_));
      }
      it = ids_.emplace(std::string(word), static_cast<std::int32_t>(ids_.size())).first;
    }
    seq.items.push_back(SeqItem::tok(it->second));
  }
  return seq;
}

std::vector<ExamplePair> preprocess_documents(std::span<const MixedSequence> docs, const TokenLayout& layout,
                                              const PreprocessOptions& options) {
  if (options.bank.size() >= kVisionPrefixTag) throw ConfigError("denoiser bank too large");
  std::vector<ExamplePair> out;
  std::uint64_t chunk_index = 0;
  for (const MixedSequence& doc : docs) {
    if (doc.image_count() > 0) {
      if (auto pair = vision_prefix_split(doc)) out.push_back(std::move(*pair));
      continue;
    }
    const std::vector<std::int32_t> ids = doc.token_ids();
    for (std::span<const std::int32_t> chunk : chunk_tokens(ids, options.chunk_len)) {
      Rng rng(mix_seed(options.seed, chunk_index++));
      if (chunk.size() < 2) continue;
      const std::size_t tag = sample_denoiser(options.bank, rng);
      out.push_back(corrupt_spans(chunk, options.bank[tag], layout, rng, static_cast<std::uint8_t>(tag)));
    }
  }
  for (const ExamplePair& p : out) {
    if (p.input.expanded_length() > kMaxPairLength || p.target.size() > kMaxPairLength) {
      throw DataError(fmt::format("example exceeds {} items; lower the chunk length", kMaxPairLength));
    }
  }
  return out;
}

}  // namespace encdec
