#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "encdec/binary_io.hpp"
#include "encdec/errors.hpp"
#include "encdec/ul2.hpp"

using namespace encdec;

namespace {

const TokenLayout kLayout{32'128, 100};

std::vector<std::int32_t> random_doc(std::size_t length, Rng& rng) {
  std::vector<std::int32_t> out(length);
  for (auto& id : out) id = static_cast<std::int32_t>(rng.below(kLayout.ordinary()));
  return out;
}

std::vector<std::int32_t> iota_doc(std::size_t length) {
  std::vector<std::int32_t> out(length);
  for (std::size_t i = 0; i < length; ++i) out[i] = static_cast<std::int32_t>(i + 1);
  return out;
}

std::vector<std::int32_t> input_tokens(const ExamplePair& p) { return p.input.token_ids(); }

std::vector<std::int32_t> ids(std::initializer_list<std::int32_t> l) { return l; }

}  // namespace

TEST(StandardBank, TuplesAndWeights) {
  const auto bank = standard_bank();
  ASSERT_EQ(bank.size(), 5u);
  const double mus[] = {3, 12, 32, 32};
  const double rs[] = {0.15, 0.5, 0.15, 0.5};
  double total = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(bank[i].mu, mus[i]);
    EXPECT_EQ(bank[i].r, rs[i]);
    EXPECT_EQ(bank[i].policy, SpanPolicy::multi_span);
    EXPECT_EQ(bank[i].weight, 1.0);
    total += bank[i].weight;
  }
  EXPECT_EQ(bank[4].policy, SpanPolicy::single_suffix);
  EXPECT_EQ(bank[4].r, 0.75);
  total += bank[4].weight;
  EXPECT_EQ(total, 8.0);
  EXPECT_EQ(bank[4].weight / total, 0.5);
}

TEST(RoundCount, HalfToEven) {
  EXPECT_EQ(round_count(2.5), 2u);
  EXPECT_EQ(round_count(3.5), 4u);
  EXPECT_EQ(round_count(0.15 * 100), 15u);
  EXPECT_EQ(round_count(0.75 * 6), 4u);
  EXPECT_THROW(round_count(-1.0), DataError);
}

TEST(RandomComposition, SumsAndUniformity) {
  Rng rng(3);
  std::map<std::vector<std::size_t>, int> counts;
  const int draws = 60'000;
  for (int i = 0; i < draws; ++i) {
    const auto c = random_composition(5, 3, rng);
    ASSERT_EQ(c.size(), 3u);
    ASSERT_EQ(c[0] + c[1] + c[2], 5u);
    for (auto part : c) ASSERT_GE(part, 1u);
    ++counts[c];
  }
  // C(4, 2) = 6 compositions, each 1/6.
  ASSERT_EQ(counts.size(), 6u);
  for (const auto& [c, n] : counts) EXPECT_NEAR(n / double(draws), 1.0 / 6, 0.01);
  EXPECT_THROW(random_composition(2, 3, rng), DataError);
}

TEST(CorruptSpans, SuffixExample) {
  Rng rng(1);
  const auto doc = iota_doc(8);
  const auto bank = standard_bank();
  const ExamplePair p = corrupt_spans(doc, bank[4], kLayout, rng, 4);
  EXPECT_EQ(input_tokens(p), ids({1, 2, kLayout.sentinel(0)}));
  EXPECT_EQ(p.target, ids({kLayout.sentinel(0), 3, 4, 5, 6, 7, 8, kLayout.sentinel(1)}));
  EXPECT_EQ(p.denoiser, 4);
}

TEST(CorruptSpans, HundredTokensFifteenNoiseFiveSpans) {
  const DenoiserSpec spec{3.0, 0.15, SpanPolicy::multi_span, 1.0};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const ExamplePair p = corrupt_spans(iota_doc(100), spec, kLayout, rng);
    std::size_t sentinels = 0;
    for (auto id : input_tokens(p)) sentinels += kLayout.is_sentinel(id);
    EXPECT_EQ(sentinels, 5u);
    EXPECT_EQ(p.target.size(), 15u + 6u);
  }
}

TEST(CorruptSpans, MinimalFourTokens) {
  const DenoiserSpec spec{1.0, 0.25, SpanPolicy::multi_span, 1.0};
  Rng rng(9);
  const auto doc = iota_doc(4);
  const ExamplePair p = corrupt_spans(doc, spec, kLayout, rng);
  EXPECT_EQ(p.target.size(), 3u);  // S0, one token, S1
  EXPECT_EQ(input_tokens(p).size(), 4u);
  EXPECT_EQ(uncorrupt(p, kLayout), doc);
}

TEST(CorruptSpans, SpansNeverAdjacentAndSentinelsIncrease) {
  Rng rng(4);
  const auto bank = standard_bank();
  for (int i = 0; i < 2000; ++i) {
    const auto& spec = bank[i % 4];
    const ExamplePair p = corrupt_spans(random_doc(2 + rng.below(200), rng), spec, kLayout, rng);
    const auto in = input_tokens(p);
    std::int32_t prev = -1;
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (!kLayout.is_sentinel(in[j])) continue;
      if (j > 0) EXPECT_FALSE(kLayout.is_sentinel(in[j - 1]));
      EXPECT_EQ(kLayout.sentinel_index(in[j]), static_cast<std::size_t>(prev + 1));
      prev = static_cast<std::int32_t>(kLayout.sentinel_index(in[j]));
    }
    std::size_t target_sentinels = 0;
    for (auto id : p.target) target_sentinels += kLayout.is_sentinel(id);
    EXPECT_EQ(target_sentinels, static_cast<std::size_t>(prev + 2));
  }
}

TEST(CorruptSpans, SpanStartIsUniformForOneSpan) {
  // L = 10, one span of 3 tokens: 8 possible start positions.
  const DenoiserSpec spec{3.0, 0.3, SpanPolicy::multi_span, 1.0};
  std::vector<int> starts(8, 0);
  const int draws = 40'000;
  Rng rng(8);
  for (int i = 0; i < draws; ++i) {
    const auto in = input_tokens(corrupt_spans(iota_doc(10), spec, kLayout, rng));
    for (std::size_t j = 0; j < in.size(); ++j)
      if (kLayout.is_sentinel(in[j])) ++starts.at(j);
  }
  for (int s : starts) EXPECT_NEAR(s / double(draws), 1.0 / 8, 0.01);
}

TEST(CorruptSpans, Errors) {
  Rng rng(0);
  const auto bank = standard_bank();
  EXPECT_THROW(corrupt_spans(ids({5}), bank[0], kLayout, rng), DataError);
  EXPECT_THROW(corrupt_spans(ids({5, kLayout.eos()}), bank[0], kLayout, rng), DataError);
  const TokenLayout few{64, 3};
  Rng rng2(0);
  EXPECT_THROW(corrupt_spans(iota_doc(50), bank[0], few, rng2), DataError);
}

TEST(CorruptSpans, InfeasiblePlacementFallsBackToSuffix) {
  // L = 3: 2 noise tokens in 2 spans around the single kept token.
  const DenoiserSpec spec{0.5, 0.67, SpanPolicy::multi_span, 1.0};
  Rng rng(2);
  EXPECT_EQ(uncorrupt(corrupt_spans(iota_doc(3), spec, kLayout, rng), kLayout), iota_doc(3));
  const DenoiserSpec dense{1.0, 0.8, SpanPolicy::multi_span, 1.0};
  // L = 10: noise 8, n = 8 spans but only 2 kept tokens -> suffix of 8.
  const ExamplePair p = corrupt_spans(iota_doc(10), dense, kLayout, rng);
  EXPECT_EQ(input_tokens(p), ids({1, 2, kLayout.sentinel(0)}));
  EXPECT_EQ(uncorrupt(p, kLayout), iota_doc(10));
}

TEST(Uncorrupt, RoundTripFuzz) {
  const auto bank = standard_bank();
  Rng rng(17);
  for (int i = 0; i < 10'000; ++i) {
    const auto& spec = bank[i % bank.size()];
    const auto doc = random_doc(2 + rng.below(300), rng);
    ASSERT_EQ(uncorrupt(corrupt_spans(doc, spec, kLayout, rng), kLayout), doc) << spec.name();
  }
}

TEST(Uncorrupt, SuffixAndMalformed) {
  ExamplePair p;
  p.input = MixedSequence::from_tokens(ids({1, 2, kLayout.sentinel(0)}));
  p.target = ids({kLayout.sentinel(0), 3, 4, kLayout.sentinel(1)});
  EXPECT_EQ(uncorrupt(p, kLayout), ids({1, 2, 3, 4}));

  ExamplePair missing = p;
  missing.target = ids({3, 4, kLayout.sentinel(1)});
  EXPECT_THROW(uncorrupt(missing, kLayout), DataError);
  ExamplePair no_final = p;
  no_final.target = ids({kLayout.sentinel(0), 3, 4});
  EXPECT_THROW(uncorrupt(no_final, kLayout), DataError);
  ExamplePair extra_input = p;
  extra_input.input = MixedSequence::from_tokens(ids({1, kLayout.sentinel(0), 2, kLayout.sentinel(1)}));
  EXPECT_THROW(uncorrupt(extra_input, kLayout), DataError);
}

TEST(SampleDenoiser, MixtureFrequencies) {
  const auto bank = standard_bank();
  Rng rng(5);
  std::vector<int> counts(bank.size(), 0);
  const int draws = 80'000;
  for (int i = 0; i < draws; ++i) ++counts[sample_denoiser(bank, rng)];
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(counts[i] / double(draws), 0.125, 0.02);
  EXPECT_NEAR(counts[4] / double(draws), 0.5, 0.02);
}

TEST(SampleDenoiser, SingleEntryAndBadWeights) {
  Rng rng(1);
  const std::vector<DenoiserSpec> one{{5.0, 0.2, SpanPolicy::multi_span, 0.3}};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_denoiser(one, rng), 0u);
  const std::vector<DenoiserSpec> bad{{5.0, 0.2, SpanPolicy::multi_span, 0.0}};
  EXPECT_THROW(sample_denoiser(bad, rng), ConfigError);
}

TEST(CorruptionStatistics, RateAndMeanSpanAt512) {
  const auto bank = standard_bank();
  for (std::size_t tag = 0; tag < 4; ++tag) {
    Rng rng(100 + tag);
    CorruptionStats stats(kLayout);
    for (int i = 0; i < 10'000; ++i) stats.add(corrupt_spans(random_doc(512, rng), bank[tag], kLayout, rng, tag));
    const DenoiserStats& s = stats.by_tag().at(static_cast<std::uint8_t>(tag));
    EXPECT_NEAR(s.corruption_rate() / bank[tag].r, 1.0, 0.10) << bank[tag].name();
    EXPECT_NEAR(s.mean_span_length() / bank[tag].mu, 1.0, 0.15) << bank[tag].name();
  }
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const ExamplePair p = corrupt_spans(random_doc(512, rng), bank[4], kLayout, rng, 4);
    EXPECT_EQ(p.target.size(), 384u + 2u);
    EXPECT_EQ(p.input.items.size(), 128u + 1u);
  }
}

TEST(VisionPrefixSplit, Examples) {
  MixedSequence a{{SeqItem::tok(1), SeqItem::img(0), SeqItem::tok(2), SeqItem::tok(3)}};
  const auto pa = vision_prefix_split(a);
  ASSERT_TRUE(pa);
  EXPECT_EQ(pa->input, (MixedSequence{{SeqItem::tok(1), SeqItem::img(0)}}));
  EXPECT_EQ(pa->target, ids({2, 3}));
  EXPECT_EQ(pa->denoiser, kVisionPrefixTag);

  MixedSequence b{{SeqItem::img(0), SeqItem::tok(1), SeqItem::img(1), SeqItem::tok(2)}};
  const auto pb = vision_prefix_split(b);
  ASSERT_TRUE(pb);
  EXPECT_EQ(pb->input, (MixedSequence{{SeqItem::img(0), SeqItem::tok(1), SeqItem::img(1)}}));
  EXPECT_EQ(pb->target, ids({2}));

  EXPECT_FALSE(vision_prefix_split(MixedSequence{{SeqItem::img(0)}}));
  EXPECT_THROW(vision_prefix_split(MixedSequence::from_tokens(ids({1, 2}))), DataError);
}

TEST(ChunkTokens, CoversDocumentWithoutLoss) {
  const auto doc = iota_doc(1030);
  const auto chunks = chunk_tokens(doc, 512);
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_EQ(chunks[2].size(), 6u);
  std::vector<std::int32_t> joined;
  for (auto c : chunks) joined.insert(joined.end(), c.begin(), c.end());
  EXPECT_EQ(joined, doc);
}

namespace {

std::vector<ExamplePair> sample_pairs() {
  Rng rng(12);
  std::vector<ExamplePair> pairs;
  const auto bank = standard_bank();
  for (int i = 0; i < 40; ++i) {
    const std::size_t tag = sample_denoiser(bank, rng);
    pairs.push_back(corrupt_spans(random_doc(20 + rng.below(100), rng), bank[tag], kLayout, rng,
                                  static_cast<std::uint8_t>(tag)));
  }
  pairs.push_back(*vision_prefix_split(MixedSequence{{SeqItem::img(70000), SeqItem::tok(300), SeqItem::tok(32000)}}));
  return pairs;
}

}  // namespace

TEST(Shard, RoundTripIsExact) {
  const auto pairs = sample_pairs();
  const auto bytes = encode_shard(pairs);
  EXPECT_EQ(decode_shard(bytes), pairs);
  EXPECT_EQ(encode_shard(decode_shard(bytes)), bytes);

  const auto path = std::filesystem::temp_directory_path() / "ul2_test_shard.bin";
  write_shard(path, pairs);
  EXPECT_EQ(read_shard(path), pairs);
  EXPECT_EQ(read_file_bytes(path), bytes);
  std::filesystem::remove(path);
}

TEST(Shard, EmptyShard) {
  const auto bytes = encode_shard({});
  EXPECT_EQ(bytes.size(), 16u);
  EXPECT_TRUE(decode_shard(bytes).empty());
}

TEST(Shard, TruncationNamesByteCounts) {
  const auto bytes = encode_shard(sample_pairs());
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  try {
    decode_shard(cut);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("offset"), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(cut.size())), std::string::npos) << msg;
  }
  std::vector<std::uint8_t> bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_shard(bad_magic), FormatError);
  std::vector<std::uint8_t> bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_shard(bad_version), VersionError);
}

TEST(WordVocabulary, FirstAppearanceIdsAndImages) {
  WordVocabulary vocab(3);
  const MixedSequence s = vocab.encode_line("the cat <img:2> the  dog\n");
  EXPECT_EQ(s, (MixedSequence{{SeqItem::tok(0), SeqItem::tok(1), SeqItem::img(2), SeqItem::tok(0), SeqItem::tok(2)}}));
  EXPECT_THROW(vocab.encode_line("bird"), DataError);
}

TEST(Preprocess, DeterministicAndMixture) {
  std::vector<MixedSequence> docs;
  Rng rng(0);
  for (int i = 0; i < 4000; ++i) docs.push_back(MixedSequence::from_tokens(random_doc(64, rng)));
  docs.push_back(MixedSequence{{SeqItem::img(0), SeqItem::tok(4)}});
  docs.push_back(MixedSequence{{SeqItem::tok(4), SeqItem::img(0)}});  // skipped
  PreprocessOptions opts;
  opts.seed = 42;
  const auto a = preprocess_documents(docs, kLayout, opts);
  EXPECT_EQ(a, preprocess_documents(docs, kLayout, opts));
  ASSERT_EQ(a.size(), 4001u);
  CorruptionStats stats(kLayout);
  for (const auto& p : a) stats.add(p);
  EXPECT_NEAR(stats.by_tag().at(4).examples / 4000.0, 0.5, 0.02);
  EXPECT_EQ(stats.by_tag().at(kVisionPrefixTag).examples, 1u);
  for (const auto& p : a)
    if (p.denoiser != kVisionPrefixTag) EXPECT_NO_THROW(uncorrupt(p, kLayout));
}
