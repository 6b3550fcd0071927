#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stagecap/corpus.hpp"
#include "stagecap/vocab.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace stagecap;

TEST(Tokenize, LowercasesSplitsAndTruncates) {
  EXPECT_EQ(tokenize("A Cat"), (Words{"a", "cat"}));
  EXPECT_EQ(tokenize("  two\tdogs \n"), (Words{"two", "dogs"}));
  EXPECT_EQ(tokenize("a b c d", 2), (Words{"a", "b"}));
  EXPECT_TRUE(tokenize("").empty());
}

TEST(Vocab, NoPruningAtZero) {
  const Vocab v = Vocab::build({{"a", "cat"}, {"a", "dog"}}, 0);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.content_tokens(), (std::vector<std::string>{"a", "cat", "dog"}));
  EXPECT_EQ(v.token(kPad), "[PAD]");
  EXPECT_EQ(v.token(kUnk), "[UNK]");
  EXPECT_EQ(v.token(kMask), "[MASK]");
}

TEST(Vocab, WordAtMinCountBecomesUnk) {
  std::vector<Words> caps;
  for (int i = 0; i < 5; ++i) caps.push_back({"rare"});
  for (int i = 0; i < 6; ++i) caps.push_back({"common"});
  const Vocab v = Vocab::build(caps, 5);
  EXPECT_FALSE(v.contains("rare"));
  EXPECT_TRUE(v.contains("common"));
  EXPECT_EQ(v.id("rare"), kUnk);
}

TEST(Vocab, CountsLowercasedAndTruncated) {
  const Vocab v = Vocab::build({{"A", "Cat", "tail"}}, 0, 2);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("cat"));
  EXPECT_FALSE(v.contains("tail"));
  EXPECT_THROW(Vocab::build({}, 0), Error);
}

TEST(Vocab, RoundTripAndUnkSurface) {
  const auto scenes = generate_synthetic(200, 3);
  const Vocab v = Vocab::build(all_captions(scenes), 0);
  for (const auto& w : v.content_tokens()) {
    EXPECT_EQ(v.decode(v.encode({w})), Words{w});
  }
  EXPECT_EQ(v.decode(v.encode({"xylophone"})), Words{"[UNK]"});
  for (TokenId id : v.content_ids()) EXPECT_FALSE(Vocab::is_special(id));
  EXPECT_THROW(v.token(static_cast<TokenId>(v.size())), Error);
}

TEST(Vocab, HighFreqRejectsSpecials) {
  Vocab v = Vocab::build({{"a", "b"}}, 0);
  EXPECT_THROW(v.set_high_freq({kMask}), Error);
  EXPECT_THROW(v.set_high_freq({99}), Error);
  EXPECT_NO_THROW(v.set_high_freq({3}));
}

TEST(HighFrequencySet, PicksTopTokensUntilCoverage) {
  // 100 tokens: a=15, on=6, then 79 singletons spread over other words.
  Words corpus_words;
  for (int i = 0; i < 15; ++i) corpus_words.push_back("a");
  for (int i = 0; i < 6; ++i) corpus_words.push_back("on");
  for (int i = 0; i < 79; ++i) corpus_words.push_back("w" + std::to_string(i % 20));
  const Vocab v = Vocab::build({corpus_words}, 0, SIZE_MAX);
  const auto hf = high_frequency_set(v, {v.encode(corpus_words)}, 0.2);
  EXPECT_EQ(hf, (std::set<TokenId>{v.id("a"), v.id("on")}));
  const auto single = high_frequency_set(v, {v.encode(corpus_words)}, 0.1);
  EXPECT_EQ(single, (std::set<TokenId>{v.id("a")}));
  EXPECT_THROW(high_frequency_set(v, {}, 0.0), Error);
  EXPECT_THROW(high_frequency_set(v, {}, 1.0), Error);
}

TEST(HighFrequencySet, MatchesExhaustiveSortOnSyntheticCorpus) {
  const auto scenes = generate_synthetic(500, 11);
  const Vocab v = Vocab::build(all_captions(scenes), 5);
  std::vector<TokenSeq> streams;
  for (const auto& c : all_captions(scenes)) streams.push_back(v.encode(c));
  const auto hf = high_frequency_set(v, streams, 0.2);

  std::map<std::string, double> counts;
  double total = 0;
  for (const auto& c : all_captions(scenes)) {
    for (const auto& w : c) {
      counts[v.token(v.id(w))] += 1;
      total += 1;
    }
  }
  std::vector<std::pair<double, std::string>> sorted;
  for (const auto& [w, n] : counts) {
    if (v.id(w) >= kFirstContentId) sorted.push_back({-n, w});
  }
  std::sort(sorted.begin(), sorted.end());
  std::set<TokenId> expected;
  double mass = 0;
  for (const auto& [neg, w] : sorted) {
    if (mass >= 0.2 * total) break;
    expected.insert(v.id(w));
    mass += -neg;
  }
  EXPECT_EQ(hf, expected);
  EXPECT_GE(mass / total, 0.2);
  double without_last = mass + sorted[expected.size() - 1].first;
  EXPECT_LT(without_last / total, 0.2);
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic(50, 7);
  const auto b = generate_synthetic(50, 7);
  const auto c = generate_synthetic(50, 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].features, b[i].features);
    EXPECT_EQ(a[i].captions, b[i].captions);
    EXPECT_EQ(a[i].attributes, b[i].attributes);
  }
  EXPECT_NE(a[0].captions, c[0].captions);
}

TEST(Synthetic, ReferenceContentWordsComeFromAttributes) {
  const auto scenes = generate_synthetic(1000, 7);
  for (const auto& s : scenes) {
    const std::set<std::string> attrs(s.attributes.begin(), s.attributes.end());
    ASSERT_GE(s.captions.size(), 2u);
    ASSERT_LE(s.captions.size(), 5u);
    for (const auto& c : s.captions) {
      ASSERT_GE(c.size(), 1u);
      ASSERT_LE(c.size(), kDefaultMaxLen);
      for (const auto& w : c) {
        EXPECT_TRUE(is_synthetic_function_word(w) || attrs.count(w))
            << "scene " << s.id << " word '" << w << "'";
      }
    }
  }
}

TEST(Synthetic, VocabularySizeAndLengthSpread) {
  const auto scenes = generate_synthetic(2000, 1);
  const Vocab v = Vocab::build(all_captions(scenes), 0);
  // Roughly a hundred types plus the three reserved tokens.
  EXPECT_GE(v.size(), 90u);
  EXPECT_LE(v.size(), 203u);
  std::set<std::size_t> lengths;
  for (const auto& c : all_captions(scenes)) lengths.insert(c.size());
  EXPECT_GE(lengths.size(), 6u);
}

TEST(Synthetic, ZeroNoiseIsMultiHot) {
  SyntheticParams p;
  p.noise_sigma = 0.0;
  for (const auto& s : generate_synthetic(100, 2, p)) {
    ASSERT_EQ(s.features.size(), synthetic_feature_dim(p));
    for (double f : s.features) EXPECT_TRUE(f == 0.0 || f == 1.0);
  }
}

TEST(Synthetic, RejectsEmptyRequest) {
  EXPECT_THROW(generate_synthetic(0, 1), Error);
}

TEST(LengthDistribution, DegenerateAlwaysSamplesSupport) {
  auto d = LengthDistribution::from_counts({0, 0, 0, 0, 0, 0, 0, 0, 0, 12});
  Rng rng = make_rng(1);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(d.sample(rng), 9u);
  EXPECT_EQ(d.mode(), 9u);
}

TEST(LengthDistribution, FiftyFiftyWithinTwoPercent) {
  auto d = LengthDistribution::from_counts({0, 0, 0, 5, 5});
  Rng rng = make_rng(2);
  std::size_t threes = 0;
  for (int i = 0; i < 100000; ++i) threes += d.sample(rng) == 3;
  EXPECT_NEAR(threes / 100000.0, 0.5, 0.02);
}

TEST(LengthDistribution, ChiSquareAgainstSyntheticCounts) {
  const auto text = generate_synthetic(2000, 4);
  const Vocab v = Vocab::build(all_captions(text), 5);
  const auto d = LengthDistribution::from_scenes(encode_scenes(text, v));
  double psum = 0.0;
  for (std::size_t l = 0; l < d.counts().size(); ++l) psum += d.probability(l);
  EXPECT_NEAR(psum, 1.0, 1e-12);
  Rng rng = make_rng(9);
  std::vector<double> observed(d.counts().size(), 0.0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) observed[d.sample(rng)] += 1;
  std::vector<double> expected, obs;
  for (std::size_t l = 1; l < observed.size(); ++l) {
    if (d.counts()[l] == 0) {
      EXPECT_EQ(observed[l], 0.0) << "sampled unobserved length " << l;
      continue;
    }
    expected.push_back(d.probability(l) * draws);
    obs.push_back(observed[l]);
  }
  EXPECT_LT(oracle::chi_square(obs, expected),
            oracle::chi_square_critical_99(expected.size() - 1));
}

TEST(LengthDistribution, RejectsBadInput) {
  EXPECT_THROW(LengthDistribution::from_counts({}), Error);
  EXPECT_THROW(LengthDistribution::from_counts({1, 2}), Error);
  EXPECT_THROW(LengthDistribution::from_counts({0, 0, 0}), Error);
}

TEST(FeatureFile, ExactCountAndLittleEndian) {
  test::TempDir dir;
  const auto path = dir.path() / "x.feat";
  {
    std::ofstream out(path, std::ios::binary);
    out << "FEAT 1 2 4\n";
    for (int i = 0; i < 8; ++i) {
      const float f = static_cast<float>(i) + 0.5f;
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) out.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  const auto rows = read_features(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][3], 7.5);
}

TEST(FeatureFile, RejectsCountMismatchAndNonFinite) {
  test::TempDir dir;
  const auto path = dir.path() / "bad.feat";
  {
    std::ofstream out(path, std::ios::binary);
    out << "FEAT 1 2 4\n" << std::string(12, '\0');
  }
  try {
    read_features(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.feat"), std::string::npos);
  }
  write_features(path, {{1.0, std::numeric_limits<double>::infinity()}});
  try {
    read_features(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("record 0, column 1"),
              std::string::npos)
        << e.what();
  }
}

TEST(LoadExternal, UnknownSceneIdIsNamed) {
  test::TempDir dir;
  write_features(dir.path() / "f.feat", {{0.0, 1.0}, {1.0, 0.0}});
  {
    std::ofstream caps(dir.path() / "c.tsv");
    caps << "0\ta dog\n1\ta cat\n7\ta bird\n";
  }
  try {
    load_external(dir.path() / "f.feat", dir.path() / "c.tsv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("'7'"), std::string::npos) << e.what();
  }
}

TEST(LoadExternal, SceneWithoutCaptionsRejected) {
  test::TempDir dir;
  write_features(dir.path() / "f.feat", {{0.0}, {1.0}});
  {
    std::ofstream caps(dir.path() / "c.tsv");
    caps << "0\ta dog\n";
  }
  EXPECT_THROW(load_external(dir.path() / "f.feat", dir.path() / "c.tsv"),
               Error);
}

TEST(LoadExternal, CorpusRoundTrip) {
  test::TempDir dir;
  const auto scenes = generate_synthetic(40, 5);
  save_corpus(dir.path(), "train", scenes);
  const auto back = load_corpus(dir.path(), "train");
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(back[i].id, scenes[i].id);
    EXPECT_EQ(back[i].features, scenes[i].features);
    EXPECT_EQ(back[i].captions, scenes[i].captions);
    EXPECT_EQ(back[i].attributes, scenes[i].attributes);
  }
}
