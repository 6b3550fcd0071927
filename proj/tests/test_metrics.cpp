#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "stagecap/metrics.hpp"
#include "support/oracles.hpp"
#include "support/toy_corpus.hpp"

using namespace stagecap;
using test::words;

TEST(Bleu, PerfectAndDisjoint) {
  const std::vector<Words> c{words("a b c d e"), words("f g h i")};
  const std::vector<std::vector<Words>> same{{words("a b c d e")}, {words("f g h i")}};
  for (double b : bleu(c, same)) EXPECT_DOUBLE_EQ(b, 1.0);
  const std::vector<std::vector<Words>> other{{words("x y z w v")}, {words("p q r s")}};
  EXPECT_EQ(bleu(c, other)[0], 0.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  const auto b = bleu({words("a b c")}, {{words("a b d")}});
  EXPECT_NEAR(b[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(b[1], std::sqrt(2.0 / 3.0 * 1.0 / 2.0), 1e-15);
  EXPECT_EQ(b[2], 0.0);
  // Repeated words are clipped to the reference count.
  EXPECT_NEAR(bleu({words("the the the")}, {{words("the cat")}})[0],
              1.0 / 3.0, 1e-15);
}

TEST(Bleu, BrevityPenaltyUsesClosestReference) {
  const auto b = bleu({words("a b")}, {{words("a b c d")}});
  EXPECT_NEAR(b[0], std::exp(1.0 - 4.0 / 2.0), 1e-15);
  // Lengths 2 and 4 are equally close to 3; the shorter one wins, so no
  // penalty applies even though the longer reference would impose one.
  const auto tie = bleu({words("a b x")}, {{words("a b"), words("a b c d")}});
  EXPECT_NEAR(tie[0], 2.0 / 3.0, 1e-15);
}

TEST(Bleu, EmptyCandidateContributesNothing) {
  const auto b = bleu({Words{}, words("a b")}, {{words("x")}, {words("a b")}});
  EXPECT_NEAR(b[0], std::exp(1.0 - 3.0 / 2.0), 1e-15);
  EXPECT_EQ(bleu({Words{}}, {{words("a")}})[0], 0.0);
  EXPECT_THROW(bleu({words("a")}, {}), Error);
}

TEST(Bleu, MatchesOracleOnToyCorpus) {
  const auto t = test::toy_corpus();
  const auto got = bleu(t.candidates, t.references);
  const auto want = oracle::bleu(t.candidates, t.references);
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_NEAR(got[n], want[n], 1e-12) << "n=" << n + 1;
    EXPECT_GT(got[n], 0.0);
    EXPECT_LE(got[n], 1.0);
  }
}

TEST(Cider, IdenticalAndDisjoint) {
  const std::vector<std::vector<Words>> refs{{words("a red dog runs")},
                                             {words("two cats sleep")},
                                             {words("birds fly high")}};
  const Cider c(refs);
  EXPECT_NEAR(c.scene_score(words("a red dog runs"), 0), 10.0, 1e-12);
  EXPECT_EQ(c.scene_score(words("purple elephants"), 0), 0.0);
  EXPECT_THROW(Cider({{words("a")}}), Error);
  EXPECT_THROW(c.corpus_score({words("a")}), Error);
}

TEST(Cider, MatchesOracleOnToyCorpora) {
  const auto t = test::toy_corpus();
  EXPECT_NEAR(cider(t.candidates, t.references),
              oracle::cider(t.candidates, t.references), 1e-12);
  const std::vector<std::vector<Words>> three(t.references.begin(),
                                              t.references.begin() + 3);
  const std::vector<Words> c3(t.candidates.begin(), t.candidates.begin() + 3);
  EXPECT_NEAR(cider(c3, three), oracle::cider(c3, three), 1e-12);
}

TEST(Cider, PerSceneRangeAndOwnReference) {
  const auto t = test::toy_corpus();
  const Cider c(t.references);
  for (std::size_t s = 0; s < t.candidates.size(); ++s) {
    const double own = c.scene_score(t.candidates[s], s);
    EXPECT_GE(own, 0.0);
    EXPECT_LE(own, 10.0);
    for (const auto& r : t.references[s]) {
      EXPECT_GE(c.scene_score(r, s) + 1e-12, 0.0);
      EXPECT_LE(c.scene_score(r, s), 10.0 + 1e-12);
    }
  }
}

TEST(Metrics, PermutationInvariant) {
  auto t = test::toy_corpus();
  const auto b0 = bleu(t.candidates, t.references);
  const double c0 = cider(t.candidates, t.references);
  std::vector<std::size_t> order{3, 0, 4, 2, 1};
  std::vector<Words> cands;
  std::vector<std::vector<Words>> refs;
  for (std::size_t i : order) {
    cands.push_back(t.candidates[i]);
    refs.push_back(t.references[i]);
  }
  const auto b1 = bleu(cands, refs);
  for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(b0[n], b1[n], 1e-15);
  EXPECT_NEAR(c0, cider(cands, refs), 1e-12);
}

TEST(Diversity, Definitions) {
  const Vocab v = Vocab::from_tokens({"a", "dog", "cat", "runs", "sits"});
  const std::vector<Words> training{words("a dog runs"), words("a cat sits")};
  auto d = diversity({words("a dog runs"), words("a cat sits")}, training, v);
  EXPECT_EQ(d.novel_pct, 0.0);
  EXPECT_EQ(d.unique_pct, 100.0);
  EXPECT_EQ(d.vocab_usage_pct, 100.0);
  d = diversity({words("a dog sits"), words("a dog sits")}, training, v);
  EXPECT_EQ(d.novel_pct, 100.0);
  EXPECT_EQ(d.unique_pct, 0.0);
  EXPECT_EQ(d.vocab_usage_pct, 60.0);
  // Out-of-vocabulary words do not count as used types.
  d = diversity({words("zebra dog")}, training, v);
  EXPECT_EQ(d.vocab_usage_pct, 20.0);
}

TEST(Diversity, MatchesSetOracle) {
  const auto t = test::toy_corpus();
  std::vector<Words> all = t.training;
  for (const auto& s : t.references) all.insert(all.end(), s.begin(), s.end());
  const Vocab v = Vocab::build(all, 0);
  std::vector<Words> cands = t.candidates;
  cands.push_back(t.candidates[4]);  // one duplicate
  const auto got = diversity(cands, t.training, v);
  const auto tokens = v.content_tokens();
  const auto want =
      oracle::diversity(cands, t.training, std::set<std::string>(tokens.begin(), tokens.end()));
  EXPECT_EQ(got.novel_pct, want.novel);
  EXPECT_EQ(got.unique_pct, want.unique);
  EXPECT_EQ(got.vocab_usage_pct, want.usage);
}

TEST(ContentRecall, FractionOfAttributes) {
  const std::vector<Words> cands{words("a red dog runs"), words("a cat"),
                                 words("anything")};
  const std::vector<Words> attrs{words("red dog runs grass"), words("blue cat"),
                                 Words{}};
  EXPECT_NEAR(content_recall(cands, attrs), (0.75 + 0.5) / 2.0, 1e-15);
  EXPECT_TRUE(std::isnan(content_recall({words("a")}, {Words{}})));
  EXPECT_THROW(content_recall(cands, {}), Error);
}

TEST(MetricsReport, Formats) {
  MetricsReport r;
  r.bleu = {0.5, 0.25, 0.125, 0.0625};
  r.cider = 3.25;
  r.captions = 2;
  r.content_recall = std::nan("");
  const std::string kv = to_key_values(r);
  EXPECT_NE(kv.find("bleu4=0.062500\n"), std::string::npos);
  EXPECT_NE(kv.find("cider=3.250000\n"), std::string::npos);
  EXPECT_NE(kv.find("content_recall=nan\n"), std::string::npos);
  const std::string row = metrics_csv_row(r);
  const std::string header = metrics_csv_header();
  EXPECT_EQ(std::count(row.begin(), row.end(), ','),
            std::count(header.begin(), header.end(), ','));
}
