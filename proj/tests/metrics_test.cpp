#include <random>

#include <gtest/gtest.h>

#include "glossmt/data.hpp"
#include "glossmt/metrics.hpp"
#include "oracles.hpp"

namespace glossmt {
namespace {

using testing::Seq;

std::vector<Sentence> lines(std::initializer_list<const char*> xs) {
  std::vector<Sentence> out;
  for (const char* x : xs) out.push_back(tokenize(x));
  return out;
}

Seq random_seq(std::mt19937_64& rng, std::size_t max_len, int vocab) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  Seq s(len(rng));
  for (auto& t : s) t = tok(rng);
  return s;
}

TEST(Bleu, IdentityScoresHundred) {
  const auto refs = lines({"a b c d e", "f g h i", "j k l m n o"});
  const auto r = bleu(refs, refs);
  for (double b : r.bleu) EXPECT_DOUBLE_EQ(b, 100.0);
  EXPECT_DOUBLE_EQ(r.brevity_penalty, 1.0);
}

TEST(Bleu, HandComputedValues) {
  const auto r = bleu(lines({"a b c"}), lines({"a b d"}));
  EXPECT_NEAR(r.bleu[0], 100.0 * 2.0 / 3.0, 1e-9);
  EXPECT_NEAR(r.bleu[1], 100.0 * std::sqrt(2.0 / 3.0 * 1.0 / 2.0), 1e-9);
  EXPECT_DOUBLE_EQ(r.bleu[2], 0.0);

  const auto short_hyp = bleu(lines({"a"}), lines({"a b c d"}));
  EXPECT_NEAR(short_hyp.bleu[0], 100.0 * std::exp(-3.0), 1e-9);
  EXPECT_NEAR(short_hyp.bleu[0], 4.98, 0.005);
  EXPECT_DOUBLE_EQ(short_hyp.bleu[1], 0.0);
}

TEST(Bleu, ClipsRepeatedTokens) {
  const auto r = bleu(lines({"the the the the"}), lines({"the cat"}));
  EXPECT_NEAR(r.precision[0], 0.25, 1e-12);
}

TEST(Bleu, EmptyHypothesesScoreZero) {
  const auto r = bleu(std::vector<Sentence>{{}}, lines({"a b"}));
  EXPECT_EQ(r.bleu[0], 0.0);
  EXPECT_EQ(r.brevity_penalty, 0.0);
}

TEST(Bleu, ArgumentErrors) {
  EXPECT_THROW(bleu(lines({"a"}), lines({"a", "b"})), ContractError);
  EXPECT_THROW(bleu(lines({"a"}), lines({"a"}), 5), ConfigError);
  EXPECT_THROW(rouge(lines({"a"}), lines({"a", "b"})), ContractError);
}

TEST(Rouge, HandComputedValues) {
  EXPECT_NEAR(rouge(lines({"a b c d"}), lines({"a b c d e f"})), 80.0, 1e-9);
  const auto same = lines({"x y z", "p q"});
  EXPECT_DOUBLE_EQ(rouge(same, same), 100.0);
  EXPECT_DOUBLE_EQ(rouge(lines({"a b"}), lines({"c d"})), 0.0);
  EXPECT_DOUBLE_EQ(rouge(lines({"a b", "a"}), lines({"a b", "c"})), 50.0);
}

TEST(Lcs, HandExamples) {
  EXPECT_EQ(lcs_length(Seq{1, 2, 3, 4}, Seq{2, 4, 3}), 2u);
  EXPECT_EQ(lcs_length(Seq{}, Seq{1}), 0u);
  EXPECT_EQ(lcs_length(Seq{1, 3, 2, 1, 3}, Seq{3, 1, 3, 2}), 3u);
}

TEST(Lcs, MatchesSubsequenceEnumeration) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const Seq a = random_seq(rng, 8, 3), b = random_seq(rng, 8, 3);
    ASSERT_EQ(lcs_length(a, b), testing::lcs_by_enumeration(a, b));
    ASSERT_EQ(lcs_length(a, b), lcs_length(b, a));
  }
}

TEST(Metrics, MatchBruteForceOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Seq> hyps, refs;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      hyps.push_back(random_seq(rng, 10, 4));
      refs.push_back(random_seq(rng, 10, 4));
      if (refs.back().empty()) refs.back().push_back(0);
    }
    const auto r = evaluate(hyps, refs);
    const auto o = testing::brute_force_scores(hyps, refs);
    for (int k = 0; k < 4; ++k) ASSERT_NEAR(r.bleu[k], o.bleu[k], 1e-12) << "trial " << trial << " n=" << k + 1;
    ASSERT_NEAR(r.rouge, o.rouge, 1e-12);
  }
}

TEST(Metrics, InvariantUnderPairPermutation) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Seq> hyps, refs;
    for (int i = 0; i < 8; ++i) {
      hyps.push_back(random_seq(rng, 9, 5));
      refs.push_back(random_seq(rng, 9, 5));
    }
    const auto a = evaluate(hyps, refs);
    std::vector<std::size_t> perm(hyps.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Seq> ph, pr;
    for (std::size_t i : perm) {
      ph.push_back(hyps[i]);
      pr.push_back(refs[i]);
    }
    const auto b = evaluate(ph, pr);
    for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(a.bleu[k], b.bleu[k]);
    EXPECT_NEAR(a.rouge, b.rouge, 1e-12);
  }
}

TEST(Metrics, ScoresStayInRange) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Seq> hyps, refs;
    for (int i = 0; i < 4; ++i) {
      hyps.push_back(random_seq(rng, 12, 3));
      refs.push_back(random_seq(rng, 12, 3));
    }
    const auto r = evaluate(hyps, refs);
    for (int k = 0; k < 4; ++k) {
      EXPECT_GE(r.bleu[k], 0.0);
      EXPECT_LE(r.bleu[k], 100.0 + 1e-9);
    }
    EXPECT_GE(r.rouge, 0.0);
    EXPECT_LE(r.rouge, 100.0 + 1e-9);
  }
}

// Clipping can make a higher-order precision exceed a lower one, so neither
// BLEU-n nor p_n is monotone in n.
TEST(Metrics, HigherOrderPrecisionCanExceedLowerOrder) {
  const auto r = bleu(lines({"a b a"}), lines({"b a b"}));
  EXPECT_NEAR(r.precision[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.precision[1], 1.0, 1e-12);
  EXPECT_GT(r.bleu[1], r.bleu[0]);
}

TEST(ScoreReport, KeyValueOutputNamesVariant) {
  const auto r = evaluate(lines({"a b c"}), lines({"a b d"}));
  const std::string kv = r.to_key_values();
  EXPECT_NE(kv.find("BLEU-1 = 66.67\n"), std::string::npos) << kv;
  EXPECT_NE(kv.find("ROUGE-L-F1 = 66.67\n"), std::string::npos) << kv;
  EXPECT_NE(kv.find("rouge_variant = ROUGE-L-F1"), std::string::npos);
}

}  // namespace
}  // namespace glossmt
