#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "copy_task.hpp"
#include "glossmt/data.hpp"
#include "temp_dir.hpp"

namespace glossmt {
namespace {

using testing::TempDir;

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

TEST(Tokenize, SplitsOnAnyWhitespace) {
  EXPECT_EQ(tokenize("  a\tb  c \r"), (Sentence{"a", "b", "c"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Tokenize, RoundTripsNormalizedLines) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = testing::make_copy_corpus(1, 30, 12, rng(), "x");
    const std::string line = detokenize(c.source[0]);
    EXPECT_EQ(detokenize(tokenize(line)), line);
    EXPECT_EQ(tokenize(line), c.source[0]);
  }
}

TEST(LoadCorpus, PairsLinesInOrder) {
  TempDir dir;
  write_file(dir / "a.src", "guten morgen\nes regnet heute\n");
  write_file(dir / "a.tgt", "MORGEN\nHEUTE REGEN\n");
  const auto c = load_corpus(dir / "a.src", dir / "a.tgt", "train");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.source[1], (Sentence{"es", "regnet", "heute"}));
  EXPECT_EQ(c.target[0], (Sentence{"MORGEN"}));
  EXPECT_EQ(c.split, "train");
}

TEST(LoadCorpus, MisalignedFilesReportBothCounts) {
  TempDir dir;
  write_file(dir / "a.src", "x\ny\nz\n");
  write_file(dir / "a.tgt", "X\nY\n");
  try {
    load_corpus(dir / "a.src", dir / "a.tgt", "dev");
    FAIL() << "expected AlignmentError";
  } catch (const AlignmentError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("2"), std::string::npos);
  }
}

TEST(LoadCorpus, EmptySentenceNamesFileAndLine) {
  TempDir dir;
  write_file(dir / "a.src", "x\n \ny\n");
  write_file(dir / "a.tgt", "X\nY\nZ\n");
  try {
    load_corpus(dir / "a.src", dir / "a.tgt", "dev");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("a.src:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_corpus(dir / "missing.src", dir / "a.tgt", "dev"), DataError);
}

TEST(Vocabulary, ReservedEntriesComeFirst) {
  ParallelCorpus c{"train", {{"a", "b"}, {"a"}}, {{"A"}, {"A"}}};
  const Vocabulary v = build_vocab(c, Side::kSource);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.token(kPadId), "<pad>");
  EXPECT_EQ(v.token(kBosId), "<s>");
  EXPECT_EQ(v.token(kEosId), "</s>");
  EXPECT_EQ(v.token(kUnkId), "<unk>");
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  EXPECT_EQ(v.id("zzz"), kUnkId);
}

TEST(Vocabulary, OrderIsFrequencyThenLexicographic) {
  ParallelCorpus c{"train", {{"d", "c", "b"}, {"b", "c", "a"}}, {{"x"}, {"x"}}};
  EXPECT_EQ(build_vocab(c, Side::kSource).tokens(),
            (std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", "b", "c", "a", "d"}));
}

TEST(Vocabulary, IndependentOfSentenceOrder) {
  auto c = testing::make_copy_corpus(200, 40, 8, 5, "train");
  const Vocabulary v1 = build_vocab(c, Side::kTarget);
  std::mt19937_64 rng(1);
  std::shuffle(c.target.begin(), c.target.end(), rng);
  EXPECT_EQ(build_vocab(c, Side::kTarget), v1);
  EXPECT_EQ(build_vocab(c, Side::kTarget).hash(), v1.hash());
}

TEST(Vocabulary, MinFrequencyDropsRareTokens) {
  ParallelCorpus c{"train", {{"a", "a", "b"}}, {{"x"}}};
  const Vocabulary v = build_vocab(c, Side::kSource, 2);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
}

TEST(Vocabulary, FileRoundTrip) {
  TempDir dir;
  const Vocabulary v = build_vocab(testing::make_copy_corpus(50, 25, 6, 2, "train"), Side::kSource);
  v.save(dir / "vocab.txt");
  const Vocabulary back = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.hash(), v.hash());
  write_file(dir / "bad.txt", "<s>\n<pad>\n</s>\n<unk>\n");
  EXPECT_THROW(Vocabulary::load(dir / "bad.txt"), DataError);
}

TEST(Vocabulary, EncodeDecodeRoundTripWithUnknowns) {
  const Vocabulary v = Vocabulary::from_tokens({"a", "b", "c"});
  EXPECT_EQ(v.decode(v.encode({"a", "c", "b"})), (Sentence{"a", "c", "b"}));
  EXPECT_EQ(v.decode(v.encode({"a", "q"})), (Sentence{"a", "<unk>"}));
  EXPECT_EQ(v.decode({kBosId, 4, kPadId, 5, kEosId, 6}), (Sentence{"a", "b"}));
}

TEST(Batch, ShiftsTargetsAndMarksPadding) {
  const auto b = SequenceBatch::build({{4, 5, 6}, {7}}, {{8, 9}, {10, 11, 12}});
  EXPECT_EQ(b.src_len, 3u);
  EXPECT_EQ(b.tgt_len, 4u);
  EXPECT_EQ(b.tgt_in_ids, (std::vector<std::int32_t>{kBosId, 8, 9, kPadId, kBosId, 10, 11, 12}));
  EXPECT_EQ(b.tgt_out_ids, (std::vector<std::int32_t>{8, 9, kEosId, kPadId, 10, 11, 12, kEosId}));
  EXPECT_EQ(b.src_pad, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1}));
  EXPECT_EQ(b.target_tokens(), 7u);
  EXPECT_THROW(SequenceBatch::build({{}}, {{4}}), DataError);
}

class MakeBatches : public ::testing::TestWithParam<std::size_t> {};

TEST_P(MakeBatches, PartitionsCorpusWithinBudget) {
  const std::size_t budget = GetParam();
  const auto corpus = testing::make_copy_corpus(300, 30, 12, 9, "train");
  const Vocabulary v = build_vocab(corpus, Side::kSource);
  std::mt19937_64 rng(1);
  const auto batches = make_batches(corpus, v, v, budget, &rng);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_LE(b.batch * b.tgt_len, budget);
    EXPECT_GT(b.batch, 0u);
    for (std::size_t r = 0; r < b.batch; ++r) {
      seen.insert(b.indices[r]);
      const auto ids = v.encode(corpus.target[b.indices[r]]);
      for (std::size_t t = 0; t < ids.size(); ++t) EXPECT_EQ(b.tgt_out_ids[r * b.tgt_len + t], ids[t]);
    }
  }
  ASSERT_EQ(seen.size(), corpus.size());
  std::size_t expected = 0;
  for (std::size_t i : seen) EXPECT_EQ(i, expected++);
}

INSTANTIATE_TEST_SUITE_P(Budgets, MakeBatches, ::testing::Values(13, 40, 256, 4096));

TEST(MakeBatchesErrors, SentenceLongerThanBudget) {
  ParallelCorpus c{"train", {{"a"}}, {{"a", "b", "c", "d"}}};
  const Vocabulary v = Vocabulary::from_tokens({"a", "b", "c", "d"});
  EXPECT_THROW(make_batches(c, v, v, 4, nullptr), DataError);
  EXPECT_NO_THROW(make_batches(c, v, v, 5, nullptr));
}

TEST(MakeBatchesErrors, ShuffleIsSeedDeterministic) {
  const auto corpus = testing::make_copy_corpus(200, 30, 12, 9, "train");
  const Vocabulary v = build_vocab(corpus, Side::kSource);
  std::mt19937_64 r1(5), r2(5);
  const auto a = make_batches(corpus, v, v, 64, &r1);
  const auto b = make_batches(corpus, v, v, 64, &r2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].indices, b[i].indices);
}

TEST(Manifest, ResolvesRelativePaths) {
  TempDir dir;
  const auto manifest = testing::write_copy_dataset(dir.path(), 20, 5, 1);
  const Manifest m = Manifest::load(manifest);
  EXPECT_EQ(m.corpus("train").size(), 20u);
  EXPECT_EQ(m.corpus("test").size(), 5u);
  write_file(dir / "partial.txt", "train.src = train.src\n");
  EXPECT_THROW(Manifest::load(dir / "partial.txt"), DataError);
}

TEST(CorpusStatistics, TableAndComparison) {
  CorpusStatistics stats;
  stats.add(0, ParallelCorpus{"train", {{"a", "b"}, {"a"}}, {{"X"}, {"Y", "X"}}});
  stats.add(1, ParallelCorpus{"dev", {{"c"}}, {{"Z"}}});
  const std::string table = stats.table();
  EXPECT_NE(table.find("sentences 2 1 0 2 1 0\n"), std::string::npos) << table;
  EXPECT_NE(table.find("words 3 1 0 3 1 0\n"), std::string::npos) << table;
  EXPECT_NE(table.find("vocabulary 2 1 0 2 1 0\n"), std::string::npos) << table;
  EXPECT_TRUE(stats.compare(stats).empty());
  const auto diffs = stats.compare(CorpusStatistics::phoenix14t());
  EXPECT_EQ(diffs.size(), 18u);
  EXPECT_NE(diffs[0].find("observed 2, expected 7096"), std::string::npos) << diffs[0];
}

}  // namespace
}  // namespace glossmt
