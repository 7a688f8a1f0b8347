// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "shardtrain/data.hpp"
#include "shardtrain/error.hpp"

namespace shardtrain {
namespace {

TEST(CleanText, GoldenExamples) {
  EXPECT_EQ(clean_text("<p>Hello  World</p>"), "hello world");
  EXPECT_EQ(clean_text(""), "");
  EXPECT_EQ(clean_text("a\tb\n\nc\x01" "d"), "a b cd");
  EXPECT_EQ(clean_text("  <br/>x <b>y</b>  "), "x y");
  EXPECT_EQ(clean_text("caf\xc3\xa9 NEWS"), "caf\xc3\xa9 news");
  EXPECT_EQ(clean_text("1 < 2"), "1 < 2");
}

TEST(CleanText, Idempotent) {
  for (const char* s : {"already clean text", "<div>Mixed CASE\t\ttext</div>", "x"}) {
    const std::string once = clean_text(s);
    EXPECT_EQ(clean_text(once), once);
  }
}

TEST(CleanText, InvalidUtf8ReportsOffset) {
  try {
    clean_text("abc\xff" "def");
    FAIL() << "expected an ingestion error";
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.byte_offset(), 3u);
  }
  EXPECT_THROW(clean_text("\xc0\xaf"), IngestionError);  // overlong
  EXPECT_THROW(clean_text("ok\xe2\x82"), IngestionError);  // truncated
}

TEST(Tokenize, ByteModeLayout) {
  Vocab v = Vocab::byte_level();
  EXPECT_EQ(v.size(), 259u);
  EXPECT_EQ(v.pad_id(), 256u);
  EXPECT_EQ(v.unknown_id(), 257u);
  EXPECT_EQ(v.eot_id(), 258u);
  EXPECT_EQ(tokenize("ab", v), (std::vector<TokenId>{97, 98}));
}

TEST(Tokenize, ByteModeRoundTrip) {
  Vocab v = Vocab::byte_level();
  for (std::string s : {"hello world", "", "caf\xc3\xa9 \x7f"}) {
    auto ids = tokenize(s, v);
    EXPECT_EQ(detokenize(ids, v), s);
  }
}

TEST(Tokenize, WordModeWithFixedVocab) {
  Vocab v = Vocab::from_words({"the", "cat"});
  EXPECT_EQ(tokenize("the cat the", v), (std::vector<TokenId>{0, 1, 0}));
  EXPECT_EQ(tokenize("the dog", v), (std::vector<TokenId>{0, v.unknown_id()}));
  EXPECT_EQ(detokenize(tokenize("cat the", v), v), "cat the");
  EXPECT_THROW(Vocab::from_words({"a", "a"}), ValidationError);
}

TEST(Tokenize, WordVocabRanksByFrequencyAndCaps) {
  Vocab v = Vocab::build_word("b a c a b a d", 6);
  ASSERT_EQ(v.size(), 6u);
  EXPECT_EQ(v.token(0), "a");
  EXPECT_EQ(v.token(1), "b");
  EXPECT_EQ(v.token(2), "c");
  EXPECT_EQ(v.id_of("d"), v.unknown_id());
  for (TokenId id = 0; id < v.size(); ++id) {
    if (!v.is_special(id)) {
      EXPECT_EQ(v.id_of(v.token(id)), id);
    }
  }
}

TEST(Dataset, SegmentsIntoNextTokenPairs) {
  std::vector<TokenId> stream = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  TokenDataset d(stream, 4, 10);
  EXPECT_EQ(d.sequence_count(), 2u);
  const std::size_t idx[] = {1, 0};
  TokenBatch b = d.batch(idx);
  EXPECT_EQ(b.seq_len, 3u);
  EXPECT_EQ(b.inputs, (std::vector<TokenId>{4, 5, 6, 0, 1, 2}));
  EXPECT_EQ(b.targets, (std::vector<TokenId>{5, 6, 7, 1, 2, 3}));
  EXPECT_THROW(TokenDataset(stream, 4, 9), ValidationError);
  EXPECT_THROW(TokenDataset(stream, 1, 10), ValidationError);
}

TEST(Dataset, SyntheticCorpusIsSeeded) {
  auto a = synthetic_tokens(500, 17, 3), b = synthetic_tokens(500, 17, 3), c = synthetic_tokens(500, 17, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (TokenId t : a) EXPECT_LT(t, 17u);
}

TEST(Csv, QuotedFieldsAndHeaders) {
  auto rows = parse_csv("title,content\r\n\"A, b\",\"say \"\"hi\"\"\nthere\"\nx,y");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "A, b");
  EXPECT_EQ(rows[1][1], "say \"hi\"\nthere");
  EXPECT_EQ(rows[2][1], "y");
  EXPECT_THROW(parse_csv("\"open"), IngestionError);
}

TEST(Corpus, LoadsTextAndCsvFiles) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "shardtrain_corpus_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "a.txt") << "<h1>First</h1> Doc";
  std::ofstream(dir / "b.csv") << "title,content\nT1,Second DOC\nT2,\"third, doc\"\n";
  std::ofstream(dir / "ignored.md") << "nope";
  auto docs = load_corpus_documents(dir);
  EXPECT_EQ(docs, (std::vector<std::string>{"first doc", "second doc", "third, doc"}));
  Vocab v = Vocab::byte_level();
  auto stream = tokenize_documents(docs, v);
  EXPECT_EQ(std::count(stream.begin(), stream.end(), v.eot_id()), 3);
  std::ofstream(dir / "c.csv") << "title,body\nx,y\n";
  EXPECT_THROW(load_corpus_documents(dir), ValidationError);
  fs::remove_all(dir);
}

TEST(BatchPlan, StridedShardsAndDroppedRemainder) {
  BatchPlan plan{4, 2, 7};
  auto perm = epoch_permutation(9, 7, 1);
  auto r0 = shard_batches(plan, 9, 1, 0);
  auto r1 = shard_batches(plan, 9, 1, 1);
  ASSERT_EQ(r0.size(), 2u);
  EXPECT_EQ(r0[0], (std::vector<std::size_t>{perm[0], perm[2]}));
  EXPECT_EQ(r0[1], (std::vector<std::size_t>{perm[4], perm[6]}));
  EXPECT_EQ(r1[0], (std::vector<std::size_t>{perm[1], perm[3]}));
  EXPECT_THROW(shard_batches(BatchPlan{3, 2, 0}, 9, 1, 0), ValidationError);
}

TEST(BatchPlan, UnionOfRanksIsTheGlobalBatch) {
  for (int w : {1, 2, 4}) {
    BatchPlan plan{8, w, 11};
    auto global = global_batches(plan, 37, 2);
    std::set<std::size_t> all;
    for (std::size_t step = 0; step < global.size(); ++step) {
      std::multiset<std::size_t> from_ranks;
      for (int r = 0; r < w; ++r) {
        auto mine = shard_batches(plan, 37, 2, r);
        EXPECT_EQ(mine[step].size(), 8u / static_cast<std::size_t>(w));
        from_ranks.insert(mine[step].begin(), mine[step].end());
      }
      EXPECT_EQ(from_ranks, std::multiset<std::size_t>(global[step].begin(), global[step].end()));
      for (std::size_t i : global[step]) EXPECT_TRUE(all.insert(i).second);
    }
    EXPECT_EQ(all.size(), 32u);
  }
}

TEST(BatchPlan, PermutationDependsOnSeedAndEpoch) {
  auto a = epoch_permutation(50, 1, 1);
  EXPECT_EQ(a, epoch_permutation(50, 1, 1));
  EXPECT_NE(a, epoch_permutation(50, 1, 2));
  EXPECT_NE(a, epoch_permutation(50, 2, 1));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

}  // namespace
}  // namespace shardtrain
